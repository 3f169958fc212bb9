#!/usr/bin/env python3
"""
Tests for the network builders and the graph executor
Full-size networks are only shape-inferred; forward passes run at toy width.
"""

import math

import numpy as np
import pytest

import nn_ops
from cost_analyzer import count_flops, count_params
from network_builder import (RESNET_BLOCKS, BlockSpec, ConfigError, GraphBuilder, build_bottleneck,
                             build_classification_net, build_pyconvresnet3d, build_pyconvsegnet,
                             build_pyconvssd, describe_stages)
from network_graph import INPUT_ID, NetworkGraph
from pyconv_layer import make_pyconv_spec
from tensor_utils import ShapeError, philox_generator


def stage_shapes(net: NetworkGraph, input_shape) -> dict:
    shapes = net.infer_shapes(input_shape)
    return {stage['name']: shapes[stage['output']] for stage in net.meta['stages']}


def test_bottleneck_with_maxpool_projection_shortcut():
    """Stage-1 first block: 64 -> 256 channels, spatial halved, pool before the 1x1 projection"""
    net = NetworkGraph('block', in_channels=64)
    spec = BlockSpec(64, 64, make_pyconv_spec(64, 64, [3, 5, 7, 9], stride=2), 256, (2, 2), 'maxpool+projection')
    nodes = build_bottleneck(GraphBuilder(net), 'layer1.0', INPUT_ID, spec)
    ids = [n.id for n in nodes]
    assert ids.index('layer1.0.downsample.pool') < ids.index('layer1.0.downsample.conv')
    assert net.node('layer1.0.downsample.conv').spec.stride == (1, 1)
    assert net.infer_shapes((1, 64, 112, 112))[nodes[-1].id] == (1, 256, 56, 56)


def test_identity_block_emits_no_projection():
    net = NetworkGraph('block', in_channels=256)
    spec = BlockSpec(256, 64, make_pyconv_spec(64, 64, [3, 5]), 256, (1, 1))
    nodes = build_bottleneck(GraphBuilder(net), 'b', INPUT_ID, spec)
    assert not any('downsample' in n.id for n in nodes)
    assert [n.kind for n in nodes][-2:] == ['add', 'relu']


def test_block_spec_requires_projection_when_strided():
    spec = BlockSpec(64, 64, make_pyconv_spec(64, 64, [3], stride=2), 256, (2, 2), 'identity')
    assert any("projection shortcut required" in p for p in spec.problems())
    with pytest.raises(ConfigError):
        build_bottleneck(GraphBuilder(NetworkGraph('bad', 64)), 'b', INPUT_ID, spec)


@pytest.mark.parametrize("depth", [50, 101, 152])
def test_block_counts_per_depth(depth):
    net = build_classification_net('pyconvresnet', depth)
    assert net.count('pyconv') == sum(RESNET_BLOCKS[depth])
    assert [s['blocks'] for s in net.meta['stages'][1:]] == list(RESNET_BLOCKS[depth])
    assert net.validate() == []


@pytest.mark.parametrize("family", ['resnet-baseline', 'pyconvresnet', 'pyconvhgresnet', 'pyconvresnet-top'])
def test_every_family_validates(family):
    net = build_classification_net(family, 50)
    assert net.validate() == []
    assert net.infer_shapes((1, 3, 224, 224))['fc'] == (1, 1000)


def test_pyconvresnet50_stage_shapes():
    """Every stage halves the map in its first block; the stem has no max pool"""
    net = build_classification_net('pyconvresnet', 50)
    shapes = stage_shapes(net, (1, 3, 224, 224))
    assert shapes == {
        'stem': (1, 64, 112, 112),
        'stage1': (1, 256, 56, 56),
        'stage2': (1, 512, 28, 28),
        'stage3': (1, 1024, 14, 14),
        'stage4': (1, 2048, 7, 7),
    }
    assert net.count('maxpool') == 4


def test_baseline_stem_pools():
    net = build_classification_net('resnet-baseline', 50)
    shapes = stage_shapes(net, (1, 3, 224, 224))
    assert shapes['stem'] == (1, 64, 56, 56)
    assert shapes['stage1'] == (1, 256, 56, 56)
    assert net.count('pyconv') == 0
    assert net.count('conv') == 1 + 3 * 16 + 4


def test_stage_level_schedule():
    """(4, 3, 2, 1): stage-4 PyConv1 is a plain 3x3, G=1"""
    net = build_classification_net('pyconvresnet', 50)
    first = {}
    for node in net.nodes:
        if node.kind == 'pyconv':
            first.setdefault(node.id.split('.')[0], node.spec)
    assert [s.n_levels for s in first.values()] == [4, 3, 2, 1]
    assert [lv.groups for lv in first['layer1'].levels] == [1, 4, 8, 16]
    assert [lv.groups for lv in first['layer2'].levels] == [1, 4, 8]
    assert [(lv.kernel, lv.groups) for lv in first['layer4'].levels] == [((3, 3), 1)]


def test_hg_variant_doubles_width_and_groups():
    net = build_classification_net('pyconvhgresnet', 50)
    spec = net.node('layer1.0.pyconv2').spec
    assert spec.in_channels == 128
    assert [lv.groups for lv in spec.levels] == [32, 32, 32, 32]
    assert [lv.groups for lv in net.node('layer2.0.pyconv2').spec.levels] == [32, 64, 64]
    with pytest.raises(ConfigError):
        build_classification_net('pyconvhgresnet', 50, (4, 4, 4, 4))


def test_top_variant_keeps_largest_kernel():
    net = build_classification_net('pyconvresnet-top', 50)
    levels = net.node('layer1.0.pyconv2').spec.levels
    assert [(lv.kernel, lv.out_channels, lv.groups) for lv in levels] == [((9, 9), 64, 16)]


def test_five_level_schedule_fits_groups_to_narrow_levels():
    """(5, 4, 3, 2): the 8-channel 9x9 and 11x11 levels of stage 1 fall back to G=8"""
    net = build_classification_net('pyconvresnet', 50, (5, 4, 3, 2), downsample='stem')
    assert net.validate() == []
    levels = net.node('layer1.0.pyconv2').spec.levels
    assert [(lv.kernel[0], lv.out_channels, lv.groups) for lv in levels] == [
        (3, 16, 1), (5, 16, 4), (7, 16, 8), (9, 8, 8), (11, 8, 8)]
    assert [lv.groups for lv in net.node('layer2.0.pyconv2').spec.levels] == [1, 4, 8, 16]
    # middle convs per stage: 3 x 34,816 + 4 x 108,288 + 6 x 450,560 + 3 x 1,998,848
    baseline = build_classification_net('resnet-baseline', 50)
    assert count_params(baseline)[1] - count_params(net)[1] == 11_317_248 - 9_237_504


def test_single_level_schedule_costs_like_baseline():
    """(1, 1, 1, 1) with stem downsampling is the baseline ResNet, parameter and FLOP exact"""
    pyconv = build_classification_net('pyconvresnet', 50, (1, 1, 1, 1), downsample='stem')
    baseline = build_classification_net('resnet-baseline', 50)
    assert count_params(pyconv)[1] == count_params(baseline)[1]
    shape = (1, 3, 224, 224)
    assert count_flops(pyconv, shape)[1] == count_flops(baseline, shape)[1]
    # shortcut placement moves only parameter-free pooling
    assert count_params(build_classification_net('pyconvresnet', 50, (1, 1, 1, 1)))[1] == count_params(baseline)[1]


def test_invalid_builder_arguments():
    with pytest.raises(ConfigError):
        build_classification_net('densenet', 50)
    with pytest.raises(ConfigError):
        build_classification_net('pyconvresnet', 34)
    with pytest.raises(ConfigError):
        build_classification_net('pyconvresnet', 50, (6, 3, 2, 1))
    with pytest.raises(ConfigError):
        build_pyconvsegnet(output_stride=32)


def test_segnet_geometry():
    """473 input at output stride 8: 60x60 backbone, 9x9 global pool, full-size outputs"""
    net = build_pyconvsegnet(50, 150, output_stride=8)
    shapes = net.infer_shapes((1, 3, 473, 473))
    assert stage_shapes(net, (1, 3, 473, 473))['stage4'] == (1, 2048, 60, 60)
    assert shapes['head.global.pool'] == (1, 2048, 9, 9)
    assert shapes[net.outputs['main']] == (1, 150, 473, 473)
    assert shapes[net.outputs['aux']] == shapes[net.outputs['main']]
    assert [lv.groups for lv in net.node('head.local.pyconv2').spec.levels] == [1, 4, 8, 16]
    assert net.validate() == []


def test_segnet_output_stride_16():
    net = build_pyconvsegnet(50, 150, output_stride=16)
    assert stage_shapes(net, (1, 3, 473, 473))['stage4'][2:] == (math.ceil(473 / 16),) * 2


def test_segnet_global_pool_on_non_square_input():
    net = build_pyconvsegnet(50, 21, output_stride=8)
    shapes = net.infer_shapes((1, 3, 473, 233))
    backbone = stage_shapes(net, (1, 3, 473, 233))['stage4']
    assert backbone[2:] == (60, 30)
    assert shapes['head.global.pool'][2:] == (9, 5)


@pytest.mark.parametrize("family", ['resnet-baseline', 'pyconvresnet'])
def test_ssd_detection_maps(family):
    net = build_pyconvssd(50, 81, family)
    shapes = net.infer_shapes((1, 3, 300, 300))
    sides = [shapes[m][2] for m in net.meta['detection_maps']]
    assert sides == [38, 19, 10, 5, 3, 1]
    assert shapes[net.outputs['loc0']] == (1, 16, 38, 38)
    assert shapes[net.outputs['conf1']] == (1, 6 * 81, 19, 19)
    anchors = sum(s * s * b for s, b in zip(sides, net.meta['boxes_per_map']))
    assert anchors == 8732
    assert net.validate() == []


def test_video_network_temporal_extent():
    net = build_pyconvresnet3d(50)
    shapes = stage_shapes(net, (1, 3, 16, 224, 224))
    assert [s[2] for s in shapes.values()] == [16, 16, 16, 8, 4]
    assert shapes['stage3'] == (1, 1024, 8, 14, 14)
    assert net.infer_shapes((1, 3, 16, 224, 224))['fc'] == (1, 400)
    kernels = [(lv.kernel, lv.groups) for lv in net.node('layer1.0.pyconv2').spec.levels]
    assert kernels == [((3, 3, 3), 1), ((3, 5, 5), 4), ((5, 7, 7), 8), ((7, 9, 9), 16)]


def test_census_matches_static_count():
    """Allocated scalars equal the analyzer's parameter count"""
    for net in (build_classification_net('pyconvresnet', 50, width_divisor=8),
                build_pyconvsegnet(50, 10, width_divisor=8),
                build_pyconvssd(50, 5, width_divisor=8)):
        net.initialize(seed=0)
        assert net.census() == count_params(net)[1]
        assert net.validate() == []


def test_toy_classification_forward_is_deterministic():
    net = build_classification_net('pyconvresnet', 50, num_classes=10, width_divisor=8).initialize(1)
    x = philox_generator(0).standard_normal((2, 3, 32, 32)).astype(np.float32)
    first = net.forward(x)['main']
    assert first.shape == (2, 10)
    assert np.array_equal(first, net.forward(x)['main'])
    twin = build_classification_net('pyconvresnet', 50, num_classes=10, width_divisor=8).initialize(1)
    assert np.array_equal(first, twin.forward(x)['main'])


def test_toy_segnet_forward_shapes():
    net = build_pyconvsegnet(50, 10, width_divisor=8).initialize(0)
    x = philox_generator(0).standard_normal((1, 3, 32, 32)).astype(np.float32)
    out = net.forward(x)
    assert out['main'].shape == (1, 10, 32, 32)
    assert out['aux'].shape == (1, 10, 32, 32)


def test_toy_video_forward_shape():
    net = build_pyconvresnet3d(50, num_classes=7, width_divisor=8).initialize(0)
    x = philox_generator(0).standard_normal((1, 3, 4, 16, 16)).astype(np.float32)
    assert net.forward(x)['main'].shape == (1, 7)


def test_single_conv_graph_reduces_to_conv_forward():
    net = NetworkGraph('one', in_channels=3)
    net.outputs['main'] = GraphBuilder(net).conv('c', INPUT_ID, 3, 4, 3)
    net.initialize(0)
    x = philox_generator(2).standard_normal((1, 3, 6, 6)).astype(np.float32)
    expected = nn_ops.conv_forward(x, net.params['c.weight'], None, net.node('c').spec)
    assert np.array_equal(net.forward(x)['main'], expected)


def test_shared_input_gradients_accumulate():
    """input feeds both a ReLU and the add directly: d/dx = 1[x > 0] + 1"""
    net = NetworkGraph('dag', in_channels=2)
    net.add_node('relu', 'r', [INPUT_ID])
    net.outputs['main'] = net.add_node('add', 'sum', ['r', INPUT_ID])
    net.initialize(0)
    x = np.array([[[[-1.0, 2.0]], [[3.0, -4.0]]]])
    net.forward(x)
    net.backward({'main': np.ones_like(x)})
    assert net.input_grad.tolist() == [[[[1.0, 2.0]], [[2.0, 1.0]]]]


def test_graph_rejects_undefined_inputs_and_duplicates():
    net = NetworkGraph('bad')
    with pytest.raises(ShapeError):
        net.add_node('relu', 'r', ['missing'])
    net.add_node('relu', 'r', [INPUT_ID])
    with pytest.raises(ShapeError):
        net.add_node('relu', 'r', [INPUT_ID])
    with pytest.raises(ShapeError):
        net.infer_shapes((1, 4, 8, 8))


def test_load_state_requires_every_tensor():
    net = build_classification_net('resnet-baseline', 50, num_classes=4, width_divisor=16).initialize(0)
    state = net.state_tensors()
    twin = build_classification_net('resnet-baseline', 50, num_classes=4, width_divisor=16).initialize(5)
    twin.load_state(state)
    assert all(np.array_equal(twin.params[k], v) for k, v in net.params.items())
    state.pop('fc.bias')
    with pytest.raises(ShapeError):
        twin.load_state(state)


def test_describe_stages_table():
    net = build_classification_net('pyconvresnet', 50)
    table = describe_stages(net, (1, 3, 224, 224))
    assert list(table['stage']) == ['stem', 'stage1', 'stage2', 'stage3', 'stage4', 'head']
    stage1 = table[table['stage'] == 'stage1'].iloc[0]
    assert stage1['output'] == '56x56'
    assert "9x9, 16, G=16" in stage1['layers']
    assert stage1['layers'].endswith('x3')
