#!/usr/bin/env python3
"""
Declarative builders for every network family
Baseline ResNets, PyConvResNet / PyConvHGResNet / top-level ablations,
PyConvSegNet, (PyConv)SSD and the 3D video networks.
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from network_graph import (INPUT_ID, AdaptivePoolSpec, LayerNode, LinearSpec, NetworkGraph,
                           PoolSpec, UpsampleSpec, conv_spec)
from pyconv_layer import (MAX_LEVELS, PyConvLevel, PyConvSpec, default_group_schedule,
                          describe_levels, level_splits, validate as validate_pyconv)

logger = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Raised for unknown families, depths, schedules or malformed configs"""


# --- Architecture tables ---
RESNET_BLOCKS = {50: (3, 4, 6, 3), 101: (3, 4, 23, 3), 152: (3, 8, 36, 3)}
STAGE_WIDTHS = (64, 128, 256, 512)
EXPANSION = 4
STEM_CHANNELS = 64
DEFAULT_SCHEDULE = (4, 3, 2, 1)
FAMILIES = ('resnet-baseline', 'pyconvresnet', 'pyconvhgresnet', 'pyconvresnet-top')
WIDTH_DIVISORS = (1, 2, 4, 8, 16)

PYCONV_KERNELS = (3, 5, 7, 9, 11)
PYCONV_GROUPS = {3: 1, 5: 4, 7: 8, 9: 16, 11: 32}
# Temporal extent paired with each spatial kernel in the 3D networks
TEMPORAL_KERNELS = {3: 3, 5: 3, 7: 5, 9: 7}
# PyConvHGResNet groups per stage, bottom level first
HG_GROUPS = ((32, 32, 32, 32), (32, 64, 64), (32, 64), (32,))

HEAD_CHANNELS = 512
MERGE_CHANNELS = 256
AUX_CHANNELS = 256
GLOBAL_POOL_SIZE = 9
HEAD_KERNELS = (3, 5, 7, 9)

# (reduction channels, output channels, PyConv levels) for each extra SSD layer
SSD_EXTRAS = ((256, 512, 4), (256, 512, 3), (128, 256, 2), (128, 256, 1), (128, 256, 1))
SSD_BOXES_PER_MAP = (4, 6, 6, 6, 4, 4)
SSD_STRIDED_EXTRAS = 3

FC_INIT_STD = 0.01


@dataclass(frozen=True)
class BlockSpec:
    in_channels: int
    width: int
    pyconv: PyConvSpec
    out_channels: int
    stride: Tuple[int, ...]
    shortcut: str = 'identity'
    plain: bool = False

    def problems(self) -> List[str]:
        problems = [f"pyconv: {v}" for v in validate_pyconv(self.pyconv)]
        if self.shortcut not in ('identity', 'projection', 'maxpool+projection'):
            problems.append(f"unknown shortcut kind '{self.shortcut}'")
        strided = any(s != 1 for s in self.stride)
        if self.shortcut == 'identity' and (strided or self.in_channels != self.out_channels):
            problems.append("projection shortcut required when stride != 1 or in != out channels")
        if self.shortcut == 'maxpool+projection' and not strided:
            problems.append("maxpool+projection shortcut needs a strided block")
        if tuple(self.pyconv.stride) != tuple(self.stride):
            problems.append(f"block stride {self.stride} differs from PyConv stride {self.pyconv.stride}")
        if self.pyconv.in_channels != self.width or self.pyconv.out_channels != self.width:
            problems.append(f"PyConv must map width {self.width} to itself")
        return problems


class GraphBuilder:
    """Appends named layers and their parameters to a NetworkGraph"""

    def __init__(self, net: NetworkGraph):
        self.net = net
        self.dims = net.spatial_dims

    def conv(self, node_id, x, in_c, out_c, kernel, stride=1, padding=None, dilation=1, groups=1, bias=False) -> str:
        spec = conv_spec(in_c, out_c, kernel, stride, padding, dilation, groups, self.dims)
        self.net.add_node('conv', node_id, [x], spec)
        self.net.add_param(node_id, 'weight', spec.weight_shape, ('he', spec.fan_in))
        if bias:
            self.net.add_param(node_id, 'bias', (out_c,), ('zeros',))
        return node_id

    def pyconv(self, node_id, x, spec: PyConvSpec) -> str:
        self.net.add_node('pyconv', node_id, [x], spec)
        for n, shape in enumerate(spec.weight_shapes()):
            fan_in = int(np.prod(shape[1:]))
            self.net.add_param(node_id, f"level{n + 1}.weight", shape, ('he', fan_in))
        return node_id

    def bn(self, node_id, x, channels) -> str:
        self.net.add_node('bn', node_id, [x], channels)
        self.net.add_param(node_id, 'gamma', (channels,), ('ones',))
        self.net.add_param(node_id, 'beta', (channels,), ('zeros',))
        self.net.add_buffer(node_id, 'running_mean', (channels,))
        self.net.add_buffer(node_id, 'running_var', (channels,))
        return node_id

    def relu(self, node_id, x) -> str:
        return self.net.add_node('relu', node_id, [x])

    def maxpool(self, node_id, x, window, stride, padding) -> str:
        return self.net.add_node('maxpool', node_id, [x], PoolSpec(tuple(window), tuple(stride), tuple(padding)))

    def linear(self, node_id, x, in_f, out_f) -> str:
        self.net.add_node('linear', node_id, [x], LinearSpec(in_f, out_f))
        self.net.add_param(node_id, 'weight', (out_f, in_f), ('normal', FC_INIT_STD))
        self.net.add_param(node_id, 'bias', (out_f,), ('zeros',))
        return node_id

    def upsample(self, node_id, x, like: str) -> str:
        return self.net.add_node('bilinear-upsample', node_id, [x], UpsampleSpec(like=like))

    def dropout(self, node_id, x, p: float) -> str:
        return self.net.add_node('dropout', node_id, [x], p)

    def conv_bn_relu(self, prefix, x, in_c, out_c, kernel, stride=1, padding=None, dilation=1, suffix='') -> str:
        out = self.conv(f"{prefix}.conv{suffix}", x, in_c, out_c, kernel, stride, padding, dilation)
        out = self.bn(f"{prefix}.bn{suffix}", out, out_c)
        return self.relu(f"{prefix}.relu{suffix}", out)

    def pyconv_bn_relu(self, prefix, x, spec: PyConvSpec, suffix='') -> str:
        out = self.pyconv(f"{prefix}.pyconv{suffix}", x, spec)
        out = self.bn(f"{prefix}.bn{suffix}", out, spec.out_channels)
        return self.relu(f"{prefix}.relu{suffix}", out)


def _tuple(value, dims: int) -> Tuple[int, ...]:
    return (value,) * dims if isinstance(value, int) else tuple(value)


def _shortcut_pool(stride: Tuple[int, ...]) -> PoolSpec:
    window = tuple(3 if s > 1 else 1 for s in stride)
    padding = tuple(1 if s > 1 else 0 for s in stride)
    return PoolSpec(window, tuple(stride), padding)


def build_bottleneck(builder: GraphBuilder, prefix: str, x: str, spec: BlockSpec) -> List[LayerNode]:
    """
    Append one bottleneck block reading node x; returns the appended nodes,
    the last of which is the block output.
    """
    problems = spec.problems()
    if problems:
        raise ConfigError(f"invalid block {prefix}: " + "; ".join(problems))
    net = builder.net
    first = len(net.nodes)

    out = builder.conv_bn_relu(prefix, x, spec.in_channels, spec.width, 1, suffix='1')
    if spec.plain:
        level = spec.pyconv.levels[0]
        out = builder.conv(f"{prefix}.conv2", out, spec.width, spec.width, level.kernel, spec.stride,
                           dilation=spec.pyconv.dilation)
        out = builder.relu(f"{prefix}.relu2", builder.bn(f"{prefix}.bn2", out, spec.width))
    else:
        out = builder.pyconv_bn_relu(prefix, out, spec.pyconv, suffix='2')
    out = builder.conv(f"{prefix}.conv3", out, spec.width, spec.out_channels, 1)
    out = builder.bn(f"{prefix}.bn3", out, spec.out_channels)

    shortcut = x
    if spec.shortcut == 'projection':
        shortcut = builder.conv(f"{prefix}.downsample.conv", x, spec.in_channels, spec.out_channels, 1, spec.stride)
        shortcut = builder.bn(f"{prefix}.downsample.bn", shortcut, spec.out_channels)
    elif spec.shortcut == 'maxpool+projection':
        pool = _shortcut_pool(spec.stride)
        shortcut = builder.maxpool(f"{prefix}.downsample.pool", x, pool.window, pool.stride, pool.padding)
        shortcut = builder.conv(f"{prefix}.downsample.conv", shortcut, spec.in_channels, spec.out_channels, 1)
        shortcut = builder.bn(f"{prefix}.downsample.bn", shortcut, spec.out_channels)

    net.add_node('add', f"{prefix}.add", [out, shortcut])
    builder.relu(f"{prefix}.relu", f"{prefix}.add")
    return net.nodes[first:]


# --- Stage planning ---

def _clamp_group(groups: int, channels: int) -> int:
    while channels % groups:
        groups //= 2
    return groups


def _toy_groups(width: int, kernels: Sequence[int], splits: Sequence[int]) -> List[int]:
    sizes = PYCONV_KERNELS[:PYCONV_KERNELS.index(kernels[-1]) + 1]
    reference = dict(zip(sizes, default_group_schedule(width, sizes)))
    return [_clamp_group(reference[k], out) for k, out in zip(kernels, splits)]


def _level_kernel(k: int, dims: int) -> Tuple[int, ...]:
    return (TEMPORAL_KERNELS[k], k, k) if dims == 3 else (k, k)


def plan_levels(family: str, stage: int, n_levels: int, width: int, width_divisor: int = 1,
                dims: int = 2) -> List[PyConvLevel]:
    """PyConv levels (bottom first) for one stage of a backbone"""
    if family == 'resnet-baseline':
        return [PyConvLevel(_level_kernel(3, dims), width, 1)]
    if not 1 <= n_levels <= MAX_LEVELS:
        raise ConfigError(f"level counts must lie in 1..{MAX_LEVELS}, got {n_levels}")
    kernels = list(PYCONV_KERNELS[:n_levels])
    if family == 'pyconvresnet-top':
        kernels = kernels[-1:]
        splits = [width]
    else:
        splits = level_splits(width, n_levels)
    if family == 'pyconvhgresnet':
        if n_levels != DEFAULT_SCHEDULE[stage]:
            raise ConfigError("pyconvhgresnet only supports the (4, 3, 2, 1) level schedule")
        groups = list(HG_GROUPS[stage])
    else:
        groups = [PYCONV_GROUPS[k] for k in kernels]
    if width_divisor > 1:
        groups = _toy_groups(width, kernels, splits)
    # a level narrower than its tabled group count keeps the largest power of 2 dividing it
    groups = [_clamp_group(g, o) for g, o in zip(groups, splits)]
    if dims == 3 and max(kernels) not in TEMPORAL_KERNELS:
        raise ConfigError(f"no temporal extent defined for {max(kernels)}x{max(kernels)} kernels")
    return [PyConvLevel(_level_kernel(k, dims), o, g) for k, o, g in zip(kernels, splits, groups)]


@dataclass
class BackboneLayout:
    family: str
    depth: int
    schedule: Tuple[int, ...] = DEFAULT_SCHEDULE
    downsample: str = 'shortcut'
    strides: Tuple[Tuple[int, ...], ...] = ()
    dilations: Tuple[int, ...] = (1, 1, 1, 1)
    n_stages: int = 4
    dims: int = 2
    width_divisor: int = 1

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown family '{self.family}', expected one of {list(FAMILIES)}")
        if self.depth not in RESNET_BLOCKS:
            raise ConfigError(f"unsupported depth {self.depth}, expected one of {sorted(RESNET_BLOCKS)}")
        if self.downsample not in ('stem', 'shortcut'):
            raise ConfigError(f"downsample must be 'stem' or 'shortcut', got '{self.downsample}'")
        if self.width_divisor not in WIDTH_DIVISORS:
            raise ConfigError(f"width_divisor must be one of {list(WIDTH_DIVISORS)}, got {self.width_divisor}")
        self.schedule = tuple(int(n) for n in self.schedule)
        if len(self.schedule) != 4:
            raise ConfigError(f"level_schedule needs four entries, got {list(self.schedule)}")
        if not self.strides:
            self.strides = default_stage_strides(self.downsample, self.dims)


def default_downsample(family: str) -> str:
    return 'stem' if family == 'resnet-baseline' else 'shortcut'


def default_stage_strides(downsample: str, dims: int = 2) -> Tuple[Tuple[int, ...], ...]:
    if dims == 3:
        first = (1, 1, 1) if downsample == 'stem' else (1, 2, 2)
        return (first, (1, 2, 2), (2, 2, 2), (2, 2, 2))
    first = 1 if downsample == 'stem' else 2
    return tuple(_tuple(s, 2) for s in (first, 2, 2, 2))


def _build_backbone(builder: GraphBuilder, layout: BackboneLayout) -> Dict[str, str]:
    """Stem plus stages; returns output ids keyed 'stem', 'stage1', ..."""
    net, d, dims = builder.net, layout.width_divisor, layout.dims
    hg = layout.family == 'pyconvhgresnet'
    stem_c = STEM_CHANNELS // d
    if dims == 3:
        out = builder.conv_bn_relu('stem', INPUT_ID, net.in_channels, stem_c, (5, 7, 7), (1, 2, 2), (2, 3, 3))
        stem_rows = ["5x7x7, 64, s=1,2,2"]
    else:
        out = builder.conv_bn_relu('stem', INPUT_ID, net.in_channels, stem_c, 7, 2, 3)
        stem_rows = ["7x7, 64, s=2"]
    if layout.downsample == 'stem':
        if dims == 3:
            out = builder.maxpool('stem.pool', out, (1, 3, 3), (1, 2, 2), (0, 1, 1))
            stem_rows.append("1x3x3 max pool, s=1,2,2")
        else:
            out = builder.maxpool('stem.pool', out, (3, 3), (2, 2), (1, 1))
            stem_rows.append("3x3 max pool, s=2")
    outputs = {'stem': out}
    stages = [{'name': 'stem', 'rows': stem_rows, 'output': out, 'blocks': 1}]

    in_c = stem_c
    for s in range(layout.n_stages):
        width = STAGE_WIDTHS[s] * (2 if hg else 1) // d
        out_c = STAGE_WIDTHS[s] * EXPANSION // d
        dilation = _tuple(layout.dilations[s], dims)
        levels = plan_levels(layout.family, s, layout.schedule[s], width, d, dims)
        first_spec = None
        for b in range(RESNET_BLOCKS[layout.depth][s]):
            stride = _tuple(layout.strides[s], dims) if b == 0 else (1,) * dims
            strided = any(v != 1 for v in stride)
            if strided:
                shortcut = 'maxpool+projection' if layout.downsample == 'shortcut' else 'projection'
            else:
                shortcut = 'projection' if in_c != out_c else 'identity'
            pyconv = PyConvSpec(in_channels=width, levels=tuple(levels), stride=stride, dilation=dilation)
            spec = BlockSpec(in_c, width, pyconv, out_c, stride, shortcut,
                             plain=layout.family == 'resnet-baseline')
            first_spec = first_spec or spec
            nodes = build_bottleneck(builder, f"layer{s + 1}.{b}", out, spec)
            out, in_c = nodes[-1].id, out_c
        outputs[f"stage{s + 1}"] = out
        stages.append({'name': f"stage{s + 1}", 'rows': _block_rows(first_spec, hg), 'output': out,
                       'blocks': RESNET_BLOCKS[layout.depth][s]})
    baseline = layout.family == 'resnet-baseline'
    net.meta.update(stages=stages, family=layout.family, depth=layout.depth,
                    level_schedule=(1, 1, 1, 1) if baseline else layout.schedule,
                    downsample=layout.downsample, width_divisor=layout.width_divisor)
    return outputs


def _block_rows(spec: BlockSpec, hg: bool = False) -> List[str]:
    if spec.plain:
        kernel = 'x'.join(str(k) for k in spec.pyconv.levels[0].kernel)
        middle = f"{kernel}, {spec.width}"
    else:
        middle = f"PyConv{spec.pyconv.n_levels}, {spec.width}: " + "; ".join(describe_levels(spec.pyconv))
    return [f"1x1, {spec.width}", middle, f"1x1, {spec.out_channels}"]


def _new_net(name: str, in_channels: int, dims: int) -> Tuple[NetworkGraph, GraphBuilder]:
    net = NetworkGraph(name, in_channels, dims)
    return net, GraphBuilder(net)


def _check_schedule(level_schedule) -> Tuple[int, ...]:
    schedule = tuple(level_schedule) if level_schedule is not None else DEFAULT_SCHEDULE
    if len(schedule) != 4 or any(not 1 <= int(n) <= MAX_LEVELS for n in schedule):
        raise ConfigError(f"level_schedule must be four counts in 1..{MAX_LEVELS}, got {list(schedule)}")
    return tuple(int(n) for n in schedule)


# --- Public builders ---

def build_classification_net(family: str, depth: int, level_schedule: Optional[Sequence[int]] = None,
                             num_classes: int = 1000, width_divisor: int = 1,
                             downsample: Optional[str] = None, in_channels: int = 3) -> NetworkGraph:
    schedule = _check_schedule(level_schedule)
    layout = BackboneLayout(family, depth, schedule, downsample or default_downsample(family),
                            width_divisor=width_divisor)
    net, b = _new_net(f"{family}-{depth}", in_channels, 2)
    outputs = _build_backbone(b, layout)
    features = STAGE_WIDTHS[-1] * EXPANSION // width_divisor
    out = net.add_node('global-avgpool', 'avgpool', [outputs['stage4']])
    b.linear('fc', out, features, num_classes)
    net.outputs['main'] = 'fc'
    net.meta.update(task='classification', heads=[f"global average pool, {num_classes}-d fc"])
    logger.info(f"Built {net.name} with {len(net.nodes)} nodes")
    return net


def build_pyconvresnet3d(depth: int = 50, num_classes: int = 400, family: str = 'pyconvresnet',
                         width_divisor: int = 1, level_schedule: Optional[Sequence[int]] = None,
                         in_channels: int = 3) -> NetworkGraph:
    if family not in ('resnet-baseline', 'pyconvresnet'):
        raise ConfigError(f"video networks support resnet-baseline and pyconvresnet, got '{family}'")
    schedule = _check_schedule(level_schedule)
    layout = BackboneLayout(family, depth, schedule, default_downsample(family), dims=3,
                            width_divisor=width_divisor)
    name = 'resnet3d' if family == 'resnet-baseline' else 'pyconvresnet3d'
    net, b = _new_net(f"{name}-{depth}", in_channels, 3)
    outputs = _build_backbone(b, layout)
    features = STAGE_WIDTHS[-1] * EXPANSION // width_divisor
    out = net.add_node('global-avgpool', 'avgpool', [outputs['stage4']])
    out = b.dropout('dropout', out, 0.5)
    b.linear('fc', out, features, num_classes)
    net.outputs['main'] = 'fc'
    net.meta.update(task='video', heads=[f"global average pool, dropout 0.5, {num_classes}-d fc"])
    logger.info(f"Built {net.name} with {len(net.nodes)} nodes")
    return net


def _head_pyconv_spec(channels: int, width_divisor: int) -> PyConvSpec:
    kernels = list(HEAD_KERNELS)
    splits = level_splits(channels, len(kernels))
    groups = [PYCONV_GROUPS[k] for k in kernels]
    if width_divisor > 1:
        groups = [_clamp_group(_clamp_group(g, o), channels) for g, o in zip(groups, splits)]
    levels = tuple(PyConvLevel((k, k), o, g) for k, o, g in zip(kernels, splits, groups))
    return PyConvSpec(in_channels=channels, levels=levels)


def _pyconv_branch(b: GraphBuilder, prefix: str, x: str, in_c: int, width_divisor: int) -> str:
    c = HEAD_CHANNELS // width_divisor
    out = b.conv_bn_relu(prefix, x, in_c, c, 1, suffix='1')
    out = b.pyconv_bn_relu(prefix, out, _head_pyconv_spec(c, width_divisor), suffix='2')
    return b.conv_bn_relu(prefix, out, c, c, 1, suffix='3')


def segnet_layout(family: str, depth: int, output_stride: int, width_divisor: int = 1,
                  level_schedule=None) -> BackboneLayout:
    """Backbone with the strides of the last stages turned into dilations"""
    if output_stride not in (8, 16):
        raise ConfigError(f"output_stride must be 8 or 16, got {output_stride}")
    downsample = default_downsample(family)
    strides = list(default_stage_strides(downsample))
    if output_stride == 8:
        strides[2], strides[3] = (1, 1), (1, 1)
        dilations = (1, 1, 2, 4)
    else:
        strides[3] = (1, 1)
        dilations = (1, 1, 1, 2)
    return BackboneLayout(family, depth, _check_schedule(level_schedule), downsample,
                          tuple(strides), dilations, width_divisor=width_divisor)


def build_pyconvsegnet(depth: int = 50, num_classes: int = 150, output_stride: int = 8,
                       family: str = 'pyconvresnet', width_divisor: int = 1,
                       level_schedule: Optional[Sequence[int]] = None, in_channels: int = 3) -> NetworkGraph:
    layout = segnet_layout(family, depth, output_stride, width_divisor, level_schedule)
    d = width_divisor
    net, b = _new_net(f"pyconvsegnet-{family}-{depth}-os{output_stride}", in_channels, 2)
    outputs = _build_backbone(b, layout)
    backbone_c = STAGE_WIDTHS[-1] * EXPANSION // d
    head_c = HEAD_CHANNELS // d

    local = _pyconv_branch(b, 'head.local', outputs['stage4'], backbone_c, d)
    pooled = net.add_node('adaptive-avgpool', 'head.global.pool', [outputs['stage4']],
                          AdaptivePoolSpec(largest=GLOBAL_POOL_SIZE))
    glob = _pyconv_branch(b, 'head.global', pooled, backbone_c, d)
    glob = b.upsample('head.global.upsample', glob, like=outputs['stage4'])
    merged = net.add_node('concat', 'head.merge.concat', [local, glob])
    merge_spec = PyConvSpec(in_channels=2 * head_c, levels=(PyConvLevel((3, 3), MERGE_CHANNELS // d, 1),))
    merged = b.pyconv_bn_relu('head.merge', merged, merge_spec)
    # 1x1 classifier at the merge resolution, then upsample to the input
    main = b.conv('head.cls', merged, MERGE_CHANNELS // d, num_classes, 1, bias=True)
    main = b.upsample('head.upsample', main, like=INPUT_ID)

    aux_in = STAGE_WIDTHS[2] * EXPANSION // d
    aux = b.conv_bn_relu('aux', outputs['stage3'], aux_in, AUX_CHANNELS // d, 3)
    aux = b.dropout('aux.dropout', aux, 0.1)
    aux = b.conv('aux.cls', aux, AUX_CHANNELS // d, num_classes, 1, bias=True)
    aux = b.upsample('aux.upsample', aux, like=INPUT_ID)

    net.outputs.update(main=main, aux=aux)
    net.meta.update(task='segmentation', output_stride=output_stride, heads=[
        "LocalPyConv: 1x1, 512; PyConv4, 512: " + "; ".join(describe_levels(_head_pyconv_spec(HEAD_CHANNELS, 1)))
        + "; 1x1, 512",
        f"GlobalPyConv: adaptive avg pool {GLOBAL_POOL_SIZE}, same as local, bilinear upsample",
        "Merge: concat 1024; 3x3, 256, G=1; 1x1 classifier; bilinear upsample",
        "Aux: 3x3, 256; dropout 0.1; 1x1 classifier; bilinear upsample",
    ])
    logger.info(f"Built {net.name} with {len(net.nodes)} nodes")
    return net


def _extra_levels(n_levels: int, in_c: int, out_c: int, width_divisor: int) -> List[PyConvLevel]:
    kernels = list(PYCONV_KERNELS[:n_levels])
    splits = level_splits(out_c, n_levels)
    groups = [PYCONV_GROUPS[k] for k in kernels]
    if width_divisor > 1:
        groups = [_clamp_group(_clamp_group(g, o), in_c) for g, o in zip(groups, splits)]
    return [PyConvLevel((k, k), o, g) for k, o, g in zip(kernels, splits, groups)]


def build_pyconvssd(depth: int = 50, num_classes: int = 81, family: str = 'pyconvresnet',
                    width_divisor: int = 1, in_channels: int = 3) -> NetworkGraph:
    """Backbone through stage 3 at stride 1, five extra layers and loc/conf heads on six maps"""
    if family not in ('resnet-baseline', 'pyconvresnet'):
        raise ConfigError(f"detection networks support resnet-baseline and pyconvresnet, got '{family}'")
    d = width_divisor
    downsample = default_downsample(family)
    strides = list(default_stage_strides(downsample))
    strides[2] = (1, 1)
    layout = BackboneLayout(family, depth, DEFAULT_SCHEDULE, downsample, tuple(strides), n_stages=3,
                            width_divisor=d)
    name = 'ssd' if family == 'resnet-baseline' else 'pyconvssd'
    net, b = _new_net(f"{name}-{depth}", in_channels, 2)
    outputs = _build_backbone(b, layout)

    maps = [outputs['stage3']]
    channels = [STAGE_WIDTHS[2] * EXPANSION // d]
    head_rows = []
    x, in_c = maps[0], channels[0]
    for i, (mid, out_c, n_levels) in enumerate(SSD_EXTRAS, start=1):
        mid, out_c = mid // d, out_c // d
        prefix = f"extra{i}"
        x = b.conv_bn_relu(prefix, x, in_c, mid, 1, suffix='1')
        if i > SSD_STRIDED_EXTRAS:
            x = b.conv_bn_relu(prefix, x, mid, out_c, 3, 1, 0, suffix='2')
            head_rows.append(f"{prefix}: 1x1, {mid * d}; 3x3, {out_c * d}, s=1, no padding")
        elif family == 'resnet-baseline':
            x = b.conv_bn_relu(prefix, x, mid, out_c, 3, 2, suffix='2')
            head_rows.append(f"{prefix}: 1x1, {mid * d}; 3x3, {out_c * d}, s=2")
        else:
            spec = PyConvSpec(in_channels=mid, levels=tuple(_extra_levels(n_levels, mid, out_c, d)), stride=2)
            x = b.pyconv_bn_relu(prefix, x, spec, suffix='2')
            full = PyConvSpec(mid * d, tuple(_extra_levels(n_levels, mid * d, out_c * d, 1)))
            rows = describe_levels(full)
            head_rows.append(f"{prefix}: 1x1, {mid * d}; PyConv{n_levels}, {out_c * d}, s=2: " + "; ".join(rows))
        maps.append(x)
        channels.append(out_c)
        in_c = out_c

    for i, (m, c, boxes) in enumerate(zip(maps, channels, SSD_BOXES_PER_MAP)):
        b.conv(f"head.loc{i}", m, c, boxes * 4, 3, bias=True)
        b.conv(f"head.conf{i}", m, c, boxes * num_classes, 3, bias=True)
        net.outputs[f"loc{i}"] = f"head.loc{i}"
        net.outputs[f"conf{i}"] = f"head.conf{i}"
    head_rows.append(f"loc/conf: 3x3 convs, boxes per map {list(SSD_BOXES_PER_MAP)}, {num_classes} classes")
    net.meta.update(task='detection', detection_maps=maps, boxes_per_map=SSD_BOXES_PER_MAP,
                    num_classes=num_classes, heads=head_rows)
    logger.info(f"Built {net.name} with {len(net.nodes)} nodes")
    return net


# --- Describe ---

def _format_spatial(shape: Sequence[int]) -> str:
    return 'x'.join(str(s) for s in shape[2:]) if len(shape) > 2 else f"{shape[1]}-d"


def describe_stages(net: NetworkGraph, input_shape: Sequence[int]) -> pd.DataFrame:
    """One row per stem/stage/head with output size and layer composition"""
    shapes = net.infer_shapes(input_shape)
    rows = []
    for stage in net.meta.get('stages', []):
        layers = " | ".join(stage['rows'])
        if stage['name'] != 'stem':
            layers = f"[{layers}] x{stage['blocks']}"
        rows.append({'stage': stage['name'], 'output': _format_spatial(shapes[stage['output']]), 'layers': layers})
    for head in net.meta.get('heads', []):
        rows.append({'stage': 'head', 'output': '', 'layers': head})
    return pd.DataFrame(rows, columns=['stage', 'output', 'layers'])
