#!/usr/bin/env python3
"""
Tests for the numeric layer kernels
Convolution is checked against the nested-loop oracle on dyadic inputs,
where float64 accumulation is exact in any order, and on Gaussian float32 inputs.
"""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import nn_ops
from nn_ops import ConvSpec
from tensor_utils import ShapeError, philox_generator


def dyadic(shape, seed, dtype=np.float32):
    """Multiples of 1/8 in [-2, 2]"""
    return (philox_generator(seed).integers(-16, 17, size=shape) / 8.0).astype(dtype)


@st.composite
def conv_cases(draw):
    groups = draw(st.sampled_from([1, 2, 4]))
    spec = ConvSpec(
        kernel=(draw(st.sampled_from([1, 3])), draw(st.sampled_from([1, 3]))),
        in_channels=groups * draw(st.integers(1, 2)),
        out_channels=groups * draw(st.integers(1, 2)),
        stride=(draw(st.integers(1, 2)), draw(st.integers(1, 2))),
        padding=(draw(st.integers(0, 2)), draw(st.integers(0, 2))),
        dilation=(draw(st.integers(1, 2)), draw(st.integers(1, 2))),
        groups=groups,
    )
    spatial = (draw(st.integers(5, 7)), draw(st.integers(5, 7)))
    return spec, spatial, draw(st.integers(0, 2 ** 32 - 1))


@settings(max_examples=100, deadline=None)
@given(conv_cases())
def test_conv_forward_matches_direct_oracle(case):
    """im2col path equals the nested-loop reference element-exactly"""
    spec, spatial, seed = case
    x = dyadic((1, spec.in_channels) + spatial, seed)
    w = dyadic(spec.weight_shape, seed + 1)
    b = dyadic((spec.out_channels,), seed + 2)
    fast = nn_ops.conv_forward(x, w, b, spec)
    slow = nn_ops.conv_forward_direct(x, w, b, spec)
    assert fast.shape == (1, spec.out_channels) + spec.output_spatial(spatial)
    assert np.array_equal(fast, slow)


@settings(max_examples=50, deadline=None)
@given(conv_cases())
def test_conv_forward_matches_direct_oracle_on_random_floats(case):
    """Gaussian float32 operands: both paths sum in float64, so they differ by at most one float32 rounding"""
    spec, spatial, seed = case
    rng = philox_generator(seed)
    x = rng.standard_normal((2, spec.in_channels) + spatial).astype(np.float32)
    w = rng.standard_normal(spec.weight_shape).astype(np.float32)
    b = rng.standard_normal(spec.out_channels).astype(np.float32)
    fast = nn_ops.conv_forward(x, w, b, spec)
    slow = nn_ops.conv_forward_direct(x, w, b, spec)
    assert fast.dtype == np.float32
    assert np.allclose(fast, slow, rtol=1e-6, atol=1e-6)


@settings(max_examples=100, deadline=None)
@given(conv_cases())
def test_grouped_conv_is_concat_of_group_convs(case):
    """A G-group conv equals G independent convs over channel slices, concatenated"""
    spec, spatial, seed = case
    x = dyadic((2, spec.in_channels) + spatial, seed)
    w = dyadic(spec.weight_shape, seed + 1)
    g = spec.groups
    cg, og = spec.in_channels // g, spec.out_channels // g
    single = ConvSpec(spec.kernel, cg, og, spec.stride, spec.padding, spec.dilation, 1)
    parts = [nn_ops.conv_forward(x[:, i * cg:(i + 1) * cg], w[i * og:(i + 1) * og], None, single)
             for i in range(g)]
    assert np.array_equal(nn_ops.conv_forward(x, w, None, spec), np.concatenate(parts, axis=1))


def test_conv_shape_law_and_errors():
    """Output extent follows floor((I + 2P - D(K-1) - 1)/S) + 1; bad operands raise"""
    spec = ConvSpec(kernel=7, in_channels=3, out_channels=64, stride=2, padding=3)
    assert spec.output_spatial((224, 224)) == (112, 112)
    assert ConvSpec(kernel=3, in_channels=8, out_channels=8, padding=2, dilation=2).output_spatial((9, 9)) == (9, 9)
    with pytest.raises(ShapeError):
        ConvSpec(kernel=3, in_channels=6, out_channels=8, groups=4)
    with pytest.raises(ShapeError):
        ConvSpec(kernel=5, in_channels=1, out_channels=1).output_spatial((3, 3))
    x = np.zeros((1, 4, 5, 5), dtype=np.float32)
    with pytest.raises(ShapeError):
        nn_ops.conv_forward(x, np.zeros((4, 3, 3, 3), np.float32), None, ConvSpec(3, 3, 4, padding=1))


def test_conv3d_forward_shape():
    """3D conv with (Kt, Kh, Kw) kernel and per-axis strides"""
    spec = ConvSpec(kernel=(5, 7, 7), in_channels=3, out_channels=8, stride=(1, 2, 2), padding=(2, 3, 3))
    x = dyadic((1, 3, 4, 16, 16), 0)
    w = dyadic(spec.weight_shape, 1)
    assert nn_ops.conv3d_forward(x, w, None, spec).shape == (1, 8, 4, 8, 8)
    with pytest.raises(ShapeError):
        nn_ops.conv3d_forward(x, w, None, ConvSpec(kernel=3, in_channels=3, out_channels=8))


def test_conv_backward_weight_grad_of_identity_kernel():
    """With grad_output of ones, grad_weights of a 1x1 conv is the channel sum of the input"""
    spec = ConvSpec(kernel=1, in_channels=2, out_channels=1)
    x = dyadic((1, 2, 3, 3), 4, np.float64)
    w = np.ones((1, 2, 1, 1))
    gx, gw, gb = nn_ops.conv_backward(x, w, spec, np.ones((1, 1, 3, 3)))
    assert np.allclose(gw.reshape(-1), x.sum(axis=(0, 2, 3)))
    assert gb[0] == 9.0
    assert np.array_equal(gx, np.ones_like(x))


def test_maxpool_forward_and_ties():
    """3x3/s2/p1 pooling picks window maxima; ties resolve to the lowest flat index"""
    x = np.arange(16, dtype=np.float32).reshape(1, 1, 4, 4)
    out, argmax = nn_ops.maxpool_forward(x, 3, 2, 1)
    assert out.shape == (1, 1, 2, 2)
    assert out[0, 0].tolist() == [[5, 7], [13, 15]]
    assert argmax[0, 0].tolist() == [[5, 7], [13, 15]]
    flat = np.zeros((1, 1, 2, 2), dtype=np.float32)
    _, tie = nn_ops.maxpool_forward(flat, 2, 2, 0)
    assert tie.item() == 0


def test_maxpool_backward_routes_to_argmax():
    x = np.arange(16, dtype=np.float64).reshape(1, 1, 4, 4)
    out, argmax = nn_ops.maxpool_forward(x, 2, 2, 0)
    grad = nn_ops.maxpool_backward(np.ones_like(out), argmax, x.shape)
    assert grad.sum() == 4
    assert grad[0, 0, 1, 1] == 1 and grad[0, 0, 3, 3] == 1
    assert np.array_equal(nn_ops.maxpool_gather(x, argmax), out)


def test_adaptive_avg_pool_to_nine():
    """A 60x60 map pools to 9x9 and a constant stays constant"""
    x = np.full((1, 2, 60, 60), 3.0)
    out = nn_ops.adaptive_avg_pool(x, (9, 9))
    assert out.shape == (1, 2, 9, 9)
    assert np.allclose(out, 3.0)
    with pytest.raises(ShapeError):
        nn_ops.adaptive_avg_pool(x, (61, 9))


def test_global_avg_pool():
    x = np.arange(8, dtype=np.float64).reshape(1, 2, 2, 2)
    assert nn_ops.global_avg_pool(x).tolist() == [[1.5, 5.5]]


def test_bilinear_upsample_corners_and_constants():
    """Align-corners interpolation keeps the corners and preserves constants"""
    x = philox_generator(0).standard_normal((1, 3, 5, 7))
    up = nn_ops.bilinear_upsample(x, (17, 25))
    assert up.shape == (1, 3, 17, 25)
    assert np.allclose(up[..., 0, 0], x[..., 0, 0])
    assert np.allclose(up[..., -1, -1], x[..., -1, -1])
    const = nn_ops.bilinear_upsample(np.full((1, 1, 4, 4), 2.5), (9, 9))
    assert np.allclose(const, 2.5)


def test_pointwise_classifier_commutes_with_upsample():
    """A biased 1x1 conv gives the same map before or after bilinear upsampling"""
    rng = philox_generator(5)
    x = rng.standard_normal((2, 8, 6, 6))
    spec = ConvSpec(kernel=1, in_channels=8, out_channels=5)
    w, b = rng.standard_normal(spec.weight_shape), rng.standard_normal(5)
    late = nn_ops.conv_forward(nn_ops.bilinear_upsample(x, (23, 23)), w, b, spec)
    early = nn_ops.bilinear_upsample(nn_ops.conv_forward(x, w, b, spec), (23, 23))
    assert np.allclose(early, late, rtol=1e-10, atol=1e-10)


def test_batchnorm_train_and_eval():
    """Train mode normalizes per channel and updates the running buffers in place"""
    x = philox_generator(1).normal(3.0, 2.0, size=(8, 4, 5, 5))
    gamma, beta = np.ones(4), np.zeros(4)
    mean, var = np.zeros(4), np.ones(4)
    out, _ = nn_ops.batchnorm_forward(x, gamma, beta, mean, var, training=True)
    assert np.allclose(out.mean(axis=(0, 2, 3)), 0.0, atol=1e-9)
    assert np.allclose(out.var(axis=(0, 2, 3)), 1.0, atol=1e-3)
    assert np.allclose(mean, 0.1 * x.mean(axis=(0, 2, 3)))
    count = 8 * 25
    assert np.allclose(var, 0.9 + 0.1 * x.var(axis=(0, 2, 3)) * count / (count - 1))

    frozen_mean, frozen_var = np.full(4, 3.0), np.full(4, 4.0)
    out, cache = nn_ops.batchnorm_forward(x, gamma, beta, frozen_mean, frozen_var, training=False)
    assert np.allclose(out, (x - 3.0) / np.sqrt(4.0 + nn_ops.BN_EPS))
    assert frozen_mean.tolist() == [3.0] * 4
    gx, _, _ = nn_ops.batchnorm_backward(np.ones_like(x), cache)
    assert np.allclose(gx, 1.0 / np.sqrt(4.0 + nn_ops.BN_EPS))


def test_relu_and_dropout():
    x = np.array([[-1.0, 0.0, 2.0]])
    assert nn_ops.relu_forward(x).tolist() == [[0.0, 0.0, 2.0]]
    assert nn_ops.relu_backward(np.ones_like(x), x).tolist() == [[0.0, 0.0, 1.0]]
    same, mask = nn_ops.dropout_forward(x, 0.5, None, training=False)
    assert same is x and mask is None
    big = np.ones((100, 100))
    out, mask = nn_ops.dropout_forward(big, 0.5, philox_generator(0), training=True)
    assert set(np.unique(out)) <= {0.0, 2.0}
    assert 0.4 < (out == 0).mean() < 0.6
    assert np.array_equal(nn_ops.dropout_backward(big, mask), out)


def test_linear_forward():
    x = np.array([[1.0, 2.0]])
    w = np.array([[1.0, 0.0], [0.5, 0.5], [0.0, -1.0]])
    out = nn_ops.linear_forward(x, w, np.array([0.0, 1.0, 0.0]))
    assert out.tolist() == [[1.0, 2.5, -2.0]]
    with pytest.raises(ShapeError):
        nn_ops.linear_forward(x, w.T, None)


def test_softmax_cross_entropy_uniform_logits():
    """Uniform logits over K classes give loss ln K; gradients sum to zero per position"""
    logits = np.zeros((4, 10))
    loss, grad = nn_ops.softmax_cross_entropy(logits, np.arange(4))
    assert loss == pytest.approx(math.log(10))
    assert np.allclose(grad.sum(axis=1), 0.0)
    seg_loss, seg_grad = nn_ops.softmax_cross_entropy(np.zeros((2, 5, 3, 3)), np.zeros((2, 3, 3), dtype=int))
    assert seg_loss == pytest.approx(math.log(5))
    assert seg_grad.shape == (2, 5, 3, 3)
    with pytest.raises(ShapeError):
        nn_ops.softmax_cross_entropy(logits, np.array([0, 1, 2, 10]))
