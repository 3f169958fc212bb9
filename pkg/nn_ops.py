#!/usr/bin/env python3
"""
Numeric layer kernels with forward and backward passes
Grouped 2D/3D convolution, pooling, batch norm, ReLU, bilinear upsampling,
linear layer, dropout and softmax cross-entropy
"""

import math
from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence, Tuple

import numpy as np

from tensor_utils import ShapeError, Tensor

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def _expand(value, n: int, default: int, name: str) -> Tuple[int, ...]:
    if value is None or (isinstance(value, tuple) and len(value) == 0):
        return (default,) * n
    if isinstance(value, (int, np.integer)):
        return (int(value),) * n
    value = tuple(int(v) for v in value)
    if len(value) != n:
        raise ShapeError(f"{name} needs {n} entries, got {list(value)}")
    return value


@dataclass(frozen=True)
class ConvSpec:
    """Grouped convolution geometry; weights are [FM_o, FM_i/G, *kernel]"""
    kernel: Tuple[int, ...]
    in_channels: int
    out_channels: int
    stride: Tuple[int, ...] = ()
    padding: Tuple[int, ...] = ()
    dilation: Tuple[int, ...] = ()
    groups: int = 1

    def __post_init__(self):
        kernel = self.kernel
        if isinstance(kernel, (int, np.integer)):
            kernel = (int(kernel), int(kernel))
        kernel = tuple(int(k) for k in kernel)
        n = len(kernel)
        object.__setattr__(self, 'kernel', kernel)
        object.__setattr__(self, 'stride', _expand(self.stride, n, 1, 'stride'))
        object.__setattr__(self, 'padding', _expand(self.padding, n, 0, 'padding'))
        object.__setattr__(self, 'dilation', _expand(self.dilation, n, 1, 'dilation'))
        self.check()

    def check(self) -> None:
        if self.groups < 1 or self.in_channels < 1 or self.out_channels < 1:
            raise ShapeError(f"channels and groups must be positive: {self}")
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ShapeError(
                f"groups {self.groups} must divide in-channels {self.in_channels} "
                f"and out-channels {self.out_channels}")
        if min(self.kernel) < 1 or min(self.stride) < 1 or min(self.dilation) < 1 or min(self.padding) < 0:
            raise ShapeError(f"invalid kernel/stride/dilation/padding: {self}")

    @property
    def spatial_dims(self) -> int:
        return len(self.kernel)

    @property
    def weight_shape(self) -> Tuple[int, ...]:
        return (self.out_channels, self.in_channels // self.groups) + self.kernel

    @property
    def fan_in(self) -> int:
        return (self.in_channels // self.groups) * math.prod(self.kernel)

    def output_spatial(self, in_spatial: Sequence[int]) -> Tuple[int, ...]:
        if len(in_spatial) != self.spatial_dims:
            raise ShapeError(f"expected {self.spatial_dims} spatial extents, got {list(in_spatial)}")
        out = tuple(
            (i + 2 * p - d * (k - 1) - 1) // s + 1
            for i, k, s, p, d in zip(in_spatial, self.kernel, self.stride, self.padding, self.dilation))
        if min(out) < 1:
            raise ShapeError(f"input {list(in_spatial)} too small for {self}")
        return out


# --- Convolution ---

def _window(offset, dilation, stride, out_spatial) -> tuple:
    return (slice(None), slice(None)) + tuple(
        slice(o * d, o * d + s * (m - 1) + 1, s)
        for o, d, s, m in zip(offset, dilation, stride, out_spatial))


def _pad_spatial(x: Tensor, padding, value=0.0) -> Tensor:
    if not any(padding):
        return x
    pads = [(0, 0), (0, 0)] + [(p, p) for p in padding]
    return np.pad(x, pads, constant_values=value)


def _im2col(x: Tensor, spec: ConvSpec, out_spatial) -> Tensor:
    """Lower x to columns [N, C, prod(kernel), prod(out_spatial)]"""
    xp = _pad_spatial(x, spec.padding)
    n, c = x.shape[:2]
    cols = np.empty((n, c, math.prod(spec.kernel)) + tuple(out_spatial), dtype=x.dtype)
    for k, offset in enumerate(np.ndindex(*spec.kernel)):
        cols[:, :, k] = xp[_window(offset, spec.dilation, spec.stride, out_spatial)]
    return cols.reshape(n, c, cols.shape[2], -1)


def _col2im(cols: Tensor, spec: ConvSpec, in_shape, out_spatial) -> Tensor:
    n, c = in_shape[:2]
    padded_spatial = tuple(i + 2 * p for i, p in zip(in_shape[2:], spec.padding))
    padded = np.zeros((n, c) + padded_spatial, dtype=cols.dtype)
    cols = cols.reshape((n, c, math.prod(spec.kernel)) + tuple(out_spatial))
    for k, offset in enumerate(np.ndindex(*spec.kernel)):
        padded[_window(offset, spec.dilation, spec.stride, out_spatial)] += cols[:, :, k]
    crop = (slice(None), slice(None)) + tuple(slice(p, p + i) for p, i in zip(spec.padding, in_shape[2:]))
    return padded[crop]


def _check_conv_operands(x: Tensor, weights: Tensor, spec: ConvSpec, bias: Optional[Tensor] = None) -> None:
    if x.ndim != spec.spatial_dims + 2:
        raise ShapeError(f"input rank {x.ndim} does not fit a {spec.spatial_dims}D conv")
    if x.shape[1] != spec.in_channels:
        raise ShapeError(f"input has {x.shape[1]} channels, conv expects {spec.in_channels}")
    if tuple(weights.shape) != spec.weight_shape:
        raise ShapeError(f"weights {list(weights.shape)} do not match {list(spec.weight_shape)}")
    if bias is not None and tuple(bias.shape) != (spec.out_channels,):
        raise ShapeError(f"bias {list(bias.shape)} does not match {spec.out_channels} out-channels")


def conv_forward(x: Tensor, weights: Tensor, bias: Optional[Tensor], spec: ConvSpec) -> Tensor:
    """
    Grouped cross-correlation via im2col and a per-group matrix multiply.

    Products are accumulated in float64 and rounded once to the input dtype.
    """
    _check_conv_operands(x, weights, spec, bias)
    out_spatial = spec.output_spatial(x.shape[2:])
    n, g = x.shape[0], spec.groups
    og = spec.out_channels // g
    cols = _im2col(x, spec, out_spatial)
    cols = cols.reshape(n, g, -1, cols.shape[-1]).astype(np.float64)
    w = weights.reshape(g, og, -1).astype(np.float64)
    acc = np.matmul(w, cols)
    if bias is not None:
        acc += bias.astype(np.float64).reshape(1, g, og, 1)
    return acc.reshape((n, spec.out_channels) + out_spatial).astype(x.dtype)


def conv_backward(x: Tensor, weights: Tensor, spec: ConvSpec,
                  grad_output: Tensor) -> Tuple[Tensor, Tensor, Tensor]:
    """Return (grad_input, grad_weights, grad_bias)"""
    _check_conv_operands(x, weights, spec)
    out_spatial = spec.output_spatial(x.shape[2:])
    n, g = x.shape[0], spec.groups
    og = spec.out_channels // g
    if tuple(grad_output.shape) != (n, spec.out_channels) + out_spatial:
        raise ShapeError(f"grad_output {list(grad_output.shape)} does not match conv output")
    cols = _im2col(x, spec, out_spatial)
    cols = cols.reshape(n, g, -1, cols.shape[-1]).astype(np.float64)
    go = grad_output.reshape(n, g, og, -1).astype(np.float64)
    w = weights.reshape(g, og, -1).astype(np.float64)

    grad_w = np.matmul(go, cols.transpose(0, 1, 3, 2)).sum(axis=0)
    grad_cols = np.matmul(w.transpose(0, 2, 1), go)
    grad_x = _col2im(grad_cols, spec, x.shape, out_spatial)
    grad_b = go.sum(axis=(0, 3)).reshape(spec.out_channels)
    return (grad_x.astype(x.dtype),
            grad_w.reshape(weights.shape).astype(weights.dtype),
            grad_b.astype(weights.dtype))


def conv_forward_direct(x: Tensor, weights: Tensor, bias: Optional[Tensor], spec: ConvSpec) -> Tensor:
    """Nested-loop reference convolution, accumulating (ic, k...) in order"""
    _check_conv_operands(x, weights, spec, bias)
    out_spatial = spec.output_spatial(x.shape[2:])
    in_spatial = x.shape[2:]
    n = x.shape[0]
    cg = spec.in_channels // spec.groups
    og = spec.out_channels // spec.groups
    out = np.zeros((n, spec.out_channels) + out_spatial, dtype=x.dtype)
    for b in range(n):
        for o in range(spec.out_channels):
            g = o // og
            for pos in np.ndindex(*out_spatial):
                acc = 0.0
                for ic in range(cg):
                    for k in np.ndindex(*spec.kernel):
                        src = tuple(p * s - pad + kk * d for p, s, pad, kk, d in
                                    zip(pos, spec.stride, spec.padding, k, spec.dilation))
                        if all(0 <= i < e for i, e in zip(src, in_spatial)):
                            acc += float(x[(b, g * cg + ic) + src]) * float(weights[(o, ic) + k])
                if bias is not None:
                    acc += float(bias[o])
                out[(b, o) + pos] = acc
    return out


def conv3d_forward(x: Tensor, weights: Tensor, bias: Optional[Tensor], spec: ConvSpec) -> Tensor:
    if spec.spatial_dims != 3:
        raise ShapeError(f"conv3d needs a (Kt, Kh, Kw) kernel, got {spec.kernel}")
    return conv_forward(x, weights, bias, spec)


def conv3d_backward(x: Tensor, weights: Tensor, spec: ConvSpec, grad_output: Tensor):
    if spec.spatial_dims != 3:
        raise ShapeError(f"conv3d needs a (Kt, Kh, Kw) kernel, got {spec.kernel}")
    return conv_backward(x, weights, spec, grad_output)


# --- Pooling ---

def pool_output_spatial(in_spatial, window, stride, padding) -> Tuple[int, ...]:
    for i, w, p in zip(in_spatial, window, padding):
        if w > i + 2 * p:
            raise ShapeError(f"pool window {list(window)} larger than padded input {list(in_spatial)}")
    return tuple((i + 2 * p - w) // s + 1 for i, w, s, p in zip(in_spatial, window, stride, padding))


def maxpool_forward(x: Tensor, window, stride=None, padding=0) -> Tuple[Tensor, np.ndarray]:
    """
    Max pooling returning (output, argmax), argmax holding flat spatial
    input indices; ties go to the lowest flat index.
    """
    nd = x.ndim - 2
    window = _expand(window, nd, 1, 'window')
    stride = _expand(stride if stride is not None else window, nd, 1, 'stride')
    padding = _expand(padding, nd, 0, 'padding')
    in_spatial = x.shape[2:]
    out_spatial = pool_output_spatial(in_spatial, window, stride, padding)

    xp = _pad_spatial(x, padding, value=-np.inf)
    index = np.arange(math.prod(in_spatial)).reshape(in_spatial)
    if any(padding):
        index = np.pad(index, [(p, p) for p in padding], constant_values=-1)
    ones = (1,) * nd
    offsets = list(np.ndindex(*window))
    values = np.stack([xp[_window(o, ones, stride, out_spatial)] for o in offsets], axis=2)
    indices = np.stack([index[_window(o, ones, stride, out_spatial)[2:]] for o in offsets], axis=0)

    best = np.argmax(values, axis=2)[:, :, None]
    out = np.take_along_axis(values, best, axis=2)[:, :, 0]
    full = np.broadcast_to(indices, x.shape[:2] + indices.shape)
    argmax = np.take_along_axis(full, best, axis=2)[:, :, 0]
    return out, argmax


def maxpool_gather(x: Tensor, argmax: np.ndarray) -> Tensor:
    """Re-evaluate a max pool at fixed argmax positions"""
    n, c = x.shape[:2]
    picked = np.take_along_axis(x.reshape(n, c, -1), argmax.reshape(n, c, -1), axis=2)
    return picked.reshape(argmax.shape)


def maxpool_backward(grad_output: Tensor, argmax: np.ndarray, input_shape) -> Tensor:
    n, c = input_shape[:2]
    grad = np.zeros((n * c, math.prod(input_shape[2:])), dtype=grad_output.dtype)
    rows = np.arange(n * c)[:, None]
    np.add.at(grad, (rows, argmax.reshape(n * c, -1)), grad_output.reshape(n * c, -1))
    return grad.reshape(input_shape)


def _adaptive_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row i averages [floor(i*In/Out), ceil((i+1)*In/Out))"""
    m = np.zeros((n_out, n_in))
    for i in range(n_out):
        start = (i * n_in) // n_out
        end = -((-(i + 1) * n_in) // n_out)
        m[i, start:end] = 1.0 / (end - start)
    return m


def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Align-corners linear interpolation weights [n_out, n_in]"""
    m = np.zeros((n_out, n_in))
    if n_out == 1:
        m[0, 0] = 1.0
        return m
    for j in range(n_out):
        src = j * (n_in - 1) / (n_out - 1)
        i0 = min(int(math.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        frac = src - i0
        m[j, i0] += 1.0 - frac
        m[j, i1] += frac
    return m


def _separable(x: Tensor, mats) -> Tensor:
    """Apply one [out, in] matrix along each spatial axis"""
    y = x.astype(np.float64)
    for axis, mat in enumerate(mats):
        y = np.moveaxis(np.tensordot(y, mat, axes=([axis + 2], [1])), -1, axis + 2)
    return y.astype(x.dtype)


def _check_out_spatial(x: Tensor, out_spatial) -> Tuple[int, ...]:
    out_spatial = tuple(int(o) for o in out_spatial)
    if len(out_spatial) != x.ndim - 2:
        raise ShapeError(f"need {x.ndim - 2} output extents, got {list(out_spatial)}")
    if min(out_spatial) < 1:
        raise ShapeError(f"output extents must be >= 1, got {list(out_spatial)}")
    return out_spatial


def adaptive_avg_pool(x: Tensor, out_spatial) -> Tensor:
    out_spatial = _check_out_spatial(x, out_spatial)
    if any(o > i for o, i in zip(out_spatial, x.shape[2:])):
        raise ShapeError(f"adaptive pool output {list(out_spatial)} exceeds input {list(x.shape[2:])}")
    return _separable(x, [_adaptive_matrix(i, o) for i, o in zip(x.shape[2:], out_spatial)])


def adaptive_avg_pool_backward(grad_output: Tensor, in_spatial) -> Tensor:
    mats = [_adaptive_matrix(i, o).T for i, o in zip(in_spatial, grad_output.shape[2:])]
    return _separable(grad_output, mats)


def global_avg_pool(x: Tensor) -> Tensor:
    """[N, C, *spatial] -> [N, C]"""
    return x.mean(axis=tuple(range(2, x.ndim)), dtype=np.float64).astype(x.dtype)


def global_avg_pool_backward(grad_output: Tensor, input_shape) -> Tensor:
    plane = math.prod(input_shape[2:])
    grad = grad_output.reshape(grad_output.shape + (1,) * (len(input_shape) - 2)) / plane
    return np.broadcast_to(grad, input_shape).astype(grad_output.dtype)


def bilinear_upsample(x: Tensor, out_spatial) -> Tensor:
    out_spatial = _check_out_spatial(x, out_spatial)
    return _separable(x, [_interp_matrix(i, o) for i, o in zip(x.shape[2:], out_spatial)])


def bilinear_upsample_backward(grad_output: Tensor, in_spatial) -> Tensor:
    mats = [_interp_matrix(i, o).T for i, o in zip(in_spatial, grad_output.shape[2:])]
    return _separable(grad_output, mats)


# --- Normalization and activations ---

class BatchNormCache(NamedTuple):
    x_hat: Tensor
    inv_std: np.ndarray
    gamma: Tensor
    training: bool


def _channel_view(v: np.ndarray, ndim: int) -> np.ndarray:
    return v.reshape((1, -1) + (1,) * (ndim - 2))


def batchnorm_forward(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
                      running_var: np.ndarray, training: bool,
                      momentum: float = BN_MOMENTUM, eps: float = BN_EPS) -> Tuple[Tensor, BatchNormCache]:
    """
    Per-channel normalization over every axis but C.

    Train mode uses batch statistics and updates the running buffers in place
    (unbiased variance); eval mode uses the running buffers.
    """
    c = x.shape[1]
    for name, v in (('gamma', gamma), ('beta', beta), ('running_mean', running_mean), ('running_var', running_var)):
        if v.shape != (c,):
            raise ShapeError(f"batchnorm {name} has shape {list(v.shape)}, input has {c} channels")
    axes = (0,) + tuple(range(2, x.ndim))
    if training:
        count = x.size // c
        mean = x.mean(axis=axes, dtype=np.float64)
        var = x.var(axis=axes, dtype=np.float64)
        running_mean[...] = (1.0 - momentum) * running_mean + momentum * mean
        running_var[...] = (1.0 - momentum) * running_var + momentum * var * count / max(count - 1, 1)
    else:
        mean = running_mean.astype(np.float64)
        var = running_var.astype(np.float64)
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = ((x - _channel_view(mean, x.ndim)) * _channel_view(inv_std, x.ndim)).astype(x.dtype)
    out = _channel_view(gamma, x.ndim) * x_hat + _channel_view(beta, x.ndim)
    return out.astype(x.dtype), BatchNormCache(x_hat, inv_std, gamma, training)


def batchnorm_backward(grad_output: Tensor, cache: BatchNormCache) -> Tuple[Tensor, Tensor, Tensor]:
    """Return (grad_input, grad_gamma, grad_beta)"""
    nd = grad_output.ndim
    axes = (0,) + tuple(range(2, nd))
    g = grad_output.astype(np.float64)
    x_hat = cache.x_hat.astype(np.float64)
    grad_gamma = (g * x_hat).sum(axis=axes)
    grad_beta = g.sum(axis=axes)
    scale = _channel_view(cache.gamma.astype(np.float64) * cache.inv_std, nd)
    if cache.training:
        count = grad_output.size // grad_output.shape[1]
        grad_x = scale / count * (count * g - _channel_view(grad_beta, nd) - x_hat * _channel_view(grad_gamma, nd))
    else:
        grad_x = scale * g
    dtype = grad_output.dtype
    return grad_x.astype(dtype), grad_gamma.astype(dtype), grad_beta.astype(dtype)


def relu_forward(x: Tensor) -> Tensor:
    return np.maximum(x, 0).astype(x.dtype)


def relu_backward(grad_output: Tensor, x: Tensor) -> Tensor:
    return np.where(x > 0, grad_output, 0).astype(grad_output.dtype)


def dropout_forward(x: Tensor, p: float, rng: Optional[np.random.Generator], training: bool) -> Tuple[Tensor, Optional[np.ndarray]]:
    """Inverted dropout; returns (output, scaled mask or None in eval mode)"""
    if not training or p <= 0.0:
        return x, None
    keep = rng.random(x.shape) >= p
    mask = (keep / (1.0 - p)).astype(x.dtype)
    return x * mask, mask


def dropout_backward(grad_output: Tensor, mask: Optional[np.ndarray]) -> Tensor:
    return grad_output if mask is None else grad_output * mask


# --- Linear and loss ---

def linear_forward(x: Tensor, weights: Tensor, bias: Optional[Tensor]) -> Tensor:
    if x.ndim != 2 or weights.ndim != 2 or x.shape[1] != weights.shape[1]:
        raise ShapeError(f"linear: input {list(x.shape)} incompatible with weights {list(weights.shape)}")
    out = x.astype(np.float64) @ weights.astype(np.float64).T
    if bias is not None:
        out += bias.astype(np.float64)
    return out.astype(x.dtype)


def linear_backward(x: Tensor, weights: Tensor, grad_output: Tensor) -> Tuple[Tensor, Tensor, Tensor]:
    g = grad_output.astype(np.float64)
    grad_x = g @ weights.astype(np.float64)
    grad_w = g.T @ x.astype(np.float64)
    grad_b = g.sum(axis=0)
    return grad_x.astype(x.dtype), grad_w.astype(weights.dtype), grad_b.astype(weights.dtype)


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tuple[float, Tensor]:
    """
    Mean cross-entropy over every labeled position.

    logits are [N, K] or [N, K, *spatial] with labels [N] or [N, *spatial];
    the gradient is (softmax - onehot) / positions.
    """
    k = logits.shape[1]
    flat = np.moveaxis(logits, 1, -1).reshape(-1, k).astype(np.float64)
    labels = np.asarray(labels).reshape(-1)
    if labels.shape[0] != flat.shape[0]:
        raise ShapeError(f"{labels.shape[0]} labels for {flat.shape[0]} positions")
    if labels.min() < 0 or labels.max() >= k:
        raise ShapeError(f"labels must lie in [0, {k})")
    shifted = flat - flat.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    rows = np.arange(flat.shape[0])
    loss = -log_probs[rows, labels].mean()
    grad = np.exp(log_probs)
    grad[rows, labels] -= 1.0
    grad /= flat.shape[0]
    grad = np.moveaxis(grad.reshape(logits.shape[:1] + logits.shape[2:] + (k,)), -1, 1)
    return float(loss), grad.astype(logits.dtype)
