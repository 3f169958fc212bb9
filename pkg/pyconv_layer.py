#!/usr/bin/env python3
"""
Pyramidal convolution (PyConv) layer
Levels of increasing kernel size run in parallel over the full input and
are concatenated channel-wise, bottom (smallest kernel) level first.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from nn_ops import ConvSpec, conv_backward, conv_forward
from tensor_utils import ShapeError, Tensor, channel_ranges, concat_channels

logger = logging.getLogger(__name__)

MAX_LEVELS = 5

# Split of FM_o across n levels, as denominators, bottom level first
LEVEL_SPLITS = {
    1: (1,),
    2: (2, 2),
    3: (4, 4, 2),
    4: (4, 4, 4, 4),
    5: (4, 4, 4, 8, 8),
}


@dataclass(frozen=True)
class PyConvLevel:
    kernel: Tuple[int, ...]
    out_channels: int
    groups: int = 1

    def __post_init__(self):
        kernel = self.kernel
        if isinstance(kernel, (int, np.integer)):
            kernel = (int(kernel), int(kernel))
        object.__setattr__(self, 'kernel', tuple(int(k) for k in kernel))

    @property
    def size(self) -> int:
        """Spatial kernel size used for ordering and group ratios"""
        return self.kernel[-1]

    def padding(self, dilation: Tuple[int, ...]) -> Tuple[int, ...]:
        return tuple((k - 1) // 2 * d for k, d in zip(self.kernel, dilation))


@dataclass(frozen=True)
class PyConvSpec:
    in_channels: int
    levels: Tuple[PyConvLevel, ...]
    stride: Tuple[int, ...] = ()
    dilation: Tuple[int, ...] = ()

    def __post_init__(self):
        levels = tuple(self.levels)
        object.__setattr__(self, 'levels', levels)
        n = len(levels[0].kernel) if levels else 2
        for name, default in (('stride', 1), ('dilation', 1)):
            value = getattr(self, name)
            if value is None or value == ():
                value = (default,) * n
            elif isinstance(value, (int, np.integer)):
                value = (int(value),) * n
            object.__setattr__(self, name, tuple(int(v) for v in value))

    @property
    def out_channels(self) -> int:
        return sum(level.out_channels for level in self.levels)

    @property
    def n_levels(self) -> int:
        return len(self.levels)

    @property
    def spatial_dims(self) -> int:
        return len(self.stride)

    def level_conv_spec(self, n: int) -> ConvSpec:
        level = self.levels[n]
        return ConvSpec(kernel=level.kernel, in_channels=self.in_channels,
                        out_channels=level.out_channels, stride=self.stride,
                        padding=level.padding(self.dilation), dilation=self.dilation,
                        groups=level.groups)

    def weight_shapes(self) -> List[Tuple[int, ...]]:
        return [(lv.out_channels, self.in_channels // lv.groups) + lv.kernel for lv in self.levels]

    def output_spatial(self, in_spatial: Sequence[int]) -> Tuple[int, ...]:
        return self.level_conv_spec(0).output_spatial(in_spatial)

    def channel_ranges(self) -> List[Tuple[int, int]]:
        return channel_ranges([lv.out_channels for lv in self.levels])


def validate(spec: PyConvSpec) -> List[str]:
    """Return every violated grouping/shape rule; empty means valid"""
    violations = []
    if spec.in_channels < 1:
        violations.append(f"in-channels must be positive, got {spec.in_channels}")
    if not spec.levels:
        violations.append("at least one level is required")
    if len(spec.levels) > MAX_LEVELS:
        violations.append(f"at most {MAX_LEVELS} levels are supported, got {len(spec.levels)}")
    if min(spec.stride, default=1) < 1 or min(spec.dilation, default=1) < 1:
        violations.append("stride and dilation must be positive")
    for n, level in enumerate(spec.levels, start=1):
        if len(level.kernel) != spec.spatial_dims:
            violations.append(f"level {n}: kernel {level.kernel} does not match {spec.spatial_dims} spatial dims")
        if level.out_channels < 1 or level.groups < 1 or min(level.kernel) < 1:
            violations.append(f"level {n}: extents must be positive")
            continue
        if spec.in_channels >= 1 and spec.in_channels % level.groups:
            violations.append(f"level {n}: groups must divide in-channels ({level.groups} vs {spec.in_channels})")
        if level.out_channels % level.groups:
            violations.append(
                f"level {n}: groups must divide level out-channels ({level.groups} vs {level.out_channels})")
        if any(k % 2 == 0 for k in level.kernel):
            violations.append(f"level {n}: kernel {level.kernel} must be odd")
    sizes = [level.size for level in spec.levels]
    if any(b <= a for a, b in zip(sizes, sizes[1:])):
        violations.append(f"kernel sizes must be strictly increasing, got {sizes}")
    return violations


def _power_of_two_divisors(n: int) -> List[int]:
    divisors, d = [], 1
    while n % d == 0:
        divisors.append(d)
        d *= 2
    return divisors


def default_group_schedule(fm_in: int, kernel_sizes: Sequence[int]) -> List[int]:
    """
    Groups per level: the smallest power-of-2 divisor of FM_i at or above
    K_n^2 / K_1^2, or the largest one when none reaches the ratio.
    """
    if fm_in < 1:
        raise ShapeError(f"FM_i must be >= 1, got {fm_in}")
    divisors = _power_of_two_divisors(fm_in)
    k1 = kernel_sizes[0]
    groups = []
    for k in kernel_sizes:
        ratio = (k * k) / (k1 * k1)
        above = [d for d in divisors if d >= ratio]
        if not above:
            logger.warning(f"FM_i={fm_in} has no power-of-2 divisor >= {ratio:g} for {k}x{k}, using {divisors[-1]}")
        groups.append(above[0] if above else divisors[-1])
    groups[0] = 1
    return groups


def level_splits(out_channels: int, n_levels: int) -> List[int]:
    """Per-level output channels, bottom level first"""
    if n_levels not in LEVEL_SPLITS:
        raise ShapeError(f"unsupported level count {n_levels}")
    splits = [out_channels // d for d in LEVEL_SPLITS[n_levels]]
    if sum(splits) != out_channels or min(splits) < 1:
        raise ShapeError(f"{out_channels} channels cannot be split over {n_levels} levels")
    return splits


def even_splits(out_channels: int, n_levels: int) -> List[int]:
    if out_channels % n_levels:
        raise ShapeError(f"{out_channels} channels do not split evenly over {n_levels} levels")
    return [out_channels // n_levels] * n_levels


def make_pyconv_spec(in_channels: int, out_channels: int, kernel_sizes: Sequence,
                     groups: Optional[Sequence[int]] = None, splits: Optional[Sequence[int]] = None,
                     stride=1, dilation=1) -> PyConvSpec:
    """Build a spec from kernel sizes, defaulting to even splits and the default schedule"""
    kernels = [k if isinstance(k, tuple) else (int(k), int(k)) for k in kernel_sizes]
    if splits is None:
        splits = even_splits(out_channels, len(kernels))
    if groups is None:
        groups = default_group_schedule(in_channels, [k[-1] for k in kernels])
    levels = tuple(PyConvLevel(k, o, g) for k, o, g in zip(kernels, splits, groups))
    return PyConvSpec(in_channels=in_channels, levels=levels, stride=stride, dilation=dilation)


def _check(spec: PyConvSpec, x: Tensor, level_weights: Sequence[Tensor]) -> None:
    violations = validate(spec)
    if violations:
        raise ShapeError("invalid PyConv spec: " + "; ".join(violations))
    if len(level_weights) != spec.n_levels:
        raise ShapeError(f"{len(level_weights)} weight tensors for {spec.n_levels} levels")
    for n, (w, shape) in enumerate(zip(level_weights, spec.weight_shapes()), start=1):
        if tuple(w.shape) != shape:
            raise ShapeError(f"level {n} weights {list(w.shape)} do not match {list(shape)}")


def pyconv_forward(x: Tensor, spec: PyConvSpec, level_weights: Sequence[Tensor],
                   max_workers: int = 1) -> Tensor:
    """Run every level over the full input and concatenate in level order"""
    _check(spec, x, level_weights)

    def run(n: int) -> Tensor:
        return conv_forward(x, level_weights[n], None, spec.level_conv_spec(n))

    if max_workers > 1 and spec.n_levels > 1:
        with ThreadPoolExecutor(max_workers=min(max_workers, spec.n_levels)) as pool:
            outputs = list(pool.map(run, range(spec.n_levels)))
    else:
        outputs = [run(n) for n in range(spec.n_levels)]
    return concat_channels(outputs)


def pyconv_backward(x: Tensor, spec: PyConvSpec, level_weights: Sequence[Tensor],
                    grad_output: Tensor) -> Tuple[Tensor, List[Tensor]]:
    """Return (grad_input, per-level weight grads); grad_input sums the levels in order"""
    _check(spec, x, level_weights)
    grad_input = None
    grad_weights = []
    for n, (start, end) in enumerate(spec.channel_ranges()):
        gx, gw, _ = conv_backward(x, level_weights[n], spec.level_conv_spec(n), grad_output[:, start:end])
        grad_input = gx if grad_input is None else grad_input + gx
        grad_weights.append(gw)
    return grad_input, grad_weights


def pyconv_params(spec: PyConvSpec) -> int:
    return sum(math.prod(lv.kernel) * (spec.in_channels // lv.groups) * lv.out_channels for lv in spec.levels)


def pyconv_cost(spec: PyConvSpec, out_spatial: Sequence[int]) -> Tuple[int, int]:
    """(params, flops) with one multiply-accumulate counted as one FLOP"""
    params = pyconv_params(spec)
    return params, params * math.prod(out_spatial)


def describe_levels(spec: PyConvSpec) -> List[str]:
    """Level rows top (largest kernel) first, e.g. '9x9, 16, G=16'"""
    rows = []
    for lv in reversed(spec.levels):
        kernel = 'x'.join(str(k) for k in lv.kernel)
        rows.append(f"{kernel}, {lv.out_channels}, G={lv.groups}")
    return rows
