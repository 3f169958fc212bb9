#!/usr/bin/env python3
"""
Tensor helpers for the PyConv toolkit
A Tensor is a row-major numpy ndarray laid out NCHW (or NCTHW for video)
"""

import zlib
from typing import List, Sequence, Tuple

import numpy as np

Tensor = np.ndarray


class ShapeError(ValueError):
    """Raised when tensor extents or layer specs are inconsistent"""


def validate_dims(dims: Sequence[int]) -> Tuple[int, ...]:
    """Check that dims is a non-empty list of positive extents"""
    dims = tuple(int(d) for d in dims)
    if not dims:
        raise ShapeError("dims must be non-empty")
    if any(d < 1 for d in dims):
        raise ShapeError(f"all extents must be >= 1, got {list(dims)}")
    return dims


def zeros(dims: Sequence[int], dtype=np.float32) -> Tensor:
    return np.zeros(validate_dims(dims), dtype=dtype)


def flat_index(index: Sequence[int], dims: Sequence[int]) -> int:
    """Row-major flat offset of a multi-index, e.g. ((n*C + c)*H + h)*W + w"""
    offset = 0
    for i, d in zip(index, dims):
        if not 0 <= i < d:
            raise ShapeError(f"index {list(index)} out of range for {list(dims)}")
        offset = offset * d + i
    return offset


def philox_generator(seed: int, stream: int = 0) -> np.random.Generator:
    """Counter-based generator keyed by (seed, stream)"""
    key = np.array([seed & 0xFFFFFFFFFFFFFFFF, stream & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def name_stream(name: str) -> int:
    """Stable stream id for a named tensor"""
    return zlib.crc32(name.encode('utf-8'))


def he_normal_init(dims: Sequence[int], fan_in: int, seed: int,
                   stream: int = 0, dtype=np.float32) -> Tensor:
    """
    Draw N(0, sqrt(2/fan_in)) weights from a Philox stream.

    The same (dims, fan_in, seed, stream) always gives bit-identical output.
    """
    if fan_in <= 0:
        raise ShapeError(f"fan_in must be positive, got {fan_in}")
    dims = validate_dims(dims)
    std = np.sqrt(2.0 / fan_in)
    draws = philox_generator(seed, stream).standard_normal(dims, dtype=np.float64)
    return (draws * std).astype(dtype)


def _check_same_except_channels(tensors: List[Tensor]) -> None:
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or t.shape[:1] != ref[:1] or t.shape[2:] != ref[2:]:
            raise ShapeError(f"cannot concat {list(t.shape)} with {list(ref)}: non-channel extents differ")


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat_channels needs at least one tensor")
    _check_same_except_channels(tensors)
    return np.concatenate(tensors, axis=1)


def slice_channels(t: Tensor, start: int, count: int) -> Tensor:
    """Copy of channels [start, start + count)"""
    if start < 0 or count < 1 or start + count > t.shape[1]:
        raise ShapeError(f"channel slice [{start}, {start + count}) out of range for {t.shape[1]} channels")
    return t[:, start:start + count].copy()


def channel_ranges(counts: Sequence[int]) -> List[Tuple[int, int]]:
    """Contiguous [start, end) ranges for a list of channel counts"""
    ranges, start = [], 0
    for c in counts:
        ranges.append((start, start + c))
        start += c
    return ranges
