#!/usr/bin/env python3
"""
Tests for the PYCV weight file format
"""

import struct

import numpy as np
import pytest

from network_builder import build_classification_net
from weight_io import MAGIC, WeightFileError, decode_weights, encode_weights, load_weights, save_weights


def sample_tensors():
    rng = np.random.default_rng(0)
    return {
        'stem.conv.weight': rng.standard_normal((4, 3, 7, 7)).astype(np.float32),
        'fc.bias': rng.standard_normal(10),
        'meta/epoch': np.array([3.0]),
    }


def test_round_trip_is_bit_exact(tmp_path):
    tensors = sample_tensors()
    path = tmp_path / 'w.pycv'
    save_weights(path, tensors)
    loaded = load_weights(path)
    assert list(loaded) == list(tensors)
    for name, value in tensors.items():
        assert loaded[name].dtype == value.dtype
        assert loaded[name].tobytes() == value.tobytes()


def test_network_state_round_trip(tmp_path):
    net = build_classification_net('pyconvresnet', 50, num_classes=10, width_divisor=16).initialize(2)
    save_weights(tmp_path / 'net.pycv', net.state_tensors())
    twin = build_classification_net('pyconvresnet', 50, num_classes=10, width_divisor=16).initialize(9)
    twin.load_state(load_weights(tmp_path / 'net.pycv'))
    assert all(np.array_equal(twin.params[k], v) for k, v in net.params.items())


def test_header_layout():
    data = encode_weights({'a': np.zeros((2, 3), np.float32)})
    assert data[:4] == MAGIC
    assert struct.unpack('<II', data[4:12]) == (1, 1)
    assert len(data) == 12 + 4 + 1 + 2 + 16 + 24


def test_truncated_file_reports_offset():
    data = encode_weights({'a': np.zeros((2, 3), np.float32)})
    with pytest.raises(WeightFileError) as info:
        decode_weights(data[:50])
    assert info.value.offset == 35
    assert "truncated" in str(info.value)


def test_bad_magic_and_version():
    data = encode_weights({'a': np.zeros(2)})
    with pytest.raises(WeightFileError) as info:
        decode_weights(b"NOPE" + data[4:])
    assert info.value.offset == 0
    with pytest.raises(WeightFileError) as info:
        decode_weights(data[:4] + struct.pack('<I', 7) + data[8:])
    assert info.value.offset == 4


def test_duplicate_names_and_trailing_bytes():
    data = encode_weights({'a': np.zeros((2, 3), np.float32)})
    entry = data[12:]
    duplicated = MAGIC + struct.pack('<II', 1, 2) + entry + entry
    with pytest.raises(WeightFileError) as info:
        decode_weights(duplicated)
    assert info.value.offset == len(data)
    with pytest.raises(WeightFileError):
        decode_weights(data + b"\x00")


def test_unsupported_dtype():
    with pytest.raises(WeightFileError):
        encode_weights({'labels': np.arange(3)})
