#!/usr/bin/env python3
"""
PYCV weight files
Little-endian container of named float32/float64 tensors:
  "PYCV" | u32 version | u32 count |
  per tensor: u32 name length | UTF-8 name | u8 dtype | u8 rank | u64 extents[rank] | raw data
"""

import logging
import struct
from pathlib import Path
from typing import Dict, Union

import numpy as np

logger = logging.getLogger(__name__)

MAGIC = b"PYCV"
FORMAT_VERSION = 1
DTYPE_CODES = {0: np.dtype('<f4'), 1: np.dtype('<f8')}
CODE_FOR_DTYPE = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class WeightFileError(ValueError):
    """Malformed or truncated weight file; offset is the byte position of the problem"""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


def encode_weights(tensors: Dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack('<II', FORMAT_VERSION, len(tensors))]
    for name, value in tensors.items():
        value = np.asarray(value)
        if value.dtype not in CODE_FOR_DTYPE:
            raise WeightFileError(f"tensor '{name}' has unsupported dtype {value.dtype}", 0)
        raw_name = name.encode('utf-8')
        parts.append(struct.pack('<I', len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack('<BB', CODE_FOR_DTYPE[value.dtype], value.ndim))
        parts.append(struct.pack(f'<{value.ndim}Q', *value.shape))
        parts.append(np.ascontiguousarray(value, dtype=value.dtype.newbyteorder('<')).tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise WeightFileError(f"truncated file: need {n} bytes for {what}, {len(self.data) - self.pos} left",
                                  self.pos)
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode_weights(data: bytes) -> Dict[str, np.ndarray]:
    reader = _Reader(data)
    if reader.take(4, 'magic') != MAGIC:
        raise WeightFileError("bad magic, not a PYCV weight file", 0)
    version, count = reader.unpack('<II', 'header')
    if version != FORMAT_VERSION:
        raise WeightFileError(f"unsupported format version {version}", 4)
    tensors: Dict[str, np.ndarray] = {}
    for _ in range(count):
        start = reader.pos
        (name_len,) = reader.unpack('<I', 'name length')
        try:
            name = reader.take(name_len, 'name').decode('utf-8')
        except UnicodeDecodeError:
            raise WeightFileError("tensor name is not valid UTF-8", start + 4)
        code_pos = reader.pos
        code, rank = reader.unpack('<BB', 'dtype and rank')
        if code not in DTYPE_CODES:
            raise WeightFileError(f"unknown dtype code {code} for '{name}'", code_pos)
        shape = reader.unpack(f'<{rank}Q', 'extents')
        dtype = DTYPE_CODES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        raw = reader.take(nbytes, f"data of '{name}'")
        if name in tensors:
            raise WeightFileError(f"duplicate tensor '{name}'", start)
        tensors[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).astype(dtype.newbyteorder('='))
    if reader.pos != len(data):
        raise WeightFileError(f"{len(data) - reader.pos} trailing bytes after {count} tensors", reader.pos)
    return tensors


def save_weights(path: Union[str, Path], tensors: Dict[str, np.ndarray]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_weights(tensors))
    logger.info(f"Saved {len(tensors)} tensors to {path}")


def load_weights(path: Union[str, Path]) -> Dict[str, np.ndarray]:
    tensors = decode_weights(Path(path).read_bytes())
    logger.info(f"Loaded {len(tensors)} tensors from {path}")
    return tensors
