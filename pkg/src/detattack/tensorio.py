"""Raw tensor file format shared by images and perturbations.

Layout: 16-byte header of four little-endian uint32 (magic, width, height,
channels) followed by width*height*channels little-endian float32 values in
C order for an array of shape (height, width, channels).
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = 0x31465444  # b"DTF1" read as little-endian uint32

_HEADER = struct.Struct("<4I")


def write_tensor(path: str | Path, data: np.ndarray) -> None:
    data = np.asarray(data)
    if data.ndim != 3:
        raise ValueError(f"expected a (h, w, c) array, got shape {data.shape}")
    h, w, c = data.shape
    payload = np.ascontiguousarray(data, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, w, h, c))
        fh.write(payload.tobytes())


def read_tensor(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.read(_HEADER.size)
        if len(header) != _HEADER.size:
            raise ValueError(f"{path}: truncated header")
        magic, w, h, c = _HEADER.unpack(header)
        if magic != MAGIC:
            raise ValueError(f"{path}: bad magic 0x{magic:08x}")
        payload = fh.read()
    expected = w * h * c * 4
    if len(payload) != expected:
        raise ValueError(f"{path}: expected {expected} payload bytes, got {len(payload)}")
    return np.frombuffer(payload, dtype="<f4").reshape(h, w, c).astype(np.float32)
