"""Named-tensor checkpoint container.

Layout, all little-endian: magic "SELDTNSR", version u32, tensor count u32,
then per tensor (sorted by name): name length u16 + UTF-8 name, ndim u8,
dims u32 each, float32 payload in C order.  Names follow the model's
state-dict paths, e.g. ``decoder.blocks.0.mixer.fwd.in_proj.weight``.
"""

from __future__ import annotations

import struct

import numpy as np
from numpy.typing import NDArray

from .errors import InputError

CHECKPOINT_MAGIC = b"SELDTNSR"
CHECKPOINT_VERSION = 1


def save_tensors(path: str, tensors: dict[str, NDArray]) -> None:
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(tensors)))
        for name in sorted(tensors):
            # np.asarray(order="C") keeps 0-d arrays 0-d, unlike ascontiguousarray
            array = np.asarray(tensors[name], dtype="<f4", order="C")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", array.ndim))
            fh.write(struct.pack(f"<{array.ndim}I", *array.shape))
            fh.write(array.tobytes())


def load_tensors(path: str) -> dict[str, NDArray[np.float32]]:
    tensors: dict[str, NDArray[np.float32]] = {}
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != CHECKPOINT_MAGIC:
            raise InputError(f"{path}: not a checkpoint file (bad magic {magic!r})")
        header = fh.read(8)
        if len(header) != 8:
            raise InputError(f"{path}: truncated checkpoint header")
        version, count = struct.unpack("<II", header)
        if version != CHECKPOINT_VERSION:
            raise InputError(f"{path}: unsupported checkpoint version {version}")
        for _ in range(count):
            name_len = struct.unpack("<H", _read_exact(fh, 2, path))[0]
            name = _read_exact(fh, name_len, path).decode("utf-8")
            ndim = struct.unpack("<B", _read_exact(fh, 1, path))[0]
            shape = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim, path))
            n_bytes = 4 * int(np.prod(shape, dtype=np.int64)) if ndim else 4
            data = np.frombuffer(_read_exact(fh, n_bytes, path), dtype="<f4")
            tensors[name] = data.reshape(shape).copy()
        if fh.read(1):
            raise InputError(f"{path}: trailing bytes after the last tensor")
    return tensors


def _read_exact(fh, n: int, path: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise InputError(f"{path}: truncated checkpoint payload")
    return data
