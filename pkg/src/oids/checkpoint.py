"""Binary checkpoint: a named-tensor table holding every model weight.

Layout (all integers little-endian u32):

    magic "OIDC" | version | tensor count
    per tensor: name length | UTF-8 name | rank | dims... | f32 data

Tensors are written sorted by name, so equal states produce identical
bytes. Optimizer state is deliberately not stored; a checkpoint restarts
training from fresh moments.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import DataError

__all__ = ["CHECKPOINT_MAGIC", "CHECKPOINT_VERSION", "save_checkpoint", "load_checkpoint"]

CHECKPOINT_MAGIC = b"OIDC"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, tensors: dict[str, np.ndarray]) -> None:
    blobs = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(tensors))]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype="<f4")
        raw = name.encode("utf-8")
        blobs.append(struct.pack("<I", len(raw)))
        blobs.append(raw)
        blobs.append(struct.pack("<I", arr.ndim))
        blobs.append(struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b"")
        blobs.append(arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(blobs))


class _Reader:
    def __init__(self, data: bytes, path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise DataError(f"{self.path}: truncated checkpoint")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        data = fh.read()
    r = _Reader(data, path)
    if r.take(4) != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: not a checkpoint file (bad magic)")
    version = r.u32()
    if version != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    count = r.u32()
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        name_len = r.u32()
        try:
            name = r.take(name_len).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise DataError(f"{path}: undecodable tensor name") from exc
        if name in tensors:
            raise DataError(f"{path}: duplicate tensor {name!r}")
        rank = r.u32()
        if rank > 8:
            raise DataError(f"{path}: implausible tensor rank {rank}")
        shape = tuple(r.u32() for _ in range(rank))
        n_items = 1
        for d in shape:
            n_items *= d
        raw = r.take(4 * n_items)
        tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
    if r.pos != len(data):
        raise DataError(f"{path}: trailing bytes after tensor table")
    return tensors
