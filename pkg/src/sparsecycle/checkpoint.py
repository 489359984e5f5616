"""Binary tensor-table format used for checkpoints and feature weights.

Layout (all integers little-endian)::

    b"SLCG"  u32 version  u64 count
    count x { u16 name_len, name (utf-8), u8 rank, rank x u64 dims, payload }

The payload is raw little-endian float32. Tensors whose name ends in
``@f64`` hold float64 values stored as their bit image, two 32-bit words per
element, so that duty cycles survive a round trip exactly.
"""
from __future__ import annotations

import struct
from collections import OrderedDict
from typing import Dict, Mapping

import numpy as np

MAGIC = b"SLCG"
VERSION = 1
F64_SUFFIX = "@f64"


class CheckpointError(ValueError):
    """Corrupt, truncated or incompatible tensor file."""


def encode_tensors(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<IQ", VERSION, len(tensors))]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise CheckpointError(f"tensor name too long: {name[:40]}...")
        if arr.ndim > 0xFF:
            raise CheckpointError(f"{name}: rank {arr.ndim} exceeds 255")
        dtype = "<f8" if name.endswith(F64_SUFFIX) else "<f4"
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=dtype).tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes, source: str):
        self.buf, self.pos, self.source = buf, 0, source

    def take(self, n: int, what: str) -> bytes:
        chunk = self.buf[self.pos:self.pos + n]
        if len(chunk) != n:
            raise CheckpointError(
                f"{self.source}: truncated {what} at offset {self.pos}: "
                f"expected {n} bytes, got {len(chunk)} (file length {len(self.buf)})"
            )
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode_tensors(buf: bytes, source: str = "<bytes>") -> "OrderedDict[str, np.ndarray]":
    r = _Reader(buf, source)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise CheckpointError(f"{source}: bad magic {magic!r} at offset 0, expected {MAGIC!r}")
    version, count = r.unpack("<IQ", "header")
    if version != VERSION:
        raise CheckpointError(f"{source}: unsupported format version {version} (expected {VERSION})")
    out = OrderedDict()
    for i in range(count):
        (name_len,) = r.unpack("<H", f"name length of tensor {i}")
        name = r.take(name_len, f"name of tensor {i}").decode("utf-8")
        (rank,) = r.unpack("<B", f"rank of {name!r}")
        dims = r.unpack(f"<{rank}Q", f"dims of {name!r}")
        dtype = "<f8" if name.endswith(F64_SUFFIX) else "<f4"
        n = int(np.prod(dims)) if rank else 1
        payload = r.take(n * np.dtype(dtype).itemsize, f"payload of {name!r}")
        out[name] = np.frombuffer(payload, dtype=dtype).reshape(dims).copy()
    if r.pos != len(buf):
        raise CheckpointError(
            f"{source}: {len(buf) - r.pos} trailing bytes after offset {r.pos}"
        )
    return out


def write_tensors(path, tensors: Mapping[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_tensors(tensors))


def read_tensors(path) -> Dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return decode_tensors(fh.read(), str(path))


def text_to_tensor(text: str) -> np.ndarray:
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.float32)


def tensor_to_text(arr: np.ndarray) -> str:
    return bytes(np.asarray(arr).astype(np.uint8).tolist()).decode("utf-8")
