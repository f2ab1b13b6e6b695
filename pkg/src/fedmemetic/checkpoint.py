"""Binary checkpoint format.

Layout, all integers little-endian unsigned 32-bit::

    b"FSYN" | version | spec_len | spec JSON (UTF-8, spec_len bytes)
    then for every parameter in graph order:
        rank | dim_0 .. dim_{rank-1} | float32 LE values, row-major

Parameter names are not stored; they are recovered by rebuilding the graph
from the embedded spec, which fixes both order and expected shapes.
"""
from __future__ import annotations

import json
import os
import struct

import numpy as np

from .model import ModelGraph, ModelSpec, build_model

MAGIC = b"FSYN"
VERSION = 1

__all__ = [
    "MAGIC",
    "VERSION",
    "CheckpointError",
    "BadMagicError",
    "VersionMismatchError",
    "TruncatedTensorError",
    "PayloadMismatchError",
    "dumps",
    "loads",
    "save_checkpoint",
    "load_checkpoint",
]


class CheckpointError(ValueError):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedTensorError(CheckpointError):
    pass


class PayloadMismatchError(CheckpointError):
    """Tensor payload disagrees with the embedded spec (shape, count, trailing bytes)."""


def dumps(model: ModelGraph) -> bytes:
    spec = json.dumps(model.spec.to_dict(), sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(spec)), spec]
    for arr in model.params.values():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes(order="C"))
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedTensorError(
                f"truncated {what}: need {n} bytes at offset {self.pos}, have {len(self.buf) - self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def loads(buf: bytes) -> ModelGraph:
    if buf[:4] != MAGIC:
        raise BadMagicError(f"bad magic: expected {MAGIC!r}, found {bytes(buf[:4])!r}")
    r = _Reader(buf)
    r.take(4, "magic")
    version = r.u32("version")
    if version != VERSION:
        raise VersionMismatchError(f"checkpoint version {version}, this reader supports {VERSION}")
    spec_len = r.u32("spec length")
    spec = ModelSpec.from_dict(json.loads(r.take(spec_len, "spec").decode("utf-8")))
    model = build_model(spec)
    params = {}
    for name, ref in model.params.items():
        rank = r.u32(f"rank of {name}")
        dims = tuple(struct.unpack(f"<{rank}I", r.take(4 * rank, f"dims of {name}")))
        if dims != ref.shape:
            raise PayloadMismatchError(f"{name}: payload shape {dims} but spec implies {ref.shape}")
        count = int(np.prod(dims, dtype=np.int64))
        raw = r.take(4 * count, f"tensor {name}")
        params[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).astype(np.float32)
    if r.pos != len(buf):
        raise PayloadMismatchError(f"{len(buf) - r.pos} trailing bytes after the last tensor")
    model.set_params(params)
    return model


def save_checkpoint(model: ModelGraph, path: str | os.PathLike) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(model))


def load_checkpoint(path: str | os.PathLike) -> ModelGraph:
    with open(path, "rb") as fh:
        return loads(fh.read())
