"""Binary PGM (P5) / PPM (P6) reading and writing."""
from __future__ import annotations

import os

import numpy as np

__all__ = [
    "ImageFormatError",
    "UnsupportedFormatError",
    "MalformedHeaderError",
    "decode_pnm",
    "encode_pnm",
    "read_pnm",
    "write_pnm",
]

_WHITESPACE = b" \t\r\n\x0b\x0c"


class ImageFormatError(ValueError):
    pass


class UnsupportedFormatError(ImageFormatError):
    pass


class MalformedHeaderError(ImageFormatError):
    pass


def _tokens(buf: bytes, count: int, pos: int) -> tuple[list[bytes], int]:
    out = []
    n = len(buf)
    while len(out) < count:
        while pos < n and buf[pos] in _WHITESPACE:
            pos += 1
        if pos < n and buf[pos:pos + 1] == b"#":
            while pos < n and buf[pos] not in b"\r\n":
                pos += 1
            continue
        start = pos
        while pos < n and buf[pos] not in _WHITESPACE and buf[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise MalformedHeaderError(f"header ended after {len(out)} of {count} fields")
        out.append(buf[start:pos])
    return out, pos


def decode_pnm(buf: bytes) -> np.ndarray:
    """Decode to an (H, W, C) float32 array scaled to [0, 1]."""
    magic = bytes(buf[:2])
    if magic not in (b"P5", b"P6"):
        raise UnsupportedFormatError(f"unsupported magic {magic!r}; only binary P5/P6 are read")
    fields, pos = _tokens(buf, 3, 2)
    try:
        width, height, maxval = (int(f) for f in fields)
    except ValueError as exc:
        raise MalformedHeaderError(f"non-integer header field in {fields!r}") from exc
    if width < 1 or height < 1:
        raise MalformedHeaderError(f"bad dimensions {width}x{height}")
    if not 1 <= maxval <= 65535:
        raise MalformedHeaderError(f"maxval {maxval} outside 1..65535")
    if pos >= len(buf) or buf[pos] not in _WHITESPACE:
        raise MalformedHeaderError("missing whitespace after maxval")
    pos += 1
    channels = 1 if magic == b"P5" else 3
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    need = width * height * channels * dtype.itemsize
    raster = buf[pos:pos + need]
    if len(raster) < need:
        raise MalformedHeaderError(f"raster has {len(raster)} bytes, header implies {need}")
    pixels = np.frombuffer(raster, dtype=dtype).reshape(height, width, channels)
    return pixels.astype(np.float32) / np.float32(maxval)


def encode_pnm(image: np.ndarray) -> bytes:
    """Encode an (H, W, 1|3) array in [0, 1] as 8-bit P5/P6."""
    image = np.asarray(image)
    if image.ndim == 2:
        image = image[:, :, None]
    h, w, c = image.shape
    if c not in (1, 3):
        raise ValueError(f"need 1 or 3 channels, got {c}")
    magic = b"P5" if c == 1 else b"P6"
    raster = np.round(np.clip(image, 0.0, 1.0) * 255).astype(np.uint8)
    return magic + f"\n{w} {h}\n255\n".encode("ascii") + raster.tobytes()


def read_pnm(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_pnm(fh.read())


def write_pnm(path: str | os.PathLike, image: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_pnm(image))
