"""Binary formats: ``MTLW`` checkpoints, ``MTLC`` clips and 8-bit PGM images.

All integers and floats are little-endian.

MTLW: ``b"MTLW"``, version u32, entry count u32, then per entry: name
length u16, UTF-8 name, rank u8, ``rank`` extents as u32, float32 data.
Optimizer entries follow the model entries under names prefixed ``opt/``.

MTLC: ``b"MTLC"``, version u32, T, H, W, C as u32, float32 data in
T-H-W-C row-major order.
"""
from __future__ import annotations

import os
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Mapping, Optional, Union

import numpy as np

from egomtl.errors import FormatError

__all__ = [
    "CHECKPOINT_MAGIC",
    "CLIP_MAGIC",
    "save_checkpoint",
    "load_checkpoint",
    "encode_checkpoint",
    "decode_checkpoint",
    "write_clip",
    "read_clip",
    "encode_clip",
    "decode_clip",
    "write_pgm",
    "read_pgm",
]

CHECKPOINT_MAGIC = b"MTLW"
CLIP_MAGIC = b"MTLC"
FORMAT_VERSION = 1
OPT_PREFIX = "opt/"

PathLike = Union[str, os.PathLike]


def _atomic_write(path: PathLike, payload: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


def encode_checkpoint(tensors: Mapping[str, np.ndarray],
                      optimizer: Optional[Mapping[str, np.ndarray]] = None) -> bytes:
    entries = list(tensors.items())
    if optimizer:
        entries += [(OPT_PREFIX + k, v) for k, v in optimizer.items()]
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", FORMAT_VERSION, len(entries))]
    for name, arr in entries:
        arr = np.asarray(arr, dtype="<f4")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated file while reading {what}", self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode_checkpoint(buf: bytes) -> tuple["OrderedDict[str, np.ndarray]", "OrderedDict[str, np.ndarray]"]:
    """Return ``(tensors, optimizer_state)``; optimizer names lose their prefix."""
    r = _Reader(buf)
    if r.take(4, "magic") != CHECKPOINT_MAGIC:
        raise FormatError("not an MTLW checkpoint (bad magic)", 0)
    version, count = r.unpack("<II", "header")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    tensors, opt = OrderedDict(), OrderedDict()
    for _ in range(count):
        (nlen,) = r.unpack("<H", "name length")
        start = r.pos
        try:
            name = r.take(nlen, "name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError("entry name is not UTF-8", start) from exc
        (rank,) = r.unpack("<B", "rank")
        shape = r.unpack(f"<{rank}I", "extents")
        n = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(r.take(4 * n, f"data of {name!r}"), dtype="<f4").reshape(shape).astype(np.float32)
        if name.startswith(OPT_PREFIX):
            opt[name[len(OPT_PREFIX):]] = arr
        else:
            tensors[name] = arr
    if r.pos != len(buf):
        raise FormatError("trailing bytes after last entry", r.pos)
    return tensors, opt


def save_checkpoint(path: PathLike, tensors: Mapping[str, np.ndarray],
                    optimizer: Optional[Mapping[str, np.ndarray]] = None) -> None:
    _atomic_write(path, encode_checkpoint(tensors, optimizer))


def load_checkpoint(path: PathLike):
    return decode_checkpoint(Path(path).read_bytes())


def encode_clip(frames: np.ndarray) -> bytes:
    frames = np.asarray(frames, dtype="<f4")
    if frames.ndim != 4:
        raise ValueError(f"clip must be [T,H,W,C], got {frames.shape}")
    return CLIP_MAGIC + struct.pack("<5I", FORMAT_VERSION, *frames.shape) + np.ascontiguousarray(frames).tobytes()


def decode_clip(buf: bytes) -> np.ndarray:
    r = _Reader(buf)
    if r.take(4, "magic") != CLIP_MAGIC:
        raise FormatError("not an MTLC clip (bad magic)", 0)
    version, T, H, W, C = r.unpack("<5I", "header")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported clip version {version}", 4)
    n = T * H * W * C
    if len(buf) - r.pos != 4 * n:
        raise FormatError(f"expected {4 * n} data bytes for a {T}x{H}x{W}x{C} clip, found {len(buf) - r.pos}", r.pos)
    return np.frombuffer(buf, dtype="<f4", offset=r.pos).reshape(T, H, W, C).astype(np.float32)


def write_clip(path: PathLike, frames: np.ndarray) -> None:
    _atomic_write(path, encode_clip(frames))


def read_clip(path: PathLike) -> np.ndarray:
    return decode_clip(Path(path).read_bytes())


def write_pgm(path: PathLike, image: np.ndarray) -> None:
    """Write a 2-D array with values in [0, 1] as a binary 8-bit PGM."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ValueError(f"PGM needs a 2-D image, got {image.shape}")
    h, w = image.shape
    px = np.round(np.clip(image, 0.0, 1.0) * 255).astype(np.uint8)
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + px.tobytes())


def read_pgm(path: PathLike) -> np.ndarray:
    buf = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PGM header", pos)
        fields.append(buf[start:pos])
    if fields[0] != b"P5":
        raise FormatError("not a binary PGM", 0)
    w, h, maxval = (int(f) for f in fields[1:])
    pos += 1
    data = np.frombuffer(buf, dtype=np.uint8, offset=pos)
    if data.size != w * h or maxval != 255:
        raise FormatError("PGM payload does not match header", pos)
    return data.reshape(h, w)
