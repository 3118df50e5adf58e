"""Binary tensor container (``.mpqt``).

Layout, all integers little-endian::

    b"MPQT" | version:u16 | count:u32
    per entry: name_len:u32 | name:utf-8 | dtype:u8 | rank:u8 | dims:u64*rank | payload

dtype codes: 0=f32, 1=f64, 2=u8, 3=u16, 4=i64.
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"MPQT"
VERSION = 1
MAX_RANK = 8

DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("u1"), 3: np.dtype("<u2"), 4: np.dtype("<i8")}
CODES = {dt: code for code, dt in DTYPES.items()}


class ContainerError(ValueError):
    pass


def _code_for(arr: np.ndarray) -> int:
    dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
    for code, known in DTYPES.items():
        if np.dtype(dt) == known:
            return code
    raise ContainerError(f"unsupported dtype {arr.dtype}")


def encode(entries: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<HI", VERSION, len(entries))]
    for name, arr in entries.items():
        arr = np.asarray(arr)
        code = _code_for(arr)
        if arr.ndim > MAX_RANK:
            raise ContainerError(f"rank {arr.ndim} exceeds {MAX_RANK}")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<BB", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=DTYPES[code]).tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.buf):
            raise ContainerError("unexpected end of container")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode(buf: bytes) -> dict[str, np.ndarray]:
    r = _Reader(bytes(buf))
    if r.take(4) != MAGIC:
        raise ContainerError("bad magic")
    version, count = r.unpack("<HI")
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version}")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = r.unpack("<I")
        try:
            name = r.take(name_len).decode("utf-8")
        except UnicodeDecodeError:
            raise ContainerError("entry name is not valid UTF-8") from None
        if name in out:
            raise ContainerError(f"duplicate entry {name!r}")
        code, rank = r.unpack("<BB")
        if code not in DTYPES:
            raise ContainerError(f"unknown dtype code {code}")
        if rank > MAX_RANK:
            raise ContainerError(f"rank {rank} exceeds {MAX_RANK}")
        dims = r.unpack(f"<{rank}Q")
        nbytes = DTYPES[code].itemsize
        for d in dims:
            nbytes *= d
        payload = r.take(nbytes)
        try:
            out[name] = np.frombuffer(payload, dtype=DTYPES[code]).reshape(dims).copy()
        except (ValueError, OverflowError):
            raise ContainerError(f"invalid dimensions {dims} for entry {name!r}") from None
    if r.pos != len(r.buf):
        raise ContainerError("trailing bytes after last entry")
    return out


def save_container(path, entries: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode(entries))


def load_container(path) -> dict[str, np.ndarray]:
    return decode(Path(path).read_bytes())
