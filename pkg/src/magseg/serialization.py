"""Binary tensor container shared by checkpoints, samples and teacher files.

Layout (little-endian)::

    b"A2SG"  u32 version
    repeated until EOF:
        u16 name_len, name (utf-8), u32 rank, u64 extent * rank, f64 payload
"""

from __future__ import annotations

import os
import struct
from typing import Mapping

import numpy as np

from .errors import FormatError

MAGIC = b"A2SG"
VERSION = 1


def dumps(sections: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    for name, value in sections.items():
        arr = np.asarray(value, dtype="<f8")
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise FormatError(f"section name too long: {name[:32]}...")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def loads(buf: bytes) -> dict[str, np.ndarray]:
    if len(buf) < 8 or buf[:4] != MAGIC:
        raise FormatError("bad magic: not an A2SG tensor file")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported format version {version}")
    pos = 8
    out: dict[str, np.ndarray] = {}

    def need(n):
        if pos + n > len(buf):
            raise FormatError(f"truncated file at byte {pos}")

    while pos < len(buf):
        need(2)
        (name_len,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        need(name_len + 4)
        try:
            name = buf[pos : pos + name_len].decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"section name at byte {pos} is not utf-8") from None
        pos += name_len
        (rank,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        if rank > 32:
            raise FormatError(f"section {name!r} claims rank {rank}")
        need(8 * rank)
        shape = struct.unpack_from(f"<{rank}Q", buf, pos)
        pos += 8 * rank
        count = int(np.prod(shape, dtype=np.int64)) if rank else 1
        need(8 * count)
        arr = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).reshape(shape)
        pos += 8 * count
        if name in out:
            raise FormatError(f"duplicate section {name!r}")
        out[name] = arr.astype(np.float64)
    return out


def write_tensors(path: str | os.PathLike, sections: Mapping[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(sections))


def read_tensors(path: str | os.PathLike) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return loads(fh.read())
