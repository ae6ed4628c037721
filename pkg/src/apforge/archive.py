"""Binary tensor archive (``.apbt``).

Layout, all integers little-endian::

    b"APBT"  u16 version  u32 entry_count
    per entry:
        u16 name_len  name (utf-8)  u8 rank  u32 dim * rank  u32 crc32(payload)
        payload: float32 little-endian, row-major

Writes go to a temporary file in the destination directory that is then
renamed over the target, so readers never observe a partial archive.
"""

from __future__ import annotations

import os
import struct
import tempfile
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"APBT"
VERSION = 1


class ArchiveError(ValueError):
    pass


class ChecksumError(ArchiveError):
    pass


def encode(tensors) -> bytes:
    items = list(tensors.items()) if hasattr(tensors, "items") else list(tensors)
    names = [name for name, _ in items]
    if len(set(names)) != len(names):
        dup = next(n for n in names if names.count(n) > 1)
        raise ArchiveError(f"duplicate tensor name {dup!r}")
    parts = [MAGIC, struct.pack("<HI", VERSION, len(items))]
    for name, arr in items:
        if not name:
            raise ArchiveError("tensor names must be non-empty")
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f4")
        payload = arr.tobytes()
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(struct.pack("<I", zlib.crc32(payload)))
        parts.append(payload)
    return b"".join(parts)


def decode(buf: bytes) -> dict[str, np.ndarray]:
    if buf[:4] != MAGIC:
        raise ArchiveError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}")
    try:
        version, count = struct.unpack_from("<HI", buf, 4)
        if version != VERSION:
            raise ArchiveError(f"unsupported archive version {version}")
        pos = 10
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<B", buf, pos)
            pos += 1
            shape = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            (crc,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            size = 4 * int(np.prod(shape, dtype=np.int64))
            payload = buf[pos : pos + size]
            if len(payload) != size:
                raise ArchiveError(f"truncated payload for {name!r}")
            pos += size
            if zlib.crc32(payload) != crc:
                raise ChecksumError(f"checksum mismatch for tensor {name!r}")
            if name in out:
                raise ArchiveError(f"duplicate tensor name {name!r}")
            out[name] = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(shape)
    except struct.error as exc:
        raise ArchiveError(f"truncated archive: {exc}") from None
    return out


def atomic_write(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def archive_save(tensors, path) -> None:
    atomic_write(path, encode(tensors))


def archive_load(path) -> dict[str, np.ndarray]:
    return decode(Path(path).read_bytes())
