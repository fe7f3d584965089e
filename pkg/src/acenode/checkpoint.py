"""Binary checkpoint container for named float64 tensors.

Layout (all integers little-endian)::

    magic      4 bytes  b"ACEP"
    version    u32
    count      u32
    entries    count x { name_len u16, name utf-8, ndim u8, shape u64*ndim, offset u64 }
    payload    float64 little-endian, each tensor row-major at its offset
               (offset counted in bytes from the start of the payload)
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"ACEP"
VERSION = 1


class CheckpointFormatError(ValueError):
    pass


def save_checkpoint(path, tensors: dict[str, np.ndarray]) -> None:
    header = bytearray(MAGIC)
    header += struct.pack("<II", VERSION, len(tensors))
    payload = bytearray()
    for name, value in tensors.items():
        arr = np.array(value, dtype="<f8", order="C")
        raw = name.encode("utf-8")
        header += struct.pack("<H", len(raw)) + raw
        header += struct.pack("<B", arr.ndim)
        header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        header += struct.pack("<Q", len(payload))
        payload += arr.tobytes()
    Path(path).write_bytes(bytes(header) + bytes(payload))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic {buf[:4]!r}")
    pos = 4
    try:
        version, count = struct.unpack_from("<II", buf, pos)
        pos += 8
        if version != VERSION:
            raise CheckpointFormatError(f"{path}: unsupported version {version}")
        entries = []
        for _ in range(count):
            (n,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos:pos + n].decode("utf-8")
            pos += n
            (ndim,) = struct.unpack_from("<B", buf, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}Q", buf, pos)
            pos += 8 * ndim
            (offset,) = struct.unpack_from("<Q", buf, pos)
            pos += 8
            entries.append((name, shape, offset))
    except struct.error as exc:
        raise CheckpointFormatError(f"{path}: truncated header at byte {pos}") from exc
    out = {}
    for name, shape, offset in entries:
        n = int(np.prod(shape, dtype=np.int64))
        start = pos + offset
        if start + 8 * n > len(buf):
            raise CheckpointFormatError(f"{path}: tensor {name!r} runs past end of file (offset {start})")
        out[name] = np.frombuffer(buf, dtype="<f8", count=n, offset=start).reshape(shape).astype(np.float64)
    return out
