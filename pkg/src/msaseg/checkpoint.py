"""MSAT checkpoint files: named float32 tensors in a little-endian binary layout.

    "MSAT" | u32 version | u32 count | count x (u16 name_len, name utf-8,
    u8 rank, rank x u32 dim, prod(dims) x f32)
"""
from __future__ import annotations

import struct

import numpy as np

from .tensor import Tensor

MAGIC = b"MSAT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(tensors: dict[str, Tensor]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, t in tensors.items():
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise CheckpointError(f"tensor name too long: {name[:40]}...")
        shape = t.shape
        if len(shape) > 0xFF:
            raise CheckpointError(f"tensor {name} has rank {len(shape)}")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack(f"<B{len(shape)}I", len(shape), *shape))
        parts.append(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    return b"".join(parts)


def loads(buf: bytes) -> dict[str, Tensor]:
    if buf[:4] != MAGIC:
        raise CheckpointError(f"not an MSAT checkpoint (magic {buf[:4]!r})")
    try:
        version, count = struct.unpack_from("<II", buf, 4)
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        pos = 12
        out = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos:pos + name_len].decode("utf-8")
            pos += name_len
            (rank,) = struct.unpack_from("<B", buf, pos)
            pos += 1
            shape = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            n = int(np.prod(shape, dtype=np.int64))
            if pos + 4 * n > len(buf):
                raise CheckpointError(f"tensor {name!r} truncated at byte {pos}")
            data = np.frombuffer(buf, dtype="<f4", count=n, offset=pos).reshape(shape)
            pos += 4 * n
            out[name] = Tensor(data, dtype=np.float32)
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from None
    return out


def save(path: str, tensors: dict[str, Tensor]) -> None:
    with open(path, "wb") as f:
        f.write(dumps(tensors))


def load(path: str) -> dict[str, Tensor]:
    with open(path, "rb") as f:
        return loads(f.read())
