"""Binary container for named float32 arrays (model checkpoints).

Layout, all little-endian:

    magic   4 bytes  "MVCK"
    version u32      1
    count   u32      number of entries
    entry*  u32 name_len, name_len bytes UTF-8 name,
            u32 rank, u32 extents[rank], float32 payload (C order)

Entries round-trip bit-exactly and keep their insertion order.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

_MAGIC = b"MVCK"
_VERSION = 1


class CheckpointError(ValueError):
    """Raised on malformed checkpoint files."""


def save_arrays(path: str | Path, arrays: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<2I", _VERSION, len(arrays)))
        for name, arr in arrays.items():
            encoded = name.encode("utf-8")
            arr = np.ascontiguousarray(arr, dtype="<f4")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_arrays(path: str | Path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _MAGIC:
            raise CheckpointError(f"bad checkpoint magic {magic!r} in {path}")
        version, count = struct.unpack("<2I", fh.read(8))
        if version != _VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", fh.read(4))
            name = fh.read(name_len).decode("utf-8")
            (rank,) = struct.unpack("<I", fh.read(4))
            shape = struct.unpack(f"<{rank}I", fh.read(4 * rank))
            n = int(np.prod(shape)) if rank else 1
            payload = fh.read(4 * n)
            out[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
    return out
