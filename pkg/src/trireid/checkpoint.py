"""Little-endian binary container for named float64 arrays.

Layout: magic ``EDTR``, version u32, array count u32, then per array a
u32 name length, UTF-8 name, u32 rank, rank u64 extents, and the float64
payload in row-major order. Writing the same arrays twice yields identical
bytes, so checkpoints can be compared byte-for-byte.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import ParseError

MAGIC = b"EDTR"
VERSION = 1


def save_arrays(path: str | Path, arrays: dict[str, np.ndarray]) -> None:
    chunks = [MAGIC, struct.pack("<II", VERSION, len(arrays))]
    for name, arr in arrays.items():
        data = np.ascontiguousarray(arr, dtype=np.float64)
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<I", data.ndim))
        chunks.append(struct.pack(f"<{data.ndim}Q", *data.shape))
        chunks.append(data.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_arrays(path: str | Path) -> dict[str, np.ndarray]:
    blob = Path(path).read_bytes()
    pos = 0

    def need(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise ParseError(f"truncated checkpoint while reading {what}", offset=pos)
        piece = blob[pos:pos + n]
        pos += n
        return piece

    if need(4, "magic") != MAGIC:
        raise ParseError("not a parameter checkpoint (bad magic)", offset=0)
    version, count = struct.unpack("<II", need(8, "header"))
    if version != VERSION:
        raise ParseError(
            f"checkpoint version {version} is not supported (expected {VERSION})",
            offset=4,
        )
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", need(4, "name length"))
        name = need(name_len, "name").decode("utf-8")
        (rank,) = struct.unpack("<I", need(4, "rank"))
        shape = struct.unpack(f"<{rank}Q", need(8 * rank, "extents"))
        n_items = int(np.prod(shape)) if rank else 1
        payload = need(8 * n_items, f"payload of {name}")
        arr = np.frombuffer(payload, dtype="<f8").copy().reshape(shape)
        arrays[name] = arr
    if pos != len(blob):
        raise ParseError("trailing bytes after the last array", offset=pos)
    return arrays
