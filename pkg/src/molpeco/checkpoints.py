"""Binary parameter checkpoints (magic "MPCK0001").

Layout: magic, u32 little-endian JSON metadata length, canonical JSON
metadata, u32 parameter count, then per parameter: u32 name length + UTF-8
name, u32 ndim, u32 dims, and the float64 little-endian payload. Parameters
are written sorted by name, so identical states serialize byte-identically.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import DataError

CHECKPOINT_MAGIC = b"MPCK0001"


def save_checkpoint(path, state: dict[str, np.ndarray], metadata: dict) -> None:
    meta_bytes = json.dumps(metadata, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as handle:
        handle.write(CHECKPOINT_MAGIC)
        handle.write(struct.pack("<I", len(meta_bytes)))
        handle.write(meta_bytes)
        handle.write(struct.pack("<I", len(state)))
        for name in sorted(state):
            values = np.ascontiguousarray(state[name], dtype="<f8")
            name_bytes = name.encode("utf-8")
            handle.write(struct.pack("<I", len(name_bytes)))
            handle.write(name_bytes)
            handle.write(struct.pack("<I", values.ndim))
            handle.write(struct.pack(f"<{values.ndim}I", *values.shape))
            handle.write(values.tobytes())


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as handle:
        blob = handle.read()
    if blob[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise DataError(f"'{path}' is not a parameter checkpoint (bad magic)")
    offset = len(CHECKPOINT_MAGIC)

    def take(count: int) -> bytes:
        nonlocal offset
        if offset + count > len(blob):
            raise DataError(f"checkpoint '{path}' is truncated")
        chunk = blob[offset:offset + count]
        offset += count
        return chunk

    (meta_len,) = struct.unpack("<I", take(4))
    metadata = json.loads(take(meta_len).decode("utf-8"))
    (count,) = struct.unpack("<I", take(4))
    state: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(shape)) if shape else 1
        state[name] = np.frombuffer(take(8 * size), dtype="<f8").reshape(shape).copy()
    return metadata, state
