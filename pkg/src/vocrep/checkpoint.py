"""Portable binary checkpoint container.

Layout: magic ``VOC2``, u32 version, u64 length-prefixed UTF-8 JSON config,
then one record per tensor: u16 name length, name bytes, u8 dtype tag
(0 = float32), u8 rank, rank u64 dims, raw little-endian values. Records
are sorted by name so write -> read -> write round-trips byte-identically.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"VOC2"
FORMAT_VERSION = 1
_DTYPE_F32 = 0


class CheckpointFormatError(Exception):
    """File is not a readable checkpoint."""


@dataclass
class Checkpoint:
    config: dict
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def update_step(self) -> int:
        return int(self.config.get("update_step", 0))

    @property
    def validation_loss(self):
        return self.config.get("validation_loss")


def _canonical_json(config: dict) -> bytes:
    return json.dumps(config, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_checkpoint(path, tensors: dict[str, np.ndarray], config: dict):
    """Write tensors plus a JSON config blob; keys are sorted for stable bytes."""
    blob = _canonical_json(config)
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION), struct.pack("<Q", len(blob)), blob]
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        name_b = name.encode("utf-8")
        parts.append(struct.pack("<H", len(name_b)))
        parts.append(name_b)
        parts.append(struct.pack("<BB", _DTYPE_F32, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:4] != MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != FORMAT_VERSION:
        raise CheckpointFormatError(f"{path}: unsupported version {version}")
    (blob_len,) = struct.unpack_from("<Q", data, 8)
    pos = 16
    try:
        config = json.loads(data[pos:pos + blob_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"{path}: bad config blob") from exc
    pos += blob_len
    tensors: dict[str, np.ndarray] = {}
    while pos < len(data):
        try:
            (name_len,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos:pos + name_len].decode("utf-8")
            pos += name_len
            dtype_tag, rank = struct.unpack_from("<BB", data, pos)
            pos += 2
            dims = struct.unpack_from(f"<{rank}Q", data, pos)
            pos += 8 * rank
            if dtype_tag != _DTYPE_F32:
                raise CheckpointFormatError(f"{path}: unknown dtype tag {dtype_tag}")
            count = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(data, dtype="<f4", count=count, offset=pos)
            pos += 4 * count
            tensors[name] = arr.reshape(dims).astype(np.float32)
        except (struct.error, ValueError) as exc:
            raise CheckpointFormatError(f"{path}: truncated record") from exc
    return Checkpoint(config=config, tensors=tensors)
