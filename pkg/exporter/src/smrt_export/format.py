"""SMRT dump writing, self-contained.

The layout is an interchange format, so this module reimplements it from
the byte spec rather than importing the retrieval engine: header
``<4sIIQI`` (magic, version, dim, record count, flags), a u64 offset
table, then per record ``<QHI`` (seq_id, layer_id, n_tokens), the role
bytes, the pooled f32 vector, the row-major f32 token matrix, and a
CRC-32 over all preceding record bytes.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

import numpy as np

MAGIC = b"SMRT"
FORMAT_VERSION = 1

ROLE_TEXT = 0
ROLE_VISION = 1
ROLE_SPECIAL = 2
ROLE_POOLING = 3
ROLE_PADDING = 4

_HEADER = struct.Struct("<4sIIQI")
_RECORD_PREFIX = struct.Struct("<QHI")
_OFFSET = struct.Struct("<Q")
_CRC = struct.Struct("<I")


@dataclass(frozen=True)
class ExportRecord:
    """One sequence at one layer, ready to serialize."""

    seq_id: int
    layer_id: int
    pooled: np.ndarray  # (dim,) float32, unit norm
    tokens: np.ndarray  # (n_tokens, dim) float32, raw hidden states
    roles: np.ndarray  # (n_tokens,) uint8

    def __post_init__(self):
        object.__setattr__(self, "pooled", np.ascontiguousarray(self.pooled, np.float32))
        object.__setattr__(self, "tokens", np.ascontiguousarray(self.tokens, np.float32))
        object.__setattr__(self, "roles", np.ascontiguousarray(self.roles, np.uint8))
        if self.tokens.ndim != 2 or self.pooled.shape != (self.tokens.shape[1],):
            raise ValueError("pooled width must match token width")
        if self.roles.shape != (self.tokens.shape[0],):
            raise ValueError("one role byte per token row")


def _encode(record: ExportRecord) -> bytes:
    body = _RECORD_PREFIX.pack(record.seq_id, record.layer_id, record.tokens.shape[0])
    body += record.roles.tobytes()
    body += record.pooled.tobytes()
    body += record.tokens.tobytes()
    return body + _CRC.pack(zlib.crc32(body) & 0xFFFFFFFF)


def write_records(records: Sequence[ExportRecord], path: str | Path) -> int:
    """Serialize records in order; returns bytes written."""
    records = list(records)
    dim = records[0].pooled.shape[0] if records else 0
    for r in records:
        if r.pooled.shape[0] != dim:
            raise ValueError(f"record {r.seq_id}: dim {r.pooled.shape[0]} != {dim}")
    payloads = [_encode(r) for r in records]
    cursor = _HEADER.size + _OFFSET.size * len(records)
    offsets = []
    for p in payloads:
        offsets.append(cursor)
        cursor += len(p)
    blob = _HEADER.pack(MAGIC, FORMAT_VERSION, dim, len(records), 0)
    blob += b"".join(_OFFSET.pack(o) for o in offsets)
    blob += b"".join(payloads)
    Path(path).write_bytes(blob)
    return len(blob)


def write_manifest(
    records: Sequence[ExportRecord],
    source_model: str,
    path: str | Path,
    created_at: str | None = None,
) -> None:
    """JSON sidecar restating the header, in the layout the engine reads."""
    if created_at is None:
        created_at = datetime.now(timezone.utc).isoformat()
    payload = {
        "source_model": source_model,
        "layer_ids": sorted({r.layer_id for r in records}),
        "dim": int(records[0].pooled.shape[0]) if records else 0,
        "record_count": len(records),
        "created_at": created_at,
        "format_version": FORMAT_VERSION,
    }
    Path(path).write_text(json.dumps(payload, indent=2) + "\n")
