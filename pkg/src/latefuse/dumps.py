"""Checksummed binary container for embedding collections and adapter params.

Layout, all little-endian:

  header (24 bytes): magic b"SMRT" | u32 version=1 | u32 dim | u64 record_count
                     | u32 flags
  offset table:      record_count x u64 absolute file offsets, ascending
  record:            u64 seq_id | u16 layer_id | u32 n_tokens
                     | n_tokens role bytes | dim f32 pooled
                     | n_tokens*dim f32 tokens (row-major)
                     | u32 CRC-32 (IEEE) over every preceding byte of the record

Flags: bit 0 marks token rows as already unit-normalized, bit 1 marks the
adapter-parameter variant, bit 2 marks pooled-only collections whose records
need not carry a pooling-role token.

The adapter-parameter variant reuses the container framing with one record:
the n_tokens slot holds the hidden width H, the header dim holds the output
width d, and the payload is ln_scale (H f32), ln_shift (H f32), proj_weight
(H*d f32 row-major), proj_bias (d f32) followed by the usual CRC. The
LayerNorm epsilon is not persisted; loading restores the default.

Writes are byte-deterministic: the same records in the same order produce
the same file. Reads are lazy with O(1) record access via the offset table
and verify the CRC of every record they touch. A sidecar manifest restates
the header facts as structured text for human and cross-tool consumption.
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .adapter import AdapterParams
from .embeddings import SequenceEmbedding, TokenRole
from .errors import (
    BadMagic,
    ChecksumMismatch,
    HeterogeneousDim,
    IoFailure,
    TruncatedFile,
    UnsupportedVersion,
)

MAGIC = b"SMRT"
FORMAT_VERSION = 1

FLAG_PRE_NORMALIZED = 1 << 0
FLAG_ADAPTER_PARAMS = 1 << 1
FLAG_POOLED_ONLY = 1 << 2

_HEADER = struct.Struct("<4sIIQI")
_RECORD_PREFIX = struct.Struct("<QHI")
_CRC = struct.Struct("<I")
_OFFSET = struct.Struct("<Q")

POOLED_NORM_VALIDATION_TOL = 1e-3


def _f32_bytes(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f4").tobytes()


def _encode_record(emb: SequenceEmbedding) -> bytes:
    body = (
        _RECORD_PREFIX.pack(emb.seq_id, emb.layer_id, emb.n_tokens)
        + emb.roles.astype(np.uint8).tobytes()
        + _f32_bytes(emb.pooled)
        + _f32_bytes(emb.tokens)
    )
    return body + _CRC.pack(zlib.crc32(body) & 0xFFFFFFFF)


def _record_length(n_tokens: int, dim: int) -> int:
    return _RECORD_PREFIX.size + n_tokens + 4 * dim + 4 * n_tokens * dim + _CRC.size


@dataclass(frozen=True)
class DumpSummary:
    path: str
    record_count: int
    dim: int
    bytes_written: int


def write_dump(
    records: Sequence[SequenceEmbedding],
    path: str | Path,
    flags: int = 0,
) -> DumpSummary:
    """Write records in order. All records must share one dim; an empty
    sequence produces a valid header-only file with dim 0."""
    records = list(records)
    dim = records[0].dim if records else 0
    for r in records:
        if r.dim != dim:
            raise HeterogeneousDim(f"record {r.seq_id} has dim {r.dim}, expected {dim}")
    payloads = [_encode_record(r) for r in records]
    base = _HEADER.size + _OFFSET.size * len(records)
    offsets = []
    cursor = base
    for p in payloads:
        offsets.append(cursor)
        cursor += len(p)
    blob = _HEADER.pack(MAGIC, FORMAT_VERSION, dim, len(records), flags)
    blob += b"".join(_OFFSET.pack(o) for o in offsets)
    blob += b"".join(payloads)
    try:
        Path(path).write_bytes(blob)
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    return DumpSummary(path=str(path), record_count=len(records), dim=dim, bytes_written=len(blob))


@dataclass(frozen=True)
class DumpHeader:
    version: int
    dim: int
    record_count: int
    flags: int


def _read_header(blob: bytes) -> DumpHeader:
    if len(blob) < _HEADER.size:
        raise TruncatedFile("file shorter than the 24-byte header")
    magic, version, dim, count, flags = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise BadMagic(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise UnsupportedVersion(version)
    return DumpHeader(version=version, dim=dim, record_count=count, flags=flags)


class DumpReader:
    """Lazy random access over an embedding dump.

    Records are parsed and CRC-checked on each access. Access uses pread so
    concurrent readers over disjoint records need no locking.
    """

    def __init__(self, path: str | Path):
        self.path = str(path)
        try:
            self._fd = os.open(self.path, os.O_RDONLY)
            self._size = os.fstat(self._fd).st_size
            head = os.pread(self._fd, _HEADER.size, 0)
        except OSError as exc:
            raise IoFailure(str(exc)) from exc
        self.header = _read_header(head)
        if self.header.flags & FLAG_ADAPTER_PARAMS:
            os.close(self._fd)
            raise ValueError("adapter-parameter dump: use load_adapter_params")
        table_len = _OFFSET.size * self.header.record_count
        table = self._pread(table_len, _HEADER.size)
        if len(table) != table_len:
            os.close(self._fd)
            raise TruncatedFile("offset table extends past end of file")
        self._offsets = [
            _OFFSET.unpack_from(table, i * _OFFSET.size)[0]
            for i in range(self.header.record_count)
        ]

    def _pread(self, length: int, offset: int) -> bytes:
        try:
            return os.pread(self._fd, length, offset)
        except OSError as exc:
            raise IoFailure(str(exc)) from exc

    def close(self) -> None:
        if self._fd is not None:
            os.close(self._fd)
            self._fd = None

    def __enter__(self) -> "DumpReader":
        return self

    def __exit__(self, *exc_info) -> None:
        self.close()

    def __len__(self) -> int:
        return self.header.record_count

    def _record_extent(self, index: int) -> tuple[int, int]:
        start = self._offsets[index]
        end = (
            self._offsets[index + 1]
            if index + 1 < len(self._offsets)
            else self._size
        )
        return start, end

    def __getitem__(self, index: int) -> SequenceEmbedding:
        if index < 0:
            index += len(self)
        if not 0 <= index < len(self):
            raise IndexError(index)
        start, end = self._record_extent(index)
        blob = self._pread(end - start, start)
        if len(blob) != end - start or end - start < _RECORD_PREFIX.size + _CRC.size:
            raise TruncatedFile(f"record {index} extends past end of file")
        body, stored = blob[: -_CRC.size], _CRC.unpack(blob[-_CRC.size :])[0]
        if zlib.crc32(body) & 0xFFFFFFFF != stored:
            raise ChecksumMismatch(index)
        seq_id, layer_id, n_tokens = _RECORD_PREFIX.unpack_from(body, 0)
        dim = self.header.dim
        if len(blob) != _record_length(n_tokens, dim):
            raise TruncatedFile(f"record {index} has inconsistent length")
        pos = _RECORD_PREFIX.size
        roles = np.frombuffer(body, dtype=np.uint8, count=n_tokens, offset=pos)
        pos += n_tokens
        pooled = np.frombuffer(body, dtype="<f4", count=dim, offset=pos)
        pos += 4 * dim
        tokens = np.frombuffer(body, dtype="<f4", count=n_tokens * dim, offset=pos)
        return SequenceEmbedding(
            seq_id=seq_id,
            layer_id=layer_id,
            pooled=pooled,
            tokens=tokens.reshape(n_tokens, dim),
            roles=roles,
        )

    def __iter__(self) -> Iterator[SequenceEmbedding]:
        for i in range(len(self)):
            yield self[i]


def read_dump(path: str | Path) -> DumpReader:
    return DumpReader(path)


def save_adapter_params(params: AdapterParams, path: str | Path) -> DumpSummary:
    """Persist adapter parameters as a single-record dump variant (f32)."""
    h, d = params.hidden_width, params.out_width
    body = (
        _RECORD_PREFIX.pack(0, 0, h)
        + _f32_bytes(params.ln_scale)
        + _f32_bytes(params.ln_shift)
        + _f32_bytes(params.proj_weight)
        + _f32_bytes(params.proj_bias)
    )
    record = body + _CRC.pack(zlib.crc32(body) & 0xFFFFFFFF)
    blob = _HEADER.pack(MAGIC, FORMAT_VERSION, d, 1, FLAG_ADAPTER_PARAMS)
    blob += _OFFSET.pack(_HEADER.size + _OFFSET.size)
    blob += record
    try:
        Path(path).write_bytes(blob)
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    return DumpSummary(path=str(path), record_count=1, dim=d, bytes_written=len(blob))


def _adapter_record_length(h: int, d: int) -> int:
    return _RECORD_PREFIX.size + 4 * (2 * h + h * d + d) + _CRC.size


def load_adapter_params(path: str | Path) -> AdapterParams:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    header = _read_header(blob)
    if not header.flags & FLAG_ADAPTER_PARAMS:
        raise ValueError("not an adapter-parameter dump")
    if header.record_count != 1:
        raise TruncatedFile("adapter dump must hold exactly one record")
    start = _OFFSET.unpack_from(blob, _HEADER.size)[0]
    record = blob[start:]
    if len(record) < _RECORD_PREFIX.size + _CRC.size:
        raise TruncatedFile("adapter record extends past end of file")
    body, stored = record[: -_CRC.size], _CRC.unpack(record[-_CRC.size :])[0]
    if zlib.crc32(body) & 0xFFFFFFFF != stored:
        raise ChecksumMismatch(0)
    _, _, h = _RECORD_PREFIX.unpack_from(body, 0)
    d = header.dim
    if len(record) != _adapter_record_length(h, d):
        raise TruncatedFile("adapter record has inconsistent length")
    pos = _RECORD_PREFIX.size
    ln_scale = np.frombuffer(body, dtype="<f4", count=h, offset=pos).astype(np.float64)
    pos += 4 * h
    ln_shift = np.frombuffer(body, dtype="<f4", count=h, offset=pos).astype(np.float64)
    pos += 4 * h
    weight = np.frombuffer(body, dtype="<f4", count=h * d, offset=pos).astype(np.float64)
    pos += 4 * h * d
    bias = np.frombuffer(body, dtype="<f4", count=d, offset=pos).astype(np.float64)
    return AdapterParams(
        ln_scale=ln_scale,
        ln_shift=ln_shift,
        proj_weight=weight.reshape(h, d),
        proj_bias=bias,
    )


@dataclass(frozen=True)
class Manifest:
    """Human-readable sidecar restating what the binary header promises."""

    source_model: str
    layer_ids: tuple[int, ...]
    dim: int
    record_count: int
    created_at: str
    format_version: int = FORMAT_VERSION


def build_manifest(
    records: Sequence[SequenceEmbedding],
    source_model: str,
    created_at: str | None = None,
) -> Manifest:
    if created_at is None:
        created_at = datetime.now(timezone.utc).isoformat()
    return Manifest(
        source_model=source_model,
        layer_ids=tuple(sorted({r.layer_id for r in records})),
        dim=records[0].dim if records else 0,
        record_count=len(records),
        created_at=created_at,
    )


def write_manifest(manifest: Manifest, path: str | Path) -> None:
    payload = {
        "source_model": manifest.source_model,
        "layer_ids": list(manifest.layer_ids),
        "dim": manifest.dim,
        "record_count": manifest.record_count,
        "created_at": manifest.created_at,
        "format_version": manifest.format_version,
    }
    Path(path).write_text(json.dumps(payload, indent=2) + "\n")


def read_manifest(path: str | Path) -> Manifest:
    payload = json.loads(Path(path).read_text())
    return Manifest(
        source_model=payload["source_model"],
        layer_ids=tuple(payload["layer_ids"]),
        dim=payload["dim"],
        record_count=payload["record_count"],
        created_at=payload["created_at"],
        format_version=payload["format_version"],
    )


@dataclass(frozen=True)
class Violation:
    scope: str  # "header" | "offsets" | "record" | "manifest"
    record_index: int | None
    message: str


@dataclass(frozen=True)
class ValidationReport:
    path: str
    violations: tuple[Violation, ...]

    @property
    def ok(self) -> bool:
        return not self.violations


def validate_dump(path: str | Path, manifest_path: str | Path | None = None) -> ValidationReport:
    """Structural audit of a dump file, optionally against its manifest.

    Collects every violation it can find instead of stopping at the first:
    header sanity, offset monotonicity and bounds, per-record CRC and
    geometry, role-byte ranges, pooling-role cardinality, pooled norms, and
    manifest consistency.
    """
    violations: list[Violation] = []

    def flag(scope: str, message: str, record_index: int | None = None) -> None:
        violations.append(Violation(scope=scope, record_index=record_index, message=message))

    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        return ValidationReport(path=str(path), violations=(Violation("header", None, str(exc)),))

    if len(blob) < _HEADER.size:
        flag("header", "file shorter than the 24-byte header")
        return ValidationReport(path=str(path), violations=tuple(violations))
    magic, version, dim, count, flags = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        flag("header", f"bad magic {magic!r}")
        return ValidationReport(path=str(path), violations=tuple(violations))
    if version != FORMAT_VERSION:
        flag("header", f"unsupported version {version}")
        return ValidationReport(path=str(path), violations=tuple(violations))

    adapter_variant = bool(flags & FLAG_ADAPTER_PARAMS)
    pooled_only = bool(flags & FLAG_POOLED_ONLY)

    table_end = _HEADER.size + _OFFSET.size * count
    if len(blob) < table_end:
        flag("offsets", "offset table extends past end of file")
        return ValidationReport(path=str(path), violations=tuple(violations))
    offsets = [_OFFSET.unpack_from(blob, _HEADER.size + i * _OFFSET.size)[0] for i in range(count)]
    if count and offsets[0] != table_end:
        flag("offsets", f"first record starts at {offsets[0]}, expected {table_end}")
    if any(b <= a for a, b in zip(offsets, offsets[1:])):
        flag("offsets", "offsets are not strictly increasing")
    if not count and len(blob) != table_end:
        flag("offsets", "empty dump carries trailing bytes")

    seen_layers: set[int] = set()
    for i in range(count):
        start = offsets[i]
        end = offsets[i + 1] if i + 1 < count else len(blob)
        if start >= len(blob) or end > len(blob) or end - start < _RECORD_PREFIX.size + _CRC.size:
            flag("record", f"record {i} extends past end of file", i)
            continue
        record = blob[start:end]
        body, stored = record[: -_CRC.size], _CRC.unpack(record[-_CRC.size :])[0]
        if zlib.crc32(body) & 0xFFFFFFFF != stored:
            flag("record", f"record {i}: CRC-32 mismatch", i)
            continue
        seq_id, layer_id, n_tokens = _RECORD_PREFIX.unpack_from(body, 0)
        if adapter_variant:
            if len(record) != _adapter_record_length(n_tokens, dim):
                flag("record", f"record {i}: adapter payload has wrong length", i)
            continue
        if len(record) != _record_length(n_tokens, dim):
            flag("record", f"record {i}: payload length inconsistent with n_tokens", i)
            continue
        seen_layers.add(layer_id)
        roles = np.frombuffer(body, dtype=np.uint8, count=n_tokens, offset=_RECORD_PREFIX.size)
        if roles.size and int(roles.max()) > int(max(TokenRole)):
            flag("record", f"record {i}: role byte outside the known range", i)
        pooling_count = int(np.count_nonzero(roles == TokenRole.POOLING))
        if not pooled_only and pooling_count != 1:
            flag("record", f"record {i}: expected exactly one pooling role, found {pooling_count}", i)
        pooled = np.frombuffer(
            body, dtype="<f4", count=dim, offset=_RECORD_PREFIX.size + n_tokens
        )
        norm = float(np.linalg.norm(pooled.astype(np.float64)))
        if abs(norm - 1.0) > POOLED_NORM_VALIDATION_TOL:
            flag("record", f"record {i}: pooled norm {norm:.6f} departs from 1", i)

    if count and offsets and max(offsets) < len(blob):
        last_start = offsets[-1]
        last_end = len(blob)
        # The geometry check above already sized the last record; here we only
        # confirm nothing dangles after it.
        if last_start < len(blob):
            record = blob[last_start:last_end]
            if len(record) >= _RECORD_PREFIX.size + _CRC.size:
                _, _, n_tokens = _RECORD_PREFIX.unpack_from(record, 0)
                expected = (
                    _adapter_record_length(n_tokens, dim)
                    if adapter_variant
                    else _record_length(n_tokens, dim)
                )
                if len(record) > expected:
                    flag("offsets", "trailing bytes after the last record")

    if manifest_path is not None:
        try:
            manifest = read_manifest(manifest_path)
        except (OSError, KeyError, ValueError) as exc:
            flag("manifest", f"unreadable manifest: {exc}")
        else:
            if manifest.format_version != version:
                flag("manifest", f"manifest version {manifest.format_version} != header {version}")
            if manifest.dim != dim:
                flag("manifest", f"manifest dim {manifest.dim} != header {dim}")
            if manifest.record_count != count:
                flag("manifest", f"manifest record_count {manifest.record_count} != header {count}")
            if not adapter_variant and set(manifest.layer_ids) != seen_layers:
                flag("manifest", "manifest layer_ids do not match the records")

    return ValidationReport(path=str(path), violations=tuple(violations))
