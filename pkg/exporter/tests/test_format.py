"""Byte-level checks of the dump writer, independent of any model."""

import struct
import zlib

import numpy as np
import pytest

from smrt_export.format import (
    FORMAT_VERSION,
    MAGIC,
    ROLE_POOLING,
    ROLE_TEXT,
    ExportRecord,
    write_manifest,
    write_records,
)

from latefuse import read_dump, validate_dump


def make_record(seq_id, layer_id, n_tokens=4, dim=8, seed=0):
    rng = np.random.default_rng(seed)
    tokens = rng.normal(size=(n_tokens, dim)).astype(np.float32)
    pool_row = tokens[-1].astype(np.float64)
    pooled = (pool_row / np.linalg.norm(pool_row)).astype(np.float32)
    roles = np.full(n_tokens, ROLE_TEXT, dtype=np.uint8)
    roles[-1] = ROLE_POOLING
    return ExportRecord(seq_id=seq_id, layer_id=layer_id, pooled=pooled,
                        tokens=tokens, roles=roles)


def test_header_layout(tmp_path):
    path = tmp_path / "one.bin"
    write_records([make_record(0, 0)], path)
    blob = path.read_bytes()
    magic, version, dim, count, flags = struct.unpack_from("<4sIIQI", blob, 0)
    assert magic == MAGIC
    assert version == FORMAT_VERSION
    assert dim == 8
    assert count == 1
    assert flags == 0


def test_crc_guards_every_payload_byte(tmp_path):
    path = tmp_path / "crc.bin"
    write_records([make_record(0, 0)], path)
    blob = path.read_bytes()
    offset_table_end = 24 + 8  # header + one u64 offset
    body = blob[offset_table_end:]
    stored_crc = struct.unpack_from("<I", body, len(body) - 4)[0]
    assert stored_crc == zlib.crc32(body[:-4])


def test_engine_reads_what_we_write(tmp_path):
    path = tmp_path / "mixed.bin"
    records = [make_record(i, layer, n_tokens=3 + i, seed=i)
               for i in range(3) for layer in (0, 2)]
    write_records(records, path)
    write_manifest(records, "test", str(path) + ".json")

    assert validate_dump(str(path), str(path) + ".json").ok
    with read_dump(str(path)) as reader:
        assert len(reader) == len(records)
        for got, want in zip(reader, records):
            assert got.seq_id == want.seq_id
            assert got.layer_id == want.layer_id
            np.testing.assert_array_equal(got.tokens, want.tokens)
            np.testing.assert_array_equal(got.pooled, want.pooled)
            assert got.roles.tolist() == want.roles.tolist()


def test_dim_mismatch_rejected(tmp_path):
    records = [make_record(0, 0, dim=8), make_record(1, 0, dim=16)]
    with pytest.raises(ValueError):
        write_records(records, tmp_path / "bad.bin")


def test_empty_write_is_a_valid_empty_dump(tmp_path):
    path = tmp_path / "empty.bin"
    assert write_records([], path) == 24  # header only
    with read_dump(str(path)) as reader:
        assert len(reader) == 0
    assert validate_dump(str(path)).ok


def test_record_shape_validation():
    good = make_record(0, 0)
    with pytest.raises(ValueError):
        ExportRecord(seq_id=0, layer_id=0, pooled=good.pooled,
                     tokens=good.tokens, roles=good.roles[:-1])
    with pytest.raises(ValueError):
        ExportRecord(seq_id=0, layer_id=0, pooled=good.pooled[:-1],
                     tokens=good.tokens, roles=good.roles)
