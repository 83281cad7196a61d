"""Binary dump format: byte layout, integrity checks, side files."""

import struct

import numpy as np
import pytest

from latefuse import (
    DumpReader,
    SequenceEmbedding,
    build_manifest,
    init_adapter_params,
    load_adapter_params,
    read_dump,
    save_adapter_params,
    validate_dump,
    write_dump,
    write_manifest,
)
from latefuse.dumps import (
    FLAG_ADAPTER_PARAMS,
    FLAG_POOLED_ONLY,
    FLAG_PRE_NORMALIZED,
    FORMAT_VERSION,
    MAGIC,
)
from latefuse.errors import (
    BadMagic,
    ChecksumMismatch,
    HeterogeneousDim,
    IoFailure,
    TruncatedFile,
    UnsupportedVersion,
)


def make_records(rng, count, dim=12, layer_id=0):
    out = []
    for i in range(count):
        n = int(rng.integers(1, 9))
        pooled = rng.standard_normal(dim)
        pooled /= np.linalg.norm(pooled)
        roles = np.zeros(n, np.uint8)
        roles[-1] = 3  # pooling role on the final token
        out.append(
            SequenceEmbedding(
                seq_id=i, layer_id=layer_id,
                pooled=pooled.astype(np.float32),
                tokens=rng.standard_normal((n, dim)).astype(np.float32),
                roles=roles,
            )
        )
    return out


def assert_records_equal(a: SequenceEmbedding, b: SequenceEmbedding):
    assert a.seq_id == b.seq_id
    assert a.layer_id == b.layer_id
    assert a.pooled.tobytes() == b.pooled.tobytes()
    assert a.tokens.tobytes() == b.tokens.tobytes()
    assert a.roles.tobytes() == b.roles.tobytes()


class TestHeader:
    def test_empty_dump_is_exactly_one_header(self, tmp_path):
        path = tmp_path / "empty.bin"
        summary = write_dump([], path)
        blob = path.read_bytes()
        assert len(blob) == 24
        assert summary.bytes_written == 24
        magic, version, dim, count, flags = struct.unpack("<4sIIQI", blob)
        assert magic == MAGIC
        assert version == FORMAT_VERSION
        assert (dim, count, flags) == (0, 0, 0)
        with read_dump(path) as reader:
            assert len(reader) == 0

    def test_header_reflects_contents(self, tmp_path):
        rng = np.random.default_rng(0)
        records = make_records(rng, 3, dim=7)
        path = tmp_path / "d.bin"
        write_dump(records, path, flags=FLAG_PRE_NORMALIZED)
        magic, version, dim, count, flags = struct.unpack("<4sIIQI",
                                                          path.read_bytes()[:24])
        assert (dim, count) == (7, 3)
        assert flags & FLAG_PRE_NORMALIZED


class TestRoundTrip:
    def test_bitwise_round_trip(self, tmp_path):
        rng = np.random.default_rng(1)
        records = make_records(rng, 20)
        path = tmp_path / "d.bin"
        write_dump(records, path)
        loaded = list(read_dump(path))
        assert len(loaded) == 20
        for orig, back in zip(records, loaded):
            assert_records_equal(orig, back)

    def test_writes_are_byte_deterministic(self, tmp_path):
        rng = np.random.default_rng(2)
        records = make_records(rng, 5)
        a, b = tmp_path / "a.bin", tmp_path / "b.bin"
        write_dump(records, a)
        write_dump(records, b)
        assert a.read_bytes() == b.read_bytes()

    def test_random_access_and_negative_index(self, tmp_path):
        rng = np.random.default_rng(3)
        records = make_records(rng, 6)
        path = tmp_path / "d.bin"
        write_dump(records, path)
        with read_dump(path) as reader:
            assert_records_equal(reader[4], records[4])
            assert_records_equal(reader[-1], records[-1])
            with pytest.raises(IndexError):
                reader[6]

    def test_heterogeneous_dim_rejected(self, tmp_path):
        rng = np.random.default_rng(4)
        records = make_records(rng, 2, dim=8) + make_records(rng, 1, dim=9)
        with pytest.raises(HeterogeneousDim):
            write_dump(records, tmp_path / "d.bin")


class TestCorruptionDetection:
    def write_sample(self, tmp_path, count=5):
        rng = np.random.default_rng(5)
        records = make_records(rng, count)
        path = tmp_path / "d.bin"
        write_dump(records, path)
        return path

    def test_bad_magic(self, tmp_path):
        path = self.write_sample(tmp_path)
        blob = bytearray(path.read_bytes())
        blob[0] = ord(b"X")
        path.write_bytes(bytes(blob))
        with pytest.raises(BadMagic):
            read_dump(path)

    def test_unsupported_version(self, tmp_path):
        path = self.write_sample(tmp_path)
        blob = bytearray(path.read_bytes())
        struct.pack_into("<I", blob, 4, 99)
        path.write_bytes(bytes(blob))
        with pytest.raises(UnsupportedVersion) as err:
            read_dump(path)
        assert err.value.version == 99

    def test_tail_truncation_is_detected(self, tmp_path):
        # cutting into the last record breaks its checksum; cutting into the
        # offset table is a structural failure caught at open
        path = self.write_sample(tmp_path)
        blob = path.read_bytes()
        path.write_bytes(blob[: len(blob) - 3])
        with pytest.raises(ChecksumMismatch) as err:
            with read_dump(path) as reader:
                reader[len(reader) - 1]
        assert err.value.record_index == 4

        path.write_bytes(blob[:40])  # header plus part of the table
        with pytest.raises(TruncatedFile):
            read_dump(path)

    def test_header_shorter_than_fixed_size(self, tmp_path):
        path = tmp_path / "d.bin"
        path.write_bytes(b"SMRT\x01")
        with pytest.raises(TruncatedFile):
            read_dump(path)

    def test_payload_flip_names_the_record(self, tmp_path):
        path = self.write_sample(tmp_path, count=5)
        blob = bytearray(path.read_bytes())
        # flip a token byte near the end of record 2; only record 2 may fail
        offsets = [struct.unpack_from("<Q", blob, 24 + 8 * i)[0] for i in range(5)]
        target = offsets[3] - 4 - 2  # inside record 2's token floats
        blob[target] ^= 0xFF
        path.write_bytes(bytes(blob))
        with read_dump(path) as reader:
            for i in (0, 1, 3, 4):
                reader[i]
            with pytest.raises(ChecksumMismatch) as err:
                reader[2]
        assert err.value.record_index == 2

    def test_every_payload_byte_fault_is_caught(self, tmp_path):
        from latefuse.errors import DumpError

        rng = np.random.default_rng(6)
        records = make_records(rng, 3, dim=4)
        path = tmp_path / "d.bin"
        write_dump(records, path)
        pristine = path.read_bytes()
        payload_start = 24 + 8 * 3
        positions = payload_start + rng.choice(
            len(pristine) - payload_start, size=60, replace=False)
        for pos in positions:
            blob = bytearray(pristine)
            blob[pos] ^= 0x01
            path.write_bytes(bytes(blob))
            with pytest.raises(DumpError):
                with read_dump(path) as reader:
                    for i in range(len(reader)):
                        reader[i]


class TestAdapterPersistence:
    def test_round_trip_through_f32(self, tmp_path):
        params = init_adapter_params(16, 8, seed=7)
        path = tmp_path / "adapter.bin"
        save_adapter_params(params, path)
        back = load_adapter_params(path)
        # storage quantizes to f32, so the round trip is exact at f32
        for field in ("ln_scale", "ln_shift", "proj_weight", "proj_bias"):
            np.testing.assert_array_equal(
                getattr(back, field),
                np.asarray(getattr(params, field), np.float32).astype(np.float64),
            )
        assert back.ln_epsilon == params.ln_epsilon

    def test_flag_separates_the_two_payloads(self, tmp_path):
        params = init_adapter_params(6, 3, seed=8)
        apath = tmp_path / "adapter.bin"
        save_adapter_params(params, apath)
        header = struct.unpack("<4sIIQI", apath.read_bytes()[:24])
        assert header[4] & FLAG_ADAPTER_PARAMS
        with pytest.raises(ValueError):
            read_dump(apath)

        rng = np.random.default_rng(9)
        dpath = tmp_path / "records.bin"
        write_dump(make_records(rng, 2), dpath)
        with pytest.raises(ValueError):
            load_adapter_params(dpath)


class TestValidateDump:
    def test_clean_dump_passes(self, tmp_path):
        rng = np.random.default_rng(10)
        records = make_records(rng, 8)
        path = tmp_path / "d.bin"
        write_dump(records, path)
        report = validate_dump(path)
        assert report.ok
        assert report.violations == ()

    def test_manifest_agreement(self, tmp_path):
        rng = np.random.default_rng(11)
        records = make_records(rng, 4, layer_id=3)
        dpath, mpath = tmp_path / "d.bin", tmp_path / "m.json"
        write_dump(records, dpath)
        write_manifest(build_manifest(records, source_model="unit-test"), mpath)
        assert validate_dump(dpath, mpath).ok

    def test_manifest_mismatch_flagged(self, tmp_path):
        rng = np.random.default_rng(12)
        records = make_records(rng, 4)
        dpath, mpath = tmp_path / "d.bin", tmp_path / "m.json"
        write_dump(records, dpath)
        manifest = build_manifest(records[:2], source_model="unit-test")
        write_manifest(manifest, mpath)
        report = validate_dump(dpath, mpath)
        assert not report.ok
        assert any("record_count" in v.message for v in report.violations)

    def test_unnormalized_pooled_flagged(self, tmp_path):
        rng = np.random.default_rng(13)
        records = make_records(rng, 2, dim=6)
        path = tmp_path / "d.bin"
        write_dump(records, path)
        blob = bytearray(path.read_bytes())
        # rewrite record 0 with a scaled pooled vector and a matching CRC so
        # only the norm check can object
        import zlib

        prefix = struct.Struct("<QHI")
        rec = records[0]
        body = prefix.pack(rec.seq_id, rec.layer_id, rec.tokens.shape[0])
        body += rec.roles.tobytes()
        body += (rec.pooled * 3.0).astype(np.float32).tobytes()
        body += rec.tokens.tobytes()
        body += struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)
        offset0 = struct.unpack_from("<Q", blob, 24)[0]
        offset1 = struct.unpack_from("<Q", blob, 32)[0]
        assert offset1 - offset0 == len(body)
        blob[offset0:offset1] = body
        path.write_bytes(bytes(blob))
        report = validate_dump(path)
        assert not report.ok
        assert any("pooled" in v.message for v in report.violations)

    def test_corrupt_record_is_reported_not_raised(self, tmp_path):
        rng = np.random.default_rng(14)
        records = make_records(rng, 3)
        path = tmp_path / "d.bin"
        write_dump(records, path)
        blob = bytearray(path.read_bytes())
        blob[-1] ^= 0xFF
        path.write_bytes(bytes(blob))
        report = validate_dump(path)
        assert not report.ok
        assert any(v.record_index == 2 for v in report.violations)

    def test_pooled_only_flag_permits_empty_token_lists(self, tmp_path):
        pooled = np.zeros(5, np.float32)
        pooled[0] = 1.0
        rec = SequenceEmbedding(
            seq_id=0, layer_id=0, pooled=pooled,
            tokens=np.zeros((0, 5), np.float32), roles=np.zeros(0, np.uint8),
        )
        path = tmp_path / "d.bin"
        write_dump([rec], path, flags=FLAG_POOLED_ONLY)
        assert validate_dump(path).ok


class TestManifest:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(15)
        records = make_records(rng, 3, layer_id=2)
        manifest = build_manifest(records, source_model="demo",
                                  created_at="2024-01-01T00:00:00+00:00")
        path = tmp_path / "m.json"
        write_manifest(manifest, path)
        from latefuse import read_manifest

        assert read_manifest(path) == manifest

    def test_layer_ids_sorted_unique(self):
        rng = np.random.default_rng(16)
        records = make_records(rng, 2, layer_id=5) + make_records(rng, 2, layer_id=1)
        manifest = build_manifest(records, source_model="demo")
        assert manifest.layer_ids == (1, 5)
