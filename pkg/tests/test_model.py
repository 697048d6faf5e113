"""Domain model: chunk planning, digest values, manifest round-trips."""
import pytest
from hypothesis import given, strategies as st

from raft.errors import (
    InvalidChunkSize,
    ManifestFormatError,
    UnknownAlgorithm,
    ZeroSizeSource,
)
from raft.model import (
    ChunkManifest,
    ChunkRecord,
    ChunkState,
    DeviceDescriptor,
    DigestValue,
    HashAlgorithm,
    Partition,
    appended_prefix_count,
    chunk_count_for,
    chunk_length_at,
    format_timestamp,
    parse_manifest,
    parse_timestamp,
    plan_chunks,
    serialize_manifest,
)

MD5_DOG = "9e107d9d372bb6826bd81d3542a419d6"


class TestHashAlgorithm:
    def test_digest_bits(self):
        expected = {
            HashAlgorithm.MD5: 128,
            HashAlgorithm.SHA1: 160,
            HashAlgorithm.SHA224: 224,
            HashAlgorithm.SHA256: 256,
            HashAlgorithm.SHA384: 384,
            HashAlgorithm.SHA512: 512,
        }
        for algorithm, bits in expected.items():
            assert algorithm.digest_bits == bits
            assert algorithm.digest_length == bits // 8

    def test_parse_is_case_and_dash_insensitive(self):
        assert HashAlgorithm.parse("SHA-512") is HashAlgorithm.SHA512
        assert HashAlgorithm.parse("sha512") is HashAlgorithm.SHA512
        assert HashAlgorithm.parse("Md5") is HashAlgorithm.MD5

    def test_parse_rejects_unknown(self):
        with pytest.raises(UnknownAlgorithm):
            HashAlgorithm.parse("whirlpool")

    def test_wire_id_round_trip(self):
        for algorithm in HashAlgorithm:
            assert HashAlgorithm.from_wire_id(algorithm.wire_id) is algorithm


class TestDigestValue:
    def test_hex_is_lowercase_canonical(self):
        value = DigestValue.from_hex(HashAlgorithm.MD5, MD5_DOG.upper())
        assert value.hex == MD5_DOG
        assert str(value) == MD5_DOG

    def test_parse_is_case_insensitive(self):
        lower = DigestValue.from_hex(HashAlgorithm.MD5, MD5_DOG)
        upper = DigestValue.from_hex(HashAlgorithm.MD5, MD5_DOG.upper())
        assert lower == upper

    def test_length_enforced(self):
        with pytest.raises(ValueError):
            DigestValue(HashAlgorithm.SHA256, b"\x00" * 16)


class TestDeviceDescriptor:
    def test_partitions_must_fit(self):
        with pytest.raises(ValueError):
            DeviceDescriptor(
                device_id="d1",
                label="disk",
                total_bytes=100,
                partitions=(Partition(0, 200, "p0"),),
            )

    def test_partitions_must_not_overlap(self):
        with pytest.raises(ValueError):
            DeviceDescriptor(
                device_id="d1",
                label="disk",
                total_bytes=100,
                partitions=(Partition(0, 60, "p0"), Partition(50, 40, "p1")),
            )

    def test_valid_partitions_accepted(self):
        descriptor = DeviceDescriptor(
            device_id="d1",
            label="disk",
            total_bytes=100,
            partitions=(Partition(0, 50, "p0"), Partition(50, 50, "p1")),
        )
        assert descriptor.total_bytes == 100


class TestPlanChunks:
    def test_hundred_mib_chunks(self):
        plan = plan_chunks(1_048_576_000, 104_857_600)
        assert len(plan) == 10
        assert all(length == 104_857_600 for _, _, length in plan)

    def test_remainder_chunk(self):
        plan = plan_chunks(105, 10)
        assert len(plan) == 11
        assert plan[-1] == (10, 100, 5)

    def test_exact_fit(self):
        assert plan_chunks(10, 10) == [(0, 0, 10)]

    def test_zero_size_rejected(self):
        with pytest.raises(ZeroSizeSource):
            plan_chunks(0, 10)

    def test_zero_chunk_size_rejected(self):
        with pytest.raises(InvalidChunkSize):
            plan_chunks(10, 0)

    @given(
        total=st.integers(min_value=1, max_value=20_000),
        chunk=st.integers(min_value=1, max_value=3_000),
    )
    def test_plan_covers_range_exactly(self, total, chunk):
        plan = plan_chunks(total, chunk)
        expected_offset = 0
        for seq, (got_seq, offset, length) in enumerate(plan):
            assert got_seq == seq
            assert offset == expected_offset
            assert length > 0
            expected_offset += length
        assert expected_offset == total
        assert len(plan) == chunk_count_for(total, chunk)

    @given(
        total=st.integers(min_value=1, max_value=20_000),
        chunk=st.integers(min_value=1, max_value=3_000),
    )
    def test_chunk_length_at_matches_plan(self, total, chunk):
        plan = plan_chunks(total, chunk)
        for seq, _, length in plan:
            assert chunk_length_at(total, chunk, seq) == length


class TestAppendedPrefixCount:
    def test_aligned_prefixes(self):
        assert appended_prefix_count(105, 10, 0) == 0
        assert appended_prefix_count(105, 10, 50) == 5
        assert appended_prefix_count(105, 10, 105) == 11

    def test_unaligned_rejected(self):
        with pytest.raises(ValueError):
            appended_prefix_count(105, 10, 51)
        with pytest.raises(ValueError):
            appended_prefix_count(105, 10, 104)


def _manifest_for(total: int, chunk_size: int) -> ChunkManifest:
    import hashlib

    chunks = []
    for seq, offset, length in plan_chunks(total, chunk_size):
        payload = bytes((seq + i) % 251 for i in range(length))
        digest = DigestValue(
            HashAlgorithm.SHA512, hashlib.sha512(payload).digest()
        )
        chunks.append(
            ChunkRecord(
                seq=seq,
                offset=offset,
                length=length,
                digest=digest,
                state=ChunkState.VERIFIED,
                attempts=1,
            )
        )
    whole = DigestValue(HashAlgorithm.SHA512, hashlib.sha512(b"whole").digest())
    return ChunkManifest(
        device_id="dev-1",
        chunk_size=chunk_size,
        whole_image_digest=whole,
        chunks=tuple(chunks),
    )


class TestManifestSerialization:
    def test_header_and_row_format(self):
        manifest = _manifest_for(25, 10)
        text = serialize_manifest(manifest)
        lines = text.splitlines()
        assert lines[0] == "manifest-version 1"
        parts = lines[1].split("\t")
        assert parts[0] == "0"
        assert parts[1] == "0"
        assert parts[2] == "10"
        assert parts[3] == "sha512"
        assert len(parts[4]) == 128
        assert text.endswith("\n")
        assert "\r" not in text

    def test_round_trip(self):
        manifest = _manifest_for(105, 10)
        text = serialize_manifest(manifest)
        parsed = parse_manifest(
            text,
            device_id=manifest.device_id,
            chunk_size=manifest.chunk_size,
            whole_image_digest=manifest.whole_image_digest,
        )
        assert parsed == manifest
        assert serialize_manifest(parsed) == text

    @given(
        total=st.integers(min_value=1, max_value=5000),
        chunk=st.integers(min_value=1, max_value=700),
    )
    def test_round_trip_property(self, total, chunk):
        manifest = _manifest_for(total, chunk)
        text = serialize_manifest(manifest)
        parsed = parse_manifest(
            text,
            device_id=manifest.device_id,
            chunk_size=manifest.chunk_size,
            whole_image_digest=manifest.whole_image_digest,
        )
        assert parsed == manifest

    def test_bad_header_rejected(self):
        with pytest.raises(ManifestFormatError):
            parse_manifest(
                "manifest-version 2\n",
                device_id="d",
                chunk_size=10,
                whole_image_digest=_manifest_for(10, 10).whole_image_digest,
            )

    def test_gap_rejected(self):
        manifest = _manifest_for(30, 10)
        lines = serialize_manifest(manifest).splitlines()
        del lines[2]
        with pytest.raises(ManifestFormatError):
            parse_manifest(
                "\n".join(lines) + "\n",
                device_id=manifest.device_id,
                chunk_size=manifest.chunk_size,
                whole_image_digest=manifest.whole_image_digest,
            )


class TestTimestamps:
    def test_trailing_z_format(self):
        from datetime import datetime, timezone

        moment = datetime(2024, 3, 1, 12, 30, 45, 123456, tzinfo=timezone.utc)
        text = format_timestamp(moment)
        assert text == "2024-03-01T12:30:45.123456Z"
        assert parse_timestamp(text) == moment

    def test_naive_rejected(self):
        from datetime import datetime

        with pytest.raises(ValueError):
            format_timestamp(datetime(2024, 3, 1))
