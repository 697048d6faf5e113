"""Shared domain types: devices, digests, chunk plans, manifests, evidence records.

Pure data definitions with no I/O. Everything here is a value object;
the only mutable fields are ChunkRecord.state and ChunkRecord.attempts,
which the protocol layer owns.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone

from .errors import (
    InvalidChunkSize,
    ManifestFormatError,
    UnknownAlgorithm,
    ZeroSizeSource,
)

DEFAULT_CHUNK_SIZE = 100 * 1024 * 1024

_DIGEST_BITS = {
    "md5": 128,
    "sha1": 160,
    "sha224": 224,
    "sha256": 256,
    "sha384": 384,
    "sha512": 512,
}

_WIRE_IDS = {
    "md5": 1,
    "sha1": 2,
    "sha224": 3,
    "sha256": 4,
    "sha384": 5,
    "sha512": 6,
}


class HashAlgorithm(enum.Enum):
    MD5 = "md5"
    SHA1 = "sha1"
    SHA224 = "sha224"
    SHA256 = "sha256"
    SHA384 = "sha384"
    SHA512 = "sha512"

    @property
    def digest_bits(self) -> int:
        return _DIGEST_BITS[self.value]

    @property
    def digest_length(self) -> int:
        return self.digest_bits // 8

    @property
    def wire_id(self) -> int:
        return _WIRE_IDS[self.value]

    @classmethod
    def parse(cls, name: str) -> "HashAlgorithm":
        """Accepts any case and an optional dash, e.g. SHA-512 or sha512."""
        normalized = name.strip().lower().replace("-", "")
        for member in cls:
            if member.value == normalized:
                return member
        supported = ", ".join(m.value for m in cls)
        raise UnknownAlgorithm(f"unknown algorithm {name!r}; supported: {supported}")

    @classmethod
    def from_wire_id(cls, wire_id: int) -> "HashAlgorithm":
        for member in cls:
            if member.wire_id == wire_id:
                return member
        raise UnknownAlgorithm(f"unknown algorithm wire id {wire_id}")


@dataclass(frozen=True)
class DigestValue:
    """Algorithm-tagged digest; canonical text form is lowercase hex."""

    algorithm: HashAlgorithm
    digest: bytes

    def __post_init__(self):
        expected = self.algorithm.digest_length
        if len(self.digest) != expected:
            raise ValueError(
                f"{self.algorithm.value} digest must be {expected} bytes, "
                f"got {len(self.digest)}"
            )

    @property
    def hex(self) -> str:
        return self.digest.hex()

    @classmethod
    def from_hex(cls, algorithm: HashAlgorithm, text: str) -> "DigestValue":
        return cls(algorithm, bytes.fromhex(text.strip().lower()))

    def __str__(self) -> str:
        return self.hex


class SourceKind(enum.Enum):
    FILE_BACKED = "file_backed"
    BLOCK_DEVICE = "block_device"


@dataclass(frozen=True)
class Partition:
    offset: int
    length: int
    label: str


@dataclass(frozen=True)
class DeviceDescriptor:
    device_id: str
    label: str
    total_bytes: int
    partitions: tuple[Partition, ...] = ()
    source_kind: SourceKind = SourceKind.FILE_BACKED

    def __post_init__(self):
        if self.total_bytes < 0:
            raise ValueError("total_bytes must be >= 0")
        spans = sorted((p.offset, p.offset + p.length) for p in self.partitions)
        previous_end = 0
        for start, end in spans:
            if start < previous_end:
                raise ValueError("partitions overlap")
            if start < 0 or end > self.total_bytes:
                raise ValueError("partition outside device bounds")
            previous_end = end


class ChunkState(enum.Enum):
    PENDING = "pending"
    IN_FLIGHT = "in_flight"
    NAK_REQUEUED = "nak_requeued"
    VERIFIED = "verified"


@dataclass
class ChunkRecord:
    seq: int
    offset: int
    length: int
    digest: DigestValue | None = None
    state: ChunkState = field(default=ChunkState.PENDING, compare=False)
    attempts: int = field(default=0, compare=False)


@dataclass(frozen=True)
class ChunkManifest:
    device_id: str
    chunk_size: int
    whole_image_digest: DigestValue
    chunks: tuple[ChunkRecord, ...]

    @property
    def chunk_count(self) -> int:
        return len(self.chunks)

    @property
    def total_bytes(self) -> int:
        return sum(record.length for record in self.chunks)


class Verdict(enum.Enum):
    PENDING = "pending"
    VERIFIED = "verified"
    FAILED = "failed"


@dataclass
class EvidenceRecord:
    """Server-side stored artifact for one acquisition session."""

    case_id: str
    session_id: str
    device: DeviceDescriptor
    manifest: ChunkManifest
    image_path: str
    final_verdict: Verdict = Verdict.PENDING
    opened_at: datetime | None = None
    finalized_at: datetime | None = None
    metadata: dict[str, str] = field(default_factory=dict)


def plan_chunks(total_bytes: int, chunk_size: int) -> list[tuple[int, int, int]]:
    """Split [0, total_bytes) into (seq, offset, length) chunk ranges."""
    if chunk_size <= 0:
        raise InvalidChunkSize(f"chunk_size must be positive, got {chunk_size}")
    if total_bytes < 0:
        raise ValueError("total_bytes must be >= 0")
    if total_bytes == 0:
        raise ZeroSizeSource("a zero-byte device is not imageable")
    plan = []
    offset = 0
    seq = 0
    while offset < total_bytes:
        length = min(chunk_size, total_bytes - offset)
        plan.append((seq, offset, length))
        offset += length
        seq += 1
    return plan


def chunk_count_for(total_bytes: int, chunk_size: int) -> int:
    if chunk_size <= 0:
        raise InvalidChunkSize(f"chunk_size must be positive, got {chunk_size}")
    if total_bytes <= 0:
        raise ZeroSizeSource("a zero-byte device is not imageable")
    return -(-total_bytes // chunk_size)


def chunk_length_at(total_bytes: int, chunk_size: int, seq: int) -> int:
    count = chunk_count_for(total_bytes, chunk_size)
    if not 0 <= seq < count:
        raise ValueError(f"seq {seq} outside 0..{count - 1}")
    if seq < count - 1:
        return chunk_size
    return total_bytes - seq * chunk_size


def appended_prefix_count(total_bytes: int, chunk_size: int, image_length: int) -> int:
    """How many in-order chunks a partially written image of this length holds.

    Appends are whole chunks in seq order, so a valid partial image length is
    always an exact prefix sum of the chunk plan.
    """
    count = chunk_count_for(total_bytes, chunk_size)
    if image_length == total_bytes:
        return count
    if image_length % chunk_size != 0 or not 0 <= image_length < total_bytes:
        raise ValueError(
            f"image length {image_length} is not a chunk-aligned prefix "
            f"of a {total_bytes}-byte device"
        )
    return image_length // chunk_size


MANIFEST_HEADER = "manifest-version 1"


def serialize_manifest(manifest: ChunkManifest) -> str:
    """Canonical manifest text: header line, then one TSV row per chunk.

    Bit-exact across platforms: UTF-8, LF endings, rows ordered by seq.
    """
    lines = [MANIFEST_HEADER]
    for record in manifest.chunks:
        if record.digest is None:
            raise ManifestFormatError(f"chunk {record.seq} has no digest")
        lines.append(
            f"{record.seq}\t{record.offset}\t{record.length}"
            f"\t{record.digest.algorithm.value}\t{record.digest.hex}"
        )
    return "\n".join(lines) + "\n"


def manifest_row(record: ChunkRecord) -> str:
    if record.digest is None:
        raise ManifestFormatError(f"chunk {record.seq} has no digest")
    return (
        f"{record.seq}\t{record.offset}\t{record.length}"
        f"\t{record.digest.algorithm.value}\t{record.digest.hex}\n"
    )


def parse_manifest(
    text: str,
    *,
    device_id: str,
    chunk_size: int,
    whole_image_digest: DigestValue,
) -> ChunkManifest:
    """Parse manifest text back into a ChunkManifest.

    The manifest file itself carries only the chunk rows; device identity,
    chunk size, and the whole-image digest travel in the session metadata
    and are supplied by the caller.
    """
    lines = text.splitlines()
    if not lines or lines[0] != MANIFEST_HEADER:
        raise ManifestFormatError("missing or unsupported manifest header")
    chunks = []
    expected_seq = 0
    expected_offset = 0
    for line in lines[1:]:
        parts = line.split("\t")
        if len(parts) != 5:
            raise ManifestFormatError(f"malformed manifest row: {line!r}")
        seq, offset, length = int(parts[0]), int(parts[1]), int(parts[2])
        if seq != expected_seq or offset != expected_offset or length <= 0:
            raise ManifestFormatError(f"non-contiguous manifest row: {line!r}")
        algorithm = HashAlgorithm.parse(parts[3])
        digest = DigestValue.from_hex(algorithm, parts[4])
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
        expected_seq += 1
        expected_offset += length
    return ChunkManifest(
        device_id=device_id,
        chunk_size=chunk_size,
        whole_image_digest=whole_image_digest,
        chunks=tuple(chunks),
    )


def utc_now() -> datetime:
    return datetime.now(timezone.utc)


def format_timestamp(moment: datetime) -> str:
    """RFC-3339 UTC with a trailing Z."""
    if moment.tzinfo is None:
        raise ValueError("timestamps must be timezone-aware")
    return moment.astimezone(timezone.utc).isoformat().replace("+00:00", "Z")


def parse_timestamp(text: str) -> datetime:
    if not text.endswith("Z"):
        raise ValueError(f"timestamp missing trailing Z: {text!r}")
    return datetime.fromisoformat(text[:-1] + "+00:00")
