"""Framed binary wire protocol: message types and the codec.

Frame layout (all integers big-endian):

    magic   4 bytes  52 41 46 54 ("RAFT")
    version 1 byte   0x01
    type    1 byte
    length  8 bytes  payload byte count
    payload <length> bytes

Strings are encoded as a 4-byte length prefix plus UTF-8 bytes; nonces,
proofs and digests as a 4-byte length prefix plus raw bytes. The exact
per-message payload layout is documented in docs/wire.md.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

from .errors import DecodeError, NeedMoreBytes, PayloadTooLarge
from .model import (
    DeviceDescriptor,
    DigestValue,
    HashAlgorithm,
    Partition,
    SourceKind,
)

MAGIC = b"RAFT"
PROTOCOL_VERSION = 1
MAX_PAYLOAD = 1 << 32

_HEADER = struct.Struct(">4sBBQ")
_U64 = struct.Struct(">Q")
_U32 = struct.Struct(">I")
_U16 = struct.Struct(">H")

TYPE_HELLO = 0x01
TYPE_AUTH = 0x02
TYPE_AUTH_RESULT = 0x03
TYPE_JOB_OPEN = 0x04
TYPE_JOB_ACCEPT = 0x05
TYPE_CHUNK_DATA = 0x06
TYPE_CHUNK_DIGEST = 0x07
TYPE_ACK = 0x08
TYPE_NAK = 0x09
TYPE_JOB_FINALIZE = 0x0A
TYPE_FINAL_RESULT = 0x0B
TYPE_ABORT = 0x0C

HEADER_SIZE = _HEADER.size

_SOURCE_KIND_IDS = {SourceKind.FILE_BACKED: 1, SourceKind.BLOCK_DEVICE: 2}
_SOURCE_KIND_BY_ID = {v: k for k, v in _SOURCE_KIND_IDS.items()}


@dataclass(frozen=True)
class Hello:
    """Sent by the client first; the server answers with its own nonce."""

    protocol_version: int
    nonce: bytes


@dataclass(frozen=True)
class Auth:
    passphrase_proof: bytes


@dataclass(frozen=True)
class AuthResult:
    ok: bool


@dataclass(frozen=True)
class JobOpen:
    case_id: str
    device: DeviceDescriptor
    chunk_size: int
    chunk_digest_algorithm: HashAlgorithm
    whole_image_digest: DigestValue


@dataclass(frozen=True)
class JobAccept:
    session_id: str
    resume_from_seq: int


@dataclass(frozen=True)
class ChunkData:
    seq: int
    payload: bytes


@dataclass(frozen=True)
class ChunkDigest:
    seq: int
    digest: DigestValue


@dataclass(frozen=True)
class Ack:
    seq: int


@dataclass(frozen=True)
class Nak:
    seq: int
    reason: str


@dataclass(frozen=True)
class JobFinalize:
    pass


@dataclass(frozen=True)
class FinalResult:
    verified: bool
    recomputed_digest: DigestValue


@dataclass(frozen=True)
class Abort:
    reason: str


WireMessage = (
    Hello
    | Auth
    | AuthResult
    | JobOpen
    | JobAccept
    | ChunkData
    | ChunkDigest
    | Ack
    | Nak
    | JobFinalize
    | FinalResult
    | Abort
)


def _pack_bytes(data: bytes) -> bytes:
    return _U32.pack(len(data)) + data


def _pack_str(text: str) -> bytes:
    return _pack_bytes(text.encode("utf-8"))


def _pack_digest(value: DigestValue) -> bytes:
    return bytes([value.algorithm.wire_id]) + _pack_bytes(value.digest)


def _pack_descriptor(device: DeviceDescriptor) -> bytes:
    parts = [
        _pack_str(device.device_id),
        _pack_str(device.label),
        _U64.pack(device.total_bytes),
        bytes([_SOURCE_KIND_IDS[device.source_kind]]),
        _U32.pack(len(device.partitions)),
    ]
    for partition in device.partitions:
        parts.append(_U64.pack(partition.offset))
        parts.append(_U64.pack(partition.length))
        parts.append(_pack_str(partition.label))
    return b"".join(parts)


class _Cursor:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, count: int) -> bytes:
        if self.offset + count > len(self.data):
            raise DecodeError("message payload truncated")
        block = self.data[self.offset : self.offset + count]
        self.offset += count
        return block

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return _U16.unpack(self.take(2))[0]

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]

    def u64(self) -> int:
        return _U64.unpack(self.take(8))[0]

    def blob(self) -> bytes:
        return self.take(self.u32())

    def text(self) -> str:
        try:
            return self.blob().decode("utf-8")
        except UnicodeDecodeError as exc:
            raise DecodeError("invalid UTF-8 in string field") from exc

    def digest(self) -> DigestValue:
        algorithm = HashAlgorithm.from_wire_id(self.u8())
        raw = self.blob()
        try:
            return DigestValue(algorithm, raw)
        except ValueError as exc:
            raise DecodeError(str(exc)) from exc

    def descriptor(self) -> DeviceDescriptor:
        device_id = self.text()
        label = self.text()
        total_bytes = self.u64()
        kind_id = self.u8()
        if kind_id not in _SOURCE_KIND_BY_ID:
            raise DecodeError(f"unknown source kind id {kind_id}")
        count = self.u32()
        partitions = []
        for _ in range(count):
            offset = self.u64()
            length = self.u64()
            partitions.append(Partition(offset, length, self.text()))
        try:
            return DeviceDescriptor(
                device_id=device_id,
                label=label,
                total_bytes=total_bytes,
                partitions=tuple(partitions),
                source_kind=_SOURCE_KIND_BY_ID[kind_id],
            )
        except ValueError as exc:
            raise DecodeError(str(exc)) from exc

    def finished(self) -> None:
        if self.offset != len(self.data):
            raise DecodeError(
                f"{len(self.data) - self.offset} trailing bytes in payload"
            )


def _encode_payload(message: WireMessage) -> tuple[int, bytes]:
    if isinstance(message, Hello):
        return TYPE_HELLO, _U16.pack(message.protocol_version) + _pack_bytes(
            message.nonce
        )
    if isinstance(message, Auth):
        return TYPE_AUTH, _pack_bytes(message.passphrase_proof)
    if isinstance(message, AuthResult):
        return TYPE_AUTH_RESULT, bytes([1 if message.ok else 0])
    if isinstance(message, JobOpen):
        return TYPE_JOB_OPEN, b"".join(
            [
                _pack_str(message.case_id),
                _pack_descriptor(message.device),
                _U64.pack(message.chunk_size),
                bytes([message.chunk_digest_algorithm.wire_id]),
                _pack_digest(message.whole_image_digest),
            ]
        )
    if isinstance(message, JobAccept):
        return TYPE_JOB_ACCEPT, _pack_str(message.session_id) + _U64.pack(
            message.resume_from_seq
        )
    if isinstance(message, ChunkData):
        return TYPE_CHUNK_DATA, _U64.pack(message.seq) + message.payload
    if isinstance(message, ChunkDigest):
        return TYPE_CHUNK_DIGEST, _U64.pack(message.seq) + _pack_digest(
            message.digest
        )
    if isinstance(message, Ack):
        return TYPE_ACK, _U64.pack(message.seq)
    if isinstance(message, Nak):
        return TYPE_NAK, _U64.pack(message.seq) + _pack_str(message.reason)
    if isinstance(message, JobFinalize):
        return TYPE_JOB_FINALIZE, b""
    if isinstance(message, FinalResult):
        return TYPE_FINAL_RESULT, bytes(
            [1 if message.verified else 0]
        ) + _pack_digest(message.recomputed_digest)
    if isinstance(message, Abort):
        return TYPE_ABORT, _pack_str(message.reason)
    raise TypeError(f"not a wire message: {message!r}")


def encode_frame(message: WireMessage) -> bytes:
    message_type, payload = _encode_payload(message)
    if len(payload) > MAX_PAYLOAD:
        raise PayloadTooLarge(f"payload of {len(payload)} bytes exceeds 2^32")
    return _HEADER.pack(MAGIC, PROTOCOL_VERSION, message_type, len(payload)) + payload


def _decode_payload(message_type: int, payload: bytes) -> WireMessage:
    cursor = _Cursor(payload)
    if message_type == TYPE_HELLO:
        message = Hello(protocol_version=cursor.u16(), nonce=cursor.blob())
    elif message_type == TYPE_AUTH:
        message = Auth(passphrase_proof=cursor.blob())
    elif message_type == TYPE_AUTH_RESULT:
        message = AuthResult(ok=cursor.u8() == 1)
    elif message_type == TYPE_JOB_OPEN:
        message = JobOpen(
            case_id=cursor.text(),
            device=cursor.descriptor(),
            chunk_size=cursor.u64(),
            chunk_digest_algorithm=HashAlgorithm.from_wire_id(cursor.u8()),
            whole_image_digest=cursor.digest(),
        )
    elif message_type == TYPE_JOB_ACCEPT:
        message = JobAccept(session_id=cursor.text(), resume_from_seq=cursor.u64())
    elif message_type == TYPE_CHUNK_DATA:
        seq = cursor.u64()
        message = ChunkData(seq=seq, payload=cursor.take(len(payload) - 8))
    elif message_type == TYPE_CHUNK_DIGEST:
        message = ChunkDigest(seq=cursor.u64(), digest=cursor.digest())
    elif message_type == TYPE_ACK:
        message = Ack(seq=cursor.u64())
    elif message_type == TYPE_NAK:
        message = Nak(seq=cursor.u64(), reason=cursor.text())
    elif message_type == TYPE_JOB_FINALIZE:
        message = JobFinalize()
    elif message_type == TYPE_FINAL_RESULT:
        message = FinalResult(verified=cursor.u8() == 1, recomputed_digest=cursor.digest())
    elif message_type == TYPE_ABORT:
        message = Abort(reason=cursor.text())
    else:
        raise DecodeError(f"unknown message type 0x{message_type:02x}")
    cursor.finished()
    return message


def decode_frame(buffer: bytes) -> tuple[WireMessage, int]:
    """Decode one frame from the start of buffer; returns (message, consumed).

    Raises NeedMoreBytes when the buffer holds only part of a frame.
    """
    if len(buffer) < HEADER_SIZE:
        raise NeedMoreBytes(f"need {HEADER_SIZE} header bytes, have {len(buffer)}")
    magic, version, message_type, length = _HEADER.unpack_from(buffer)
    if magic != MAGIC:
        raise DecodeError(f"bad frame magic {magic!r}")
    if version != PROTOCOL_VERSION:
        raise DecodeError(f"unsupported protocol version {version}")
    if length > MAX_PAYLOAD:
        raise PayloadTooLarge(f"frame announces {length}-byte payload")
    end = HEADER_SIZE + length
    if len(buffer) < end:
        raise NeedMoreBytes(f"need {end} bytes, have {len(buffer)}")
    message = _decode_payload(message_type, bytes(buffer[HEADER_SIZE:end]))
    return message, end


def peek_frame_size(buffer: bytes) -> int:
    """Total size of the frame at the start of buffer (header included)."""
    if len(buffer) < HEADER_SIZE:
        raise NeedMoreBytes(f"need {HEADER_SIZE} header bytes, have {len(buffer)}")
    magic, _, _, length = _HEADER.unpack_from(buffer)
    if magic != MAGIC:
        raise DecodeError(f"bad frame magic {magic!r}")
    if length > MAX_PAYLOAD:
        raise PayloadTooLarge(f"frame announces {length}-byte payload")
    return HEADER_SIZE + length


def frame_type(buffer: bytes) -> int:
    if len(buffer) < HEADER_SIZE:
        raise NeedMoreBytes(f"need {HEADER_SIZE} header bytes, have {len(buffer)}")
    return buffer[5]
