"""Read-only evidence sources: whole-image prehash, chunk reads, local split mode.

The acquisition is two-pass: a prehash pass computes the whole-image digest
(the final verification reference), then the transfer pass re-reads the
device chunk by chunk, digesting each chunk during the same read.
No code path in this module can open a source writable.
"""
from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass
from pathlib import Path

from .errors import (
    IoError,
    LengthMismatch,
    NotFound,
    PermissionDenied,
    SourceReadError,
)
from .hashing import BUFFER_SIZE, HashWindowConfig, digest_windows, format_hash_log
from .model import DeviceDescriptor, DigestValue, HashAlgorithm, plan_chunks

SPLIT_FILE_DIGITS = 6
HASH_LOG_NAME = "hashlog.txt"


class ReadOnlySource:
    """A readable window over the evidence bytes; writing is unrepresentable.

    Reads are clamped to the descriptor's total_bytes, and reading past the
    end returns empty bytes rather than erroring.
    """

    def __init__(self, descriptor: DeviceDescriptor, handle):
        self.descriptor = descriptor
        self._handle = handle
        self._position = 0

    @property
    def total_bytes(self) -> int:
        return self.descriptor.total_bytes

    @property
    def position(self) -> int:
        return self._position

    def read(self, max_bytes: int) -> bytes:
        remaining = self.total_bytes - self._position
        if remaining <= 0 or max_bytes <= 0:
            return b""
        try:
            block = self._handle.read(min(max_bytes, remaining))
        except OSError as exc:
            raise SourceReadError(str(exc), bytes_consumed=self._position) from exc
        self._position += len(block)
        return block

    def seek(self, offset: int) -> None:
        if not 0 <= offset <= self.total_bytes:
            raise ValueError(f"offset {offset} outside [0, {self.total_bytes}]")
        self._handle.seek(offset)
        self._position = offset

    def close(self) -> None:
        self._handle.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc_info):
        self.close()


def open_source(descriptor: DeviceDescriptor, path) -> ReadOnlySource:
    """Open the descriptor's backing file read-only and check its length."""
    path = Path(path)
    try:
        actual = path.stat().st_size
    except FileNotFoundError as exc:
        raise NotFound(f"source {path} does not exist") from exc
    except PermissionError as exc:
        raise PermissionDenied(f"cannot stat {path}") from exc
    if actual != descriptor.total_bytes:
        raise LengthMismatch(
            f"descriptor claims {descriptor.total_bytes} bytes "
            f"but {path} holds {actual}"
        )
    try:
        handle = open(path, "rb")
    except FileNotFoundError as exc:
        raise NotFound(f"source {path} does not exist") from exc
    except PermissionError as exc:
        raise PermissionDenied(f"cannot open {path} for reading") from exc
    return ReadOnlySource(descriptor, handle)


def prehash_source(source: ReadOnlySource, algorithm: HashAlgorithm) -> DigestValue:
    """Whole-image digest; the source cursor is restored to 0 afterward."""
    source.seek(0)
    context = hashlib.new(algorithm.value)
    while True:
        block = source.read(BUFFER_SIZE)
        if not block:
            break
        context.update(block)
    source.seek(0)
    return DigestValue(algorithm, context.digest())


def read_chunk(
    source: ReadOnlySource,
    offset: int,
    length: int,
    digest_algorithm: HashAlgorithm,
) -> tuple[bytes, DigestValue]:
    """Read one chunk range, digesting it during the same pass."""
    if length <= 0 or offset < 0 or offset + length > source.total_bytes:
        raise ValueError(
            f"chunk [{offset}, {offset + length}) outside "
            f"[0, {source.total_bytes})"
        )
    source.seek(offset)
    context = hashlib.new(digest_algorithm.value)
    pieces = []
    consumed = 0
    while consumed < length:
        block = source.read(min(BUFFER_SIZE, length - consumed))
        if not block:
            raise SourceReadError(
                f"short read at offset {offset + consumed}",
                bytes_consumed=consumed,
            )
        pieces.append(block)
        context.update(block)
        consumed += len(block)
    return b"".join(pieces), DigestValue(digest_algorithm, context.digest())


@dataclass(frozen=True)
class SplitResult:
    chunk_paths: tuple[Path, ...]
    hash_log_path: Path


def split_to_files(
    source: ReadOnlySource,
    chunk_size: int,
    dest_dir,
    algorithms: frozenset[HashAlgorithm] = frozenset({HashAlgorithm.SHA512}),
) -> SplitResult:
    """Offline mode: write `chunk_<seq>` files plus a hash log.

    The hash window equals the chunk size, so each window entry in the log
    corresponds to one emitted chunk file.
    """
    dest = Path(dest_dir)
    try:
        dest.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create {dest}: {exc}") from exc

    plan = plan_chunks(source.total_bytes, chunk_size)
    source.seek(0)
    paths = []
    try:
        for seq, offset, length in plan:
            payload, _ = read_chunk(source, offset, length, HashAlgorithm.SHA512)
            path = dest / f"chunk_{seq:0{SPLIT_FILE_DIGITS}d}"
            path.write_bytes(payload)
            paths.append(path)
    except OSError as exc:
        raise IoError(f"cannot write chunk file: {exc}") from exc

    source.seek(0)
    windows = digest_windows(source, HashWindowConfig(chunk_size, algorithms))
    log_path = dest / HASH_LOG_NAME
    try:
        log_path.write_text(format_hash_log(windows), encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot write hash log: {exc}") from exc
    source.seek(0)
    return SplitResult(chunk_paths=tuple(paths), hash_log_path=log_path)


def descriptor_for_file(path, device_id: str | None = None) -> DeviceDescriptor:
    """Build a file-backed descriptor whose size is the file's length."""
    path = Path(path)
    try:
        size = path.stat().st_size
    except FileNotFoundError as exc:
        raise NotFound(f"source {path} does not exist") from exc
    return DeviceDescriptor(
        device_id=device_id or path.name,
        label=path.name,
        total_bytes=size,
    )


def is_readable(path) -> bool:
    return os.access(path, os.R_OK)
