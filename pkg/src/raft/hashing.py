"""Streaming digest engine: whole-stream digests, hash windows, avalanche diffs.

Mirrors the dcfldd workflow: digests are computed on the fly while bytes
are read, an optional hash window emits a digest every N bytes, and the
results can be rendered as a hash log.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from typing import BinaryIO, Iterable

from .errors import AlgorithmMismatch, IoError, SourceReadError
from .model import DigestValue, HashAlgorithm

# Read granularity only; results never depend on it (chunking invariance).
BUFFER_SIZE = 1 << 20

# Canonical algorithm ordering for multi-algorithm log output.
_ALGORITHM_ORDER = list(HashAlgorithm)


def _ordered(algorithms: Iterable[HashAlgorithm]) -> list[HashAlgorithm]:
    requested = set(algorithms)
    return [a for a in _ALGORITHM_ORDER if a in requested]


def digest_stream(source: BinaryIO, algorithm: HashAlgorithm) -> DigestValue:
    """Digest a readable byte stream to exhaustion."""
    context = hashlib.new(algorithm.value)
    consumed = 0
    while True:
        try:
            block = source.read(BUFFER_SIZE)
        except OSError as exc:
            raise SourceReadError(str(exc), bytes_consumed=consumed) from exc
        if not block:
            break
        context.update(block)
        consumed += len(block)
    return DigestValue(algorithm, context.digest())


def digest_bytes(data: bytes, algorithm: HashAlgorithm) -> DigestValue:
    context = hashlib.new(algorithm.value)
    context.update(data)
    return DigestValue(algorithm, context.digest())


def digest_path(path, algorithm: HashAlgorithm) -> DigestValue:
    with open(path, "rb") as handle:
        return digest_stream(handle, algorithm)


@dataclass(frozen=True)
class HashWindowConfig:
    """window_bytes == 0 means whole-stream digests only."""

    window_bytes: int
    algorithms: frozenset[HashAlgorithm]

    def __post_init__(self):
        if self.window_bytes < 0:
            raise ValueError("window_bytes must be >= 0")
        if not self.algorithms:
            raise ValueError("algorithms set must be non-empty")


@dataclass(frozen=True)
class HashLogEntry:
    """Digests of one hash window; index is None for the whole-stream entry."""

    index: int | None
    start: int
    end: int
    digests: tuple[tuple[HashAlgorithm, DigestValue], ...]

    def digest_for(self, algorithm: HashAlgorithm) -> DigestValue:
        for candidate, value in self.digests:
            if candidate is algorithm:
                return value
        raise KeyError(algorithm)


@dataclass(frozen=True)
class WindowedDigests:
    windows: tuple[HashLogEntry, ...]
    whole: HashLogEntry


def digest_windows(source: BinaryIO, config: HashWindowConfig) -> WindowedDigests:
    """Single pass over the source computing window and whole-stream digests.

    Every byte is read exactly once; window contexts roll over at each
    window boundary while the whole-stream contexts keep accumulating.
    """
    algorithms = _ordered(config.algorithms)
    whole_contexts = {a: hashlib.new(a.value) for a in algorithms}
    window_contexts = {a: hashlib.new(a.value) for a in algorithms}
    windows: list[HashLogEntry] = []
    window_start = 0
    position = 0

    def close_window(end: int):
        nonlocal window_start, window_contexts
        windows.append(
            HashLogEntry(
                index=len(windows),
                start=window_start,
                end=end,
                digests=tuple(
                    (a, DigestValue(a, window_contexts[a].digest())) for a in algorithms
                ),
            )
        )
        window_start = end
        window_contexts = {a: hashlib.new(a.value) for a in algorithms}

    while True:
        if config.window_bytes:
            room = config.window_bytes - (position - window_start)
            to_read = min(BUFFER_SIZE, room)
        else:
            to_read = BUFFER_SIZE
        try:
            block = source.read(to_read)
        except OSError as exc:
            raise SourceReadError(str(exc), bytes_consumed=position) from exc
        if not block:
            break
        for algorithm in algorithms:
            whole_contexts[algorithm].update(block)
            window_contexts[algorithm].update(block)
        position += len(block)
        if config.window_bytes and position - window_start == config.window_bytes:
            close_window(position)

    if config.window_bytes and position > window_start:
        close_window(position)

    whole = HashLogEntry(
        index=None,
        start=0,
        end=position,
        digests=tuple(
            (a, DigestValue(a, whole_contexts[a].digest())) for a in algorithms
        ),
    )
    return WindowedDigests(windows=tuple(windows), whole=whole)


def format_hash_log(result: WindowedDigests) -> str:
    """Render the dcfldd-style hash log.

    One `window <index> <start>-<end> <algorithm> <hex>` line per window and
    algorithm, then one `total <algorithm> <hex>` line per algorithm.
    """
    lines = []
    for entry in result.windows:
        for algorithm, value in entry.digests:
            lines.append(
                f"window {entry.index} {entry.start}-{entry.end} "
                f"{algorithm.value} {value.hex}"
            )
    for algorithm, value in result.whole.digests:
        lines.append(f"total {algorithm.value} {value.hex}")
    return "\n".join(lines) + "\n"


def hex_diff_percent(a: DigestValue, b: DigestValue) -> float:
    """Percentage of hex-character positions at which two digests differ.

    Rounded half-up to one decimal place.
    """
    if a.algorithm is not b.algorithm:
        raise AlgorithmMismatch(
            f"cannot compare {a.algorithm.value} with {b.algorithm.value}"
        )
    hex_a, hex_b = a.hex, b.hex
    differing = sum(1 for x, y in zip(hex_a, hex_b) if x != y)
    percent = Decimal(differing * 100) / Decimal(len(hex_a))
    return float(percent.quantize(Decimal("0.1"), rounding=ROUND_HALF_UP))


def make_zero_file(path, size_bytes: int) -> None:
    """Create a file of exactly size_bytes zero bytes (benchmark fixtures)."""
    if size_bytes < 0:
        raise ValueError("size_bytes must be >= 0")
    block = b"\x00" * min(BUFFER_SIZE, size_bytes) if size_bytes else b""
    try:
        with open(path, "wb") as handle:
            remaining = size_bytes
            while remaining > 0:
                chunk = block if remaining >= len(block) else b"\x00" * remaining
                handle.write(chunk)
                remaining -= len(chunk)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc
