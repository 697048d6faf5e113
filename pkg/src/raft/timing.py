"""Acquisition time estimation, hash benchmarking, overhead decomposition.

The estimator models a pipelined transfer: hashing of chunk s overlaps
the transmission of chunk s+1, so the hash cost disappears behind the
network except for the very last chunk. Total time is therefore the
transfer time of the whole image plus one trailing chunk verification:

    T = H/B + C/V

with H the image size in bits, B the upload bandwidth in bits/s, C the
chunk size in bits, and V the verification throughput in bits/s. The
base formula assumes no retransmissions; an optional expected-loss
multiplier is provided for lossy links as a rough planning aid.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path
from statistics import mean

from .errors import IncompleteTrace, IoError, NonPositiveInput
from .hashing import digest_path
from .model import HashAlgorithm

GIB = 1 << 30


@dataclass(frozen=True)
class TimingInputs:
    h_bits: float
    b_bits_per_s: float
    c_bits: float
    v_bits_per_s: float

    def __post_init__(self):
        for name, value in (
            ("h_bits", self.h_bits),
            ("b_bits_per_s", self.b_bits_per_s),
            ("c_bits", self.c_bits),
            ("v_bits_per_s", self.v_bits_per_s),
        ):
            if not value > 0:
                raise NonPositiveInput(
                    f"{name} must be strictly positive, got {value}"
                )


def estimate_total_time(
    inputs: TimingInputs,
    *,
    corrupt_probability: float = 0.0,
    retries: int = 0,
) -> float:
    """Estimated acquisition seconds: H/B + C/V.

    `corrupt_probability` and `retries` apply an expected-retransmission
    multiplier (1 + p * retries) on top of the base estimate. This is an
    extension for planning around lossy links, not part of the model the
    base formula comes from; leave both at zero for the exact formula.
    """
    if not 0.0 <= corrupt_probability <= 1.0:
        raise NonPositiveInput(
            f"corrupt_probability must be in [0, 1], got {corrupt_probability}"
        )
    if retries < 0:
        raise NonPositiveInput(f"retries must be >= 0, got {retries}")
    base = (
        inputs.h_bits / inputs.b_bits_per_s
        + inputs.c_bits / inputs.v_bits_per_s
    )
    return base * (1.0 + corrupt_probability * retries)


# ---------------------------------------------------------------------------
# Hash benchmarking


@dataclass(frozen=True)
class BenchEntry:
    algorithm: HashAlgorithm
    size_bytes: int
    seconds: float

    @property
    def per_gib_seconds(self) -> float:
        return self.seconds * (GIB / self.size_bytes)


@dataclass(frozen=True)
class BenchReport:
    entries: tuple[BenchEntry, ...]

    def entries_for(self, algorithm: HashAlgorithm) -> list[BenchEntry]:
        return [e for e in self.entries if e.algorithm is algorithm]

    def normalized(self, algorithm: HashAlgorithm) -> list[float]:
        return [e.per_gib_seconds for e in self.entries_for(algorithm)]

    def max_relative_deviation(self, algorithm: HashAlgorithm) -> float:
        """Largest |x - mean| / mean across the normalized times."""
        values = self.normalized(algorithm)
        if not values:
            raise IncompleteTrace(f"no bench entries for {algorithm.value}")
        center = mean(values)
        return max(abs(v - center) / center for v in values)

    def to_tsv(self) -> str:
        lines = ["algorithm\tsize_bytes\tseconds\tper_gib_seconds"]
        for e in self.entries:
            lines.append(
                f"{e.algorithm.value}\t{e.size_bytes}"
                f"\t{e.seconds:.6f}\t{e.per_gib_seconds:.6f}"
            )
        return "\n".join(lines) + "\n"


def make_zero_file(path, size_bytes: int) -> Path:
    """Create a sparse zero-filled fixture file of the requested size."""
    path = Path(path)
    try:
        with open(path, "wb") as handle:
            handle.truncate(size_bytes)
    except OSError as exc:
        raise IoError(f"cannot create bench fixture {path}: {exc}") from exc
    return path


def bench_hash(
    sizes: list[int],
    algorithms: list[HashAlgorithm],
    workdir,
    repeats: int = 2,
) -> BenchReport:
    """Hash zero-filled files of each size, best-of-N wall time per cell.

    Runs are sequential on purpose: concurrent hashing would contend for
    memory bandwidth and poison the comparison between algorithms.
    """
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    entries = []
    for size in sizes:
        path = make_zero_file(workdir / f"bench-{size}.bin", size)
        for algorithm in algorithms:
            best = None
            for _ in range(max(1, repeats)):
                start = time.perf_counter()
                digest_path(path, algorithm)
                elapsed = time.perf_counter() - start
                if best is None or elapsed < best:
                    best = elapsed
            entries.append(
                BenchEntry(algorithm=algorithm, size_bytes=size, seconds=best)
            )
    return BenchReport(entries=tuple(entries))


# ---------------------------------------------------------------------------
# Overhead decomposition


@dataclass(frozen=True)
class OverheadReport:
    total_seconds: float
    transfer_seconds: float
    final_hash_seconds: float
    recombination_seconds: float

    @property
    def overhead_seconds(self) -> float:
        return self.final_hash_seconds + self.recombination_seconds

    @property
    def overhead_percent(self) -> float:
        return 100.0 * self.overhead_seconds / self.total_seconds

    def percent_of_total(self, seconds: float) -> float:
        return 100.0 * seconds / self.total_seconds


def _spans(trace, start_kind: str, done_kind: str) -> list[tuple[float, float]]:
    starts = [e for e in trace if e.kind == start_kind]
    dones = [e for e in trace if e.kind == done_kind]
    if len(starts) != len(dones):
        raise IncompleteTrace(
            f"unbalanced {start_kind}/{done_kind}: "
            f"{len(starts)} vs {len(dones)}"
        )
    return [(s.time, d.time) for s, d in zip(starts, dones)]


def measure_overhead(trace) -> OverheadReport:
    """Attribute a traced run's wall time to its phases.

    Transfer is the summed chunk transmission time. The final hash is the
    whole-image re-verification at the end. Recombination is charged as
    the append of the last chunk only: every earlier append happened
    while later chunks were still in flight, so it cost no extra wall
    time. The pre-transfer whole-image hash also contributes to the gap
    between transfer time and total time; it is visible in the trace as
    the prehash span and is not counted as server-side overhead here.
    """
    if not trace:
        raise IncompleteTrace("empty trace")
    transfer_spans = _spans(trace, "chunk_send_start", "chunk_send_done")
    if not transfer_spans:
        raise IncompleteTrace("trace has no chunk transmissions")
    final_spans = _spans(trace, "final_verify_start", "final_verify_done")
    if not final_spans:
        raise IncompleteTrace("trace has no final verification")
    append_spans = _spans(trace, "append_start", "append_done")
    if not append_spans:
        raise IncompleteTrace("trace has no appends")

    times = [e.time for e in trace]
    total = max(times) - min(times)
    transfer = sum(done - start for start, done in transfer_spans)
    final_start, final_done = final_spans[-1]
    last_append_start, last_append_done = max(append_spans)
    return OverheadReport(
        total_seconds=total,
        transfer_seconds=transfer,
        final_hash_seconds=final_done - final_start,
        recombination_seconds=last_append_done - last_append_start,
    )
