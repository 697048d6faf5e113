"""Configuration files and the shared "key: value" text format.

The same plain format serves client and server config files as well as
the metadata and job records the store writes: one `key: value` pair per
line, UTF-8, keys sorted when written by this package.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

from .model import DEFAULT_CHUNK_SIZE, HashAlgorithm
from .transport import DEFAULT_PORT, FaultPlan


def format_kv(entries: Mapping[str, object]) -> str:
    lines = [f"{key}: {entries[key]}" for key in sorted(entries)]
    return "\n".join(lines) + "\n"


def parse_kv_text(text: str) -> dict[str, str]:
    entries: dict[str, str] = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, separator, value = line.partition(":")
        if not separator or not key.strip():
            raise ValueError(f"line {number} is not a 'key: value' pair: {raw!r}")
        entries[key.strip()] = value.strip()
    return entries


def write_kv_file(path: Path, entries: Mapping[str, object]) -> None:
    Path(path).write_text(format_kv(entries), encoding="utf-8")


def read_kv_file(path: Path) -> dict[str, str]:
    return parse_kv_text(Path(path).read_text(encoding="utf-8"))


_TRUE = {"true", "1", "yes", "on"}
_FALSE = {"false", "0", "no", "off"}


def parse_bool(value: str, key: str) -> bool:
    lowered = value.lower()
    if lowered in _TRUE:
        return True
    if lowered in _FALSE:
        return False
    raise ValueError(f"{key} must be a boolean, got {value!r}")


def _parse_int(value: str, key: str) -> int:
    try:
        return int(value)
    except ValueError as exc:
        raise ValueError(f"{key} must be an integer, got {value!r}") from exc


def _parse_float(value: str, key: str) -> float:
    try:
        return float(value)
    except ValueError as exc:
        raise ValueError(f"{key} must be a number, got {value!r}") from exc


@dataclass(frozen=True)
class ClientConfig:
    server_host: str
    server_port: int
    passphrase_digest: str
    scan_root: Path
    case_id: str = "CASE-000"
    chunk_size: int = DEFAULT_CHUNK_SIZE
    chunk_digest_algorithm: HashAlgorithm = HashAlgorithm.SHA512
    whole_image_algorithm: HashAlgorithm = HashAlgorithm.SHA512
    insecure_transport_ok: bool = False
    fault_seed: int = 0
    fault_corrupt_chunk_probability: float = 0.0
    fault_drop_connection_after_bytes: int | None = None
    fault_latency_ms: float = 0.0
    fault_latency_jitter_ms: float = 0.0
    fault_bandwidth_limit_bits: int | None = None

    @property
    def fault_plan(self) -> FaultPlan | None:
        """The configured disturbance profile, or None when faults are off."""
        plan = FaultPlan(
            seed=self.fault_seed,
            corrupt_chunk_probability=self.fault_corrupt_chunk_probability,
            drop_connection_after_bytes=self.fault_drop_connection_after_bytes,
            latency_fixed_ms=self.fault_latency_ms,
            latency_jitter_ms=self.fault_latency_jitter_ms,
            bandwidth_limit_bits=self.fault_bandwidth_limit_bits,
        )
        if plan == FaultPlan(seed=self.fault_seed):
            return None
        return plan


@dataclass(frozen=True)
class ServerConfig:
    store_root: Path
    passphrase_digest: str
    bind: str = "127.0.0.1"
    port: int = DEFAULT_PORT
    insecure_transport_ok: bool = False


_CLIENT_REQUIRED = ("server_host", "server_port", "passphrase_digest", "scan_root")


def load_client_config(path: Path) -> ClientConfig:
    entries = read_kv_file(path)
    for key in _CLIENT_REQUIRED:
        if key not in entries:
            raise ValueError(f"client config is missing required key {key!r}")
    known = {
        "server_host",
        "server_port",
        "passphrase_digest",
        "scan_root",
        "case_id",
        "chunk_size",
        "chunk_digest_algorithm",
        "whole_image_algorithm",
        "insecure_transport_ok",
        "fault_seed",
        "fault_corrupt_chunk_probability",
        "fault_drop_connection_after_bytes",
        "fault_latency_ms",
        "fault_latency_jitter_ms",
        "fault_bandwidth_limit_bits",
    }
    unknown = set(entries) - known
    if unknown:
        raise ValueError(f"unknown client config keys: {sorted(unknown)}")
    kwargs: dict[str, object] = {
        "server_host": entries["server_host"],
        "server_port": _parse_int(entries["server_port"], "server_port"),
        "passphrase_digest": entries["passphrase_digest"],
        "scan_root": Path(entries["scan_root"]),
    }
    if "case_id" in entries:
        kwargs["case_id"] = entries["case_id"]
    if "chunk_size" in entries:
        kwargs["chunk_size"] = _parse_int(entries["chunk_size"], "chunk_size")
    if "chunk_digest_algorithm" in entries:
        kwargs["chunk_digest_algorithm"] = HashAlgorithm.parse(
            entries["chunk_digest_algorithm"]
        )
    if "whole_image_algorithm" in entries:
        kwargs["whole_image_algorithm"] = HashAlgorithm.parse(
            entries["whole_image_algorithm"]
        )
    if "insecure_transport_ok" in entries:
        kwargs["insecure_transport_ok"] = parse_bool(
            entries["insecure_transport_ok"], "insecure_transport_ok"
        )
    if "fault_seed" in entries:
        kwargs["fault_seed"] = _parse_int(entries["fault_seed"], "fault_seed")
    if "fault_corrupt_chunk_probability" in entries:
        kwargs["fault_corrupt_chunk_probability"] = _parse_float(
            entries["fault_corrupt_chunk_probability"],
            "fault_corrupt_chunk_probability",
        )
    if "fault_drop_connection_after_bytes" in entries:
        kwargs["fault_drop_connection_after_bytes"] = _parse_int(
            entries["fault_drop_connection_after_bytes"],
            "fault_drop_connection_after_bytes",
        )
    if "fault_latency_ms" in entries:
        kwargs["fault_latency_ms"] = _parse_float(
            entries["fault_latency_ms"], "fault_latency_ms"
        )
    if "fault_latency_jitter_ms" in entries:
        kwargs["fault_latency_jitter_ms"] = _parse_float(
            entries["fault_latency_jitter_ms"], "fault_latency_jitter_ms"
        )
    if "fault_bandwidth_limit_bits" in entries:
        kwargs["fault_bandwidth_limit_bits"] = _parse_int(
            entries["fault_bandwidth_limit_bits"], "fault_bandwidth_limit_bits"
        )
    return ClientConfig(**kwargs)


def load_server_config(path: Path) -> ServerConfig:
    entries = read_kv_file(path)
    known = {"store_root", "passphrase_digest", "bind", "port", "insecure_transport_ok"}
    unknown = set(entries) - known
    if unknown:
        raise ValueError(f"unknown server config keys: {sorted(unknown)}")
    for key in ("store_root", "passphrase_digest"):
        if key not in entries:
            raise ValueError(f"server config is missing required key {key!r}")
    kwargs: dict[str, object] = {
        "store_root": Path(entries["store_root"]),
        "passphrase_digest": entries["passphrase_digest"],
    }
    if "bind" in entries:
        kwargs["bind"] = entries["bind"]
    if "port" in entries:
        kwargs["port"] = _parse_int(entries["port"], "port")
    if "insecure_transport_ok" in entries:
        kwargs["insecure_transport_ok"] = parse_bool(
            entries["insecure_transport_ok"], "insecure_transport_ok"
        )
    return ServerConfig(**kwargs)
