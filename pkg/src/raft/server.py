"""Evidence store and the threaded acquisition server.

Store layout, one directory per device acquisition:

    <root>/<case_id>/<session_id>/<device_id>/
        image.raw       appended chunk payloads, strictly in order
        manifest.tsv    one row per appended chunk with its verified digest
        metadata.txt    job-level record, written once at finalization
        transfer.log    timestamped chain-of-custody events
        job.txt         open-job parameters, used to resume interrupted work

A session directory without metadata.txt is an interrupted acquisition;
a later job for the same case and device resumes it when the declared
whole-image digest and chunk geometry match, otherwise the server refuses
rather than mixing two different source states in one image.

The server runtime is one thread per connection plus a single verify
worker per session, which is what lets chunk s+1 stream in while chunk s
is being hashed. Appends happen on the session thread before the
acknowledgement is written to the socket.
"""
from __future__ import annotations

import logging
import os
import queue
import secrets
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

from .config import ServerConfig, format_kv, read_kv_file
from .errors import (
    ConnectionLost,
    ImageLengthMismatch,
    OutOfOrderAppend,
    ProtocolViolation,
    RaftError,
    StoreUnwritable,
)
from .hashing import digest_bytes, digest_path
from .model import (
    ChunkManifest,
    DeviceDescriptor,
    DigestValue,
    EvidenceRecord,
    HashAlgorithm,
    Partition,
    Verdict,
    appended_prefix_count,
    chunk_length_at,
    format_timestamp,
    manifest_row,
    parse_manifest,
    parse_timestamp,
    utc_now,
    MANIFEST_HEADER,
)
from .protocol import (
    AwaitingAuth,
    CmdAppend,
    CmdFinalVerify,
    CmdOpenJob,
    CmdVerify,
    FailureReason,
    FinalVerifyDone,
    Finalizing,
    JobOpened,
    JobSpec,
    MsgReceived,
    PeerDisconnected,
    Receiving,
    ServerDone,
    ServerFailed,
    ServerParams,
    ServerState,
    VerifyDone,
    server_step,
)
from .transport import (
    Endpoint,
    FrameReader,
    is_fully_protected,
    send_message,
    stream_listen,
)
from . import wire
from .model import ChunkRecord, ChunkState

logger = logging.getLogger("raft.server")

IMAGE_NAME = "image.raw"
MANIFEST_NAME = "manifest.tsv"
METADATA_NAME = "metadata.txt"
LOG_NAME = "transfer.log"
JOB_NAME = "job.txt"


def new_session_id(opened_at) -> str:
    stamp = opened_at.strftime("%Y%m%dT%H%M%SZ")
    return f"{stamp}-{secrets.token_hex(4)}"


@dataclass(frozen=True)
class VerifyVerdict:
    ok: bool
    recomputed: DigestValue


@dataclass(frozen=True)
class OpenedJob:
    session: "StoreSession | None"
    resume_from: int
    digest_mismatch: bool = False


def _device_entries(device: DeviceDescriptor) -> dict[str, object]:
    entries: dict[str, object] = {
        "device_id": device.device_id,
        "device_label": device.label,
        "total_bytes": device.total_bytes,
        "partition_count": len(device.partitions),
    }
    for index, partition in enumerate(device.partitions):
        entries[f"partition_{index}"] = (
            f"{partition.offset} {partition.length} {partition.label}"
        )
    return entries


def _device_from_entries(entries: dict[str, str]) -> DeviceDescriptor:
    partitions = []
    for index in range(int(entries["partition_count"])):
        offset, length, label = entries[f"partition_{index}"].split(" ", 2)
        partitions.append(Partition(int(offset), int(length), label))
    return DeviceDescriptor(
        device_id=entries["device_id"],
        label=entries["device_label"],
        total_bytes=int(entries["total_bytes"]),
        partitions=tuple(partitions),
    )


class StoreSession:
    """One device acquisition inside the store, append-only."""

    def __init__(
        self,
        device_dir: Path,
        spec: JobSpec,
        session_id: str,
        opened_at,
        appended_count: int,
        release,
    ):
        self.device_dir = device_dir
        self.spec = spec
        self.session_id = session_id
        self.opened_at = opened_at
        self.appended_count = appended_count
        self._release = release
        self._log_lock = threading.Lock()
        self._closed = False
        self._image = open(device_dir / IMAGE_NAME, "ab")
        self._manifest = open(
            device_dir / MANIFEST_NAME, "a", encoding="utf-8", newline="\n"
        )

    @property
    def image_path(self) -> Path:
        return self.device_dir / IMAGE_NAME

    @property
    def whole_image_algorithm(self) -> HashAlgorithm:
        return self.spec.whole_image_digest.algorithm

    def log(self, event: str, **fields) -> None:
        parts = [
            f"{time.monotonic():.6f}",
            format_timestamp(utc_now()),
            event,
        ]
        parts.extend(f"{key}={value}" for key, value in fields.items())
        line = " ".join(parts) + "\n"
        with self._log_lock:
            with open(self.device_dir / LOG_NAME, "a", encoding="utf-8") as handle:
                handle.write(line)

    def verify_chunk(
        self, seq: int, payload: bytes, claimed: DigestValue
    ) -> VerifyVerdict:
        """Recompute the chunk digest; a mismatch is a verdict, not an error."""
        recomputed = digest_bytes(payload, claimed.algorithm)
        ok = recomputed == claimed
        self.log(
            "chunk_verified",
            seq=seq,
            ok=str(ok).lower(),
            algorithm=claimed.algorithm.value,
            digest=recomputed.hex,
        )
        return VerifyVerdict(ok=ok, recomputed=recomputed)

    def append_chunk(self, seq: int, payload: bytes, digest: DigestValue) -> None:
        if self._closed:
            raise StoreUnwritable("session is closed")
        if seq != self.appended_count:
            raise OutOfOrderAppend(
                f"chunk {seq} appended out of order, expected {self.appended_count}"
            )
        expected = chunk_length_at(self.spec.total_bytes, self.spec.chunk_size, seq)
        if len(payload) != expected:
            raise StoreUnwritable(
                f"chunk {seq} has {len(payload)} bytes, expected {expected}"
            )
        try:
            self._image.write(payload)
            self._image.flush()
            os.fsync(self._image.fileno())
            record = ChunkRecord(
                seq=seq,
                offset=seq * self.spec.chunk_size,
                length=len(payload),
                digest=digest,
                state=ChunkState.VERIFIED,
            )
            self._manifest.write(manifest_row(record))
            self._manifest.flush()
        except OSError as exc:
            raise StoreUnwritable(f"cannot append chunk {seq}: {exc}") from exc
        self.appended_count += 1
        self.log("chunk_appended", seq=seq, bytes=len(payload))

    def finalize(self) -> tuple[bool, DigestValue]:
        """Re-hash the recombined image, write metadata, return the verdict."""
        self.log("finalize_started")
        self._image.flush()
        actual = self.image_path.stat().st_size
        if actual != self.spec.total_bytes:
            raise ImageLengthMismatch(
                f"image holds {actual} bytes, device declared "
                f"{self.spec.total_bytes}"
            )
        recomputed = digest_path(self.image_path, self.whole_image_algorithm)
        verified = recomputed == self.spec.whole_image_digest
        finalized_at = utc_now()
        entries = _device_entries(self.spec.device)
        entries.update(
            {
                "case_id": self.spec.case_id,
                "session_id": self.session_id,
                "chunk_size": self.spec.chunk_size,
                "chunk_count": self.spec.chunk_count,
                "chunk_digest_algorithm": self.spec.chunk_digest_algorithm.value,
                "whole_image_algorithm": self.whole_image_algorithm.value,
                "whole_image_digest": self.spec.whole_image_digest.hex,
                "final_verdict": "verified" if verified else "failed",
                "opened_at": format_timestamp(self.opened_at),
                "finalized_at": format_timestamp(finalized_at),
            }
        )
        (self.device_dir / METADATA_NAME).write_text(
            format_kv(entries), encoding="utf-8"
        )
        self.log(
            "finalized",
            verdict="verified" if verified else "failed",
            digest=recomputed.hex,
        )
        return verified, recomputed

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        self._image.close()
        self._manifest.close()
        self.log("session_closed")
        self._release(self)


class EvidenceStore:
    """Root of the append-only acquisition store."""

    def __init__(self, root: Path):
        self.root = Path(root)
        self._lock = threading.Lock()
        self._active: set[tuple[str, str]] = set()

    def _release(self, session: StoreSession) -> None:
        key = (session.spec.case_id, session.spec.device.device_id)
        with self._lock:
            self._active.discard(key)

    def _incomplete_dirs(self, case_id: str, device_id: str) -> list[Path]:
        case_dir = self.root / case_id
        if not case_dir.is_dir():
            return []
        found = []
        for session_dir in sorted(case_dir.iterdir()):
            device_dir = session_dir / device_id
            if not (device_dir / JOB_NAME).is_file():
                continue
            if (device_dir / METADATA_NAME).is_file():
                continue
            found.append(device_dir)
        return found

    @staticmethod
    def _job_matches(entries: dict[str, str], spec: JobSpec) -> bool:
        return (
            entries.get("whole_image_digest")
            == spec.whole_image_digest.hex
            and entries.get("whole_image_algorithm")
            == spec.whole_image_digest.algorithm.value
            and entries.get("total_bytes") == str(spec.total_bytes)
            and entries.get("chunk_size") == str(spec.chunk_size)
            and entries.get("chunk_digest_algorithm")
            == spec.chunk_digest_algorithm.value
        )

    def _repair_partial(self, device_dir: Path, spec: JobSpec) -> int:
        """Trim torn tails so the image and manifest agree, return chunk count.

        An interrupted session can die between the image append and the
        manifest row (or mid-write). Recovery keeps the longest prefix both
        files agree on; the trimmed chunks are simply transferred again.
        """
        image_path = device_dir / IMAGE_NAME
        manifest_path = device_dir / MANIFEST_NAME
        image_length = image_path.stat().st_size if image_path.exists() else 0
        lines = []
        if manifest_path.exists():
            lines = manifest_path.read_text(encoding="utf-8").splitlines()
        rows = max(0, len(lines) - 1)
        if image_length >= spec.total_bytes:
            chunks_in_image = spec.chunk_count
        else:
            chunks_in_image = image_length // spec.chunk_size
        consistent = min(chunks_in_image, rows, spec.chunk_count)
        keep_bytes = (
            spec.total_bytes
            if consistent == spec.chunk_count
            else consistent * spec.chunk_size
        )
        if image_length != keep_bytes:
            with open(image_path, "r+b") as handle:
                handle.truncate(keep_bytes)
        if rows != consistent:
            text = "\n".join([MANIFEST_HEADER] + lines[1 : 1 + consistent]) + "\n"
            manifest_path.write_text(text, encoding="utf-8", newline="\n")
        return consistent

    def open_job(self, spec: JobSpec) -> OpenedJob:
        """Create a fresh session or resume an interrupted one."""
        key = (spec.case_id, spec.device.device_id)
        with self._lock:
            if key in self._active:
                raise StoreUnwritable(
                    f"device {spec.device.device_id} already has an active "
                    f"session in case {spec.case_id}"
                )
            self._active.add(key)
        try:
            return self._open_job_locked(spec)
        except BaseException:
            with self._lock:
                self._active.discard(key)
            raise

    def _open_job_locked(self, spec: JobSpec) -> OpenedJob:
        incomplete = self._incomplete_dirs(spec.case_id, spec.device.device_id)
        matching = []
        for device_dir in incomplete:
            try:
                entries = read_kv_file(device_dir / JOB_NAME)
            except (OSError, ValueError):
                continue
            if self._job_matches(entries, spec):
                matching.append((device_dir, entries))
        if incomplete and not matching:
            with self._lock:
                self._active.discard((spec.case_id, spec.device.device_id))
            return OpenedJob(session=None, resume_from=0, digest_mismatch=True)
        if matching:
            device_dir, entries = matching[-1]  # newest, session ids sort by time
            resume_from = self._repair_partial(device_dir, spec)
            session = StoreSession(
                device_dir=device_dir,
                spec=spec,
                session_id=entries["session_id"],
                opened_at=parse_timestamp(entries["opened_at"]),
                appended_count=resume_from,
                release=self._release,
            )
            session.log("session_resumed", resume_from=resume_from)
            return OpenedJob(session=session, resume_from=resume_from)
        opened_at = utc_now()
        session_id = new_session_id(opened_at)
        device_dir = self.root / spec.case_id / session_id / spec.device.device_id
        try:
            device_dir.mkdir(parents=True)
            entries = _device_entries(spec.device)
            entries.update(
                {
                    "case_id": spec.case_id,
                    "session_id": session_id,
                    "chunk_size": spec.chunk_size,
                    "chunk_count": spec.chunk_count,
                    "chunk_digest_algorithm": spec.chunk_digest_algorithm.value,
                    "whole_image_algorithm": (
                        spec.whole_image_digest.algorithm.value
                    ),
                    "whole_image_digest": spec.whole_image_digest.hex,
                    "opened_at": format_timestamp(opened_at),
                }
            )
            (device_dir / JOB_NAME).write_text(format_kv(entries), encoding="utf-8")
            (device_dir / IMAGE_NAME).touch()
            (device_dir / MANIFEST_NAME).write_text(
                MANIFEST_HEADER + "\n", encoding="utf-8", newline="\n"
            )
        except OSError as exc:
            raise StoreUnwritable(f"cannot create session dir: {exc}") from exc
        session = StoreSession(
            device_dir=device_dir,
            spec=spec,
            session_id=session_id,
            opened_at=opened_at,
            appended_count=0,
            release=self._release,
        )
        session.log("session_opened", case_id=spec.case_id)
        return OpenedJob(session=session, resume_from=0)


def read_evidence_record(device_dir: Path) -> EvidenceRecord:
    """Reconstruct the evidence record for a finalized session directory."""
    device_dir = Path(device_dir)
    meta = read_kv_file(device_dir / METADATA_NAME)
    device = _device_from_entries(meta)
    whole = DigestValue.from_hex(
        HashAlgorithm.parse(meta["whole_image_algorithm"]),
        meta["whole_image_digest"],
    )
    manifest: ChunkManifest = parse_manifest(
        (device_dir / MANIFEST_NAME).read_text(encoding="utf-8"),
        device_id=device.device_id,
        chunk_size=int(meta["chunk_size"]),
        whole_image_digest=whole,
    )
    verdict = Verdict.VERIFIED if meta["final_verdict"] == "verified" else Verdict.FAILED
    return EvidenceRecord(
        case_id=meta["case_id"],
        session_id=meta["session_id"],
        device=device,
        manifest=manifest,
        image_path=str(device_dir / IMAGE_NAME),
        final_verdict=verdict,
        opened_at=parse_timestamp(meta["opened_at"]),
        finalized_at=parse_timestamp(meta["finalized_at"]),
        metadata=dict(meta),
    )


# ---------------------------------------------------------------------------
# Server runtime


@dataclass(frozen=True)
class _WorkerFailed:
    detail: str


class _SessionRuntime:
    def __init__(self, store: EvidenceStore, config: ServerConfig, endpoint: Endpoint):
        self._store = store
        self._endpoint = endpoint
        self._events: queue.Queue = queue.Queue()
        self._params = ServerParams(
            auth_digest=config.passphrase_digest.encode("ascii"),
            server_nonce=secrets.token_bytes(16),
        )
        self._state: ServerState = AwaitingAuth()
        self._session: StoreSession | None = None
        self._digests: dict[int, DigestValue] = {}
        self._worker = ThreadPoolExecutor(max_workers=1)
        self._stop = threading.Event()
        self._done = threading.Event()

    def request_stop(self) -> None:
        self._stop.set()

    def join(self, timeout: float | None = None) -> None:
        self._done.wait(timeout)

    def run(self) -> None:
        reader_thread = threading.Thread(target=self._read_loop, daemon=True)
        reader_thread.start()
        try:
            self._loop()
        finally:
            self._worker.shutdown(wait=True)
            if self._session is not None:
                if isinstance(self._state, ServerFailed):
                    self._session.log(
                        "session_failed",
                        reason=self._state.reason.value,
                    )
                self._session.close()
            self._endpoint.close()
            self._done.set()

    def _read_loop(self) -> None:
        reader = FrameReader(self._endpoint)
        while True:
            try:
                message = reader.read_message()
            except (ConnectionLost, RaftError, OSError):
                self._events.put(PeerDisconnected())
                return
            if message is None:
                self._events.put(PeerDisconnected())
                return
            self._events.put(MsgReceived(message))

    def _quiescent(self) -> bool:
        """True when stopping now would not discard in-flight verification."""
        state = self._state
        if isinstance(state, Receiving):
            return (
                state.in_verify is None
                and not state.verify_queue
                and state.pending is None
            )
        if isinstance(state, Finalizing):
            return False
        return True

    def _abort(self, reason: str) -> None:
        logger.warning("session aborted: %s", reason)
        try:
            send_message(self._endpoint, wire.Abort(reason=reason))
        except (ConnectionLost, RaftError, OSError):
            pass
        self._state = ServerFailed(FailureReason.PROTOCOL, reason)

    def _loop(self) -> None:
        while True:
            try:
                event = self._events.get(timeout=0.05)
            except queue.Empty:
                if self._stop.is_set() and self._quiescent():
                    self._abort("server shutting down")
                    return
                continue
            if isinstance(event, _WorkerFailed):
                self._abort(f"store failure: {event.detail}")
                return
            if isinstance(event, VerifyDone) and event.ok:
                self._digests[event.seq] = event.recomputed
            try:
                state, messages, commands = server_step(
                    self._params, self._state, event
                )
            except ProtocolViolation as exc:
                self._abort(str(exc))
                return
            self._state = state
            try:
                for command in commands:
                    self._run_command(command)
            except RaftError as exc:
                self._abort(f"store failure: {exc}")
                return
            for message in messages:
                try:
                    send_message(self._endpoint, message)
                except (ConnectionLost, OSError):
                    self._state = ServerFailed(
                        FailureReason.DISCONNECTED, "send failed"
                    )
                    return
            if isinstance(self._state, (ServerDone, ServerFailed)):
                return
            if self._stop.is_set() and self._quiescent():
                self._abort("server shutting down")
                return

    def _run_command(self, command) -> None:
        if isinstance(command, CmdOpenJob):
            opened = self._store.open_job(command.spec)
            if opened.digest_mismatch:
                self._events.put(
                    JobOpened(session_id="", resume_from_seq=0, digest_mismatch=True)
                )
                return
            self._session = opened.session
            self._events.put(
                JobOpened(
                    session_id=opened.session.session_id,
                    resume_from_seq=opened.resume_from,
                )
            )
        elif isinstance(command, CmdVerify):
            session = self._session
            seq, payload, claimed = command.seq, command.payload, command.claimed

            def verify_job():
                try:
                    verdict = session.verify_chunk(seq, payload, claimed)
                except Exception as exc:
                    self._events.put(_WorkerFailed(str(exc)))
                    return
                self._events.put(
                    VerifyDone(seq=seq, ok=verdict.ok, recomputed=verdict.recomputed)
                )

            self._worker.submit(verify_job)
        elif isinstance(command, CmdAppend):
            digest = self._digests.pop(command.seq)
            self._session.append_chunk(command.seq, command.payload, digest)
        elif isinstance(command, CmdFinalVerify):
            session = self._session

            def finalize_job():
                try:
                    verified, recomputed = session.finalize()
                except Exception as exc:
                    self._events.put(_WorkerFailed(str(exc)))
                    return
                self._events.put(
                    FinalVerifyDone(ok=verified, recomputed=recomputed)
                )

            self._worker.submit(finalize_job)
        else:
            raise ProtocolViolation(f"unexpected command {command!r}")


class Server:
    """Accepts connections and runs one acquisition session per client."""

    def __init__(self, config: ServerConfig):
        self._config = config
        self._store = EvidenceStore(config.store_root)
        self._listener = None
        self._accept_thread: threading.Thread | None = None
        self._sessions: list[_SessionRuntime] = []
        self._lock = threading.Lock()
        self._stopping = False

    @property
    def store(self) -> EvidenceStore:
        return self._store

    @property
    def port(self) -> int:
        return self._listener.port

    def start(self) -> "Server":
        self._listener = stream_listen(self._config.bind, self._config.port)
        self._accept_thread = threading.Thread(target=self._accept_loop, daemon=True)
        self._accept_thread.start()
        logger.info("listening on %s:%d", self._config.bind, self.port)
        return self

    def _accept_loop(self) -> None:
        while True:
            endpoint = self._listener.accept()
            if endpoint is None:
                return
            if not is_fully_protected(endpoint) and not (
                self._config.insecure_transport_ok
            ):
                logger.warning("refused connection over unprotected transport")
                endpoint.close()
                continue
            runtime = _SessionRuntime(self._store, self._config, endpoint)
            with self._lock:
                if self._stopping:
                    endpoint.close()
                    return
                self._sessions.append(runtime)
            threading.Thread(target=runtime.run, daemon=True).start()

    def shutdown(self) -> None:
        """Stop accepting, let in-flight verification finish, close sessions."""
        with self._lock:
            self._stopping = True
            sessions = list(self._sessions)
        if self._listener is not None:
            self._listener.close()
        if self._accept_thread is not None:
            self._accept_thread.join(timeout=5)
        for session in sessions:
            session.request_stop()
        for session in sessions:
            session.join(timeout=30)

    def __enter__(self) -> "Server":
        return self

    def __exit__(self, *exc_info) -> None:
        self.shutdown()


def run_server(config: ServerConfig) -> Server:
    return Server(config).start()
