"""Client-side acquisition agent.

Owns the device inventory, the passphrase gate, the priority queue, and
the single background worker that drives acquisitions one device at a
time. The control API in `raft.control` is a thin HTTP shim over this
class; everything it exposes is callable directly for tests and for the
headless CLI path.

Evidence sources are only ever opened read-only. Enumeration itself
touches nothing but directory listings and stat calls.
"""
from __future__ import annotations

import enum
import hashlib
import hmac
import secrets
import threading
from dataclasses import dataclass, field, replace
from pathlib import Path

from .client import acquire_device
from .config import ClientConfig
from .errors import (
    AuthRequired,
    BadPassphrase,
    DeviceActive,
    DuplicatePriority,
    InsecureTransport,
    JobActive,
    JobNotActive,
    Locked,
    NoDevices,
    RaftError,
    ScanRootMissing,
    UnknownDevice,
    UnknownJob,
)
from .imaging import descriptor_for_file, is_readable, open_source
from .model import DeviceDescriptor, format_timestamp, utc_now
from .transport import is_fully_protected, stream_connect, wrap_with_faults

UNLOCK_ATTEMPT_LIMIT = 5

# Backdoor CMOS passwords that motherboard vendors bake into their BIOS,
# reproduced verbatim from published recovery references. Presented to the
# operator as candidates to try by hand; nothing here types them anywhere.
BIOS_BACKDOOR_PASSWORDS: dict[str, tuple[str, ...]] = {
    "AWARD": (
        "01322222", "589589", "589721", "595595", "598598",
        "ALFAROME", "ALLY", "ALLy", "aLLY", "aLLy", "aPAf", "award",
        "AWARD PW", "AWARD SW", "AWARD?SW", "AWARD_PW", "AWARD_SW",
        "AWKWARD", "awkward", "BIOSTAR", "CONCAT", "CONDO", "Condo",
        "condo", "d8on", "djonet", "HLT", "J256", "J262", "j262",
        "j322", "j332", "J64", "KDD", "LKWPETER", "Lkwpeter", "PINT",
        "pint", "SER", "SKY_FOX", "SYXZ", "syxz", "TTPTHA", "ZAAAADA",
        "ZAAADA", "ZBAAACA", "ZJAAADC",
    ),
    "AMI": (
        "AMI", "AAAMMMIII", "BIOS", "PASSWORD", "HEWITT RAND",
        "AMI?SW", "AMI_SW", "LKWPETER", "A.M.I.", "CONDO",
    ),
    "PHOENIX": (
        "BIOS", "CMOS", "phoenix", "PHOENIX", "Phoenix",
    ),
}


@dataclass(frozen=True)
class BiosLookup:
    manufacturer: str
    passwords: tuple[str, ...]
    advisory: str = ""


def lookup_bios_backdoor(manufacturer: str) -> BiosLookup:
    """Candidate backdoor passwords for a motherboard manufacturer."""
    key = manufacturer.strip().upper()
    passwords = BIOS_BACKDOOR_PASSWORDS.get(key)
    if passwords is None:
        return BiosLookup(
            manufacturer=manufacturer,
            passwords=(),
            advisory=(
                f"no backdoor passwords on record for {manufacturer!r}; "
                "known manufacturers: "
                + ", ".join(sorted(BIOS_BACKDOOR_PASSWORDS))
            ),
        )
    return BiosLookup(manufacturer=key, passwords=passwords)


class SelectionState(enum.Enum):
    UNSELECTED = "unselected"
    QUEUED = "queued"
    ACTIVE = "active"
    DONE = "done"
    FAILED = "failed"


@dataclass(frozen=True)
class DeviceEntry:
    descriptor: DeviceDescriptor
    path: str
    state: SelectionState = SelectionState.UNSELECTED
    priority: int | None = None
    detail: str = ""


@dataclass(frozen=True)
class AgentEvent:
    event_id: int
    at: str
    kind: str
    job_id: str = ""
    device_id: str = ""
    data: dict = field(default_factory=dict)


class JobState(enum.Enum):
    QUEUED = "queued"
    RUNNING = "running"
    VERIFIED = "verified"
    FAILED = "failed"


@dataclass(frozen=True)
class JobRecord:
    job_id: str
    device_id: str
    state: JobState
    session_id: str = ""
    chunks_sent: int = 0
    nak_count: int = 0
    resumed_from: int = 0
    detail: str = ""
    failure_reason: str = ""

    @property
    def terminal(self) -> bool:
        return self.state in (JobState.VERIFIED, JobState.FAILED)


def enumerate_devices(scan_root) -> list[DeviceEntry]:
    """One entry per regular file under the scan root, stable order."""
    root = Path(scan_root)
    if not root.is_dir():
        raise ScanRootMissing(f"scan root {root} is not a directory")
    entries = []
    for path in root.iterdir():
        if not path.is_file():
            continue
        try:
            descriptor = descriptor_for_file(path)
        except RaftError as exc:
            descriptor = DeviceDescriptor(
                device_id=path.name, label=path.name, total_bytes=0
            )
            entries.append(
                DeviceEntry(
                    descriptor=descriptor,
                    path=str(path),
                    state=SelectionState.FAILED,
                    detail=str(exc),
                )
            )
            continue
        if descriptor.total_bytes == 0:
            entries.append(
                DeviceEntry(
                    descriptor=descriptor,
                    path=str(path),
                    state=SelectionState.FAILED,
                    detail="zero-byte source is not imageable",
                )
            )
            continue
        if not is_readable(path):
            entries.append(
                DeviceEntry(
                    descriptor=descriptor,
                    path=str(path),
                    state=SelectionState.FAILED,
                    detail="source is not readable",
                )
            )
            continue
        entries.append(DeviceEntry(descriptor=descriptor, path=str(path)))
    entries.sort(key=lambda e: (e.descriptor.label, e.descriptor.device_id))
    return entries


def default_endpoint_factory(config: ClientConfig):
    """Connect to the acquisition server, applying the transport policy."""
    endpoint = stream_connect(config.server_host, config.server_port)
    if not is_fully_protected(endpoint) and not config.insecure_transport_ok:
        endpoint.close()
        raise InsecureTransport(
            "refusing to send evidence over an unprotected transport; "
            "set insecure_transport_ok to override for lab use"
        )
    plan = config.fault_plan
    if plan is not None:
        endpoint = wrap_with_faults(endpoint, plan)
    return endpoint


class Agent:
    """Inventory, unlock gate, priority queue, and the one-job-at-a-time worker."""

    def __init__(self, config: ClientConfig, endpoint_factory=None):
        self._config = config
        self._endpoint_factory = endpoint_factory or default_endpoint_factory
        self._lock = threading.RLock()
        self._events: list[AgentEvent] = []
        self._events_cond = threading.Condition(self._lock)
        self._entries: dict[str, DeviceEntry] = {}
        self._tokens: set[str] = set()
        self._unlock_failures = 0
        self._locked = False
        self._jobs: dict[str, JobRecord] = {}
        self._job_counter = 0
        self._worker: threading.Thread | None = None
        self._active_endpoint = None
        self._aborted_jobs: set[str] = set()
        self.rescan()

    # -- inventory ---------------------------------------------------------

    def rescan(self) -> list[DeviceEntry]:
        entries = enumerate_devices(self._config.scan_root)
        with self._lock:
            self._entries = {e.descriptor.device_id: e for e in entries}
            for entry in entries:
                self._emit_locked(
                    "device_listed",
                    device_id=entry.descriptor.device_id,
                    data={
                        "label": entry.descriptor.label,
                        "total_bytes": entry.descriptor.total_bytes,
                        "state": entry.state.value,
                    },
                )
        return entries

    def devices(self) -> list[DeviceEntry]:
        with self._lock:
            return sorted(
                self._entries.values(),
                key=lambda e: (e.descriptor.label, e.descriptor.device_id),
            )

    # -- passphrase gate ---------------------------------------------------

    def unlock(self, passphrase: str) -> str:
        with self._lock:
            if self._locked:
                raise Locked(
                    f"unlock disabled after {UNLOCK_ATTEMPT_LIMIT} failed "
                    "attempts; restart the agent"
                )
            digest = hashlib.sha256(passphrase.encode("utf-8")).hexdigest()
            if not hmac.compare_digest(digest, self._config.passphrase_digest):
                self._unlock_failures += 1
                if self._unlock_failures >= UNLOCK_ATTEMPT_LIMIT:
                    self._locked = True
                raise BadPassphrase("passphrase does not match")
            self._unlock_failures = 0
            token = secrets.token_hex(16)
            self._tokens.add(token)
            self._emit_locked("unlocked", data={})
            return token

    def check_token(self, token: str | None) -> None:
        with self._lock:
            if not token or token not in self._tokens:
                raise AuthRequired("missing or unknown session token")

    @property
    def locked(self) -> bool:
        with self._lock:
            return self._locked

    # -- queue management ----------------------------------------------------

    def set_priorities(self, priorities: dict[str, int]) -> list[DeviceEntry]:
        """Replace the queue: listed devices become queued, others unselected."""
        with self._lock:
            values = list(priorities.values())
            if len(set(values)) != len(values):
                raise DuplicatePriority(f"priorities must be unique: {values}")
            for device_id in priorities:
                entry = self._entries.get(device_id)
                if entry is None:
                    raise UnknownDevice(f"no device {device_id!r} in inventory")
                if entry.state is SelectionState.ACTIVE:
                    raise DeviceActive(f"device {device_id!r} is being acquired")
            for device_id, entry in self._entries.items():
                if entry.state is SelectionState.QUEUED:
                    self._entries[device_id] = replace(
                        entry, state=SelectionState.UNSELECTED, priority=None
                    )
            for device_id, priority in priorities.items():
                self._entries[device_id] = replace(
                    self._entries[device_id],
                    state=SelectionState.QUEUED,
                    priority=priority,
                )
        return self.devices()

    def queued_order(self) -> list[str]:
        """Device ids in the order the queue will drain (ascending priority)."""
        with self._lock:
            queued = [
                e for e in self._entries.values()
                if e.state is SelectionState.QUEUED
            ]
            queued.sort(key=lambda e: e.priority)
            return [e.descriptor.device_id for e in queued]

    # -- acquisition runs ----------------------------------------------------

    def acquire_all(self) -> list[str]:
        """Queue every usable device in enumeration order and run."""
        with self._lock:
            self._ensure_idle()
            usable = [
                e for e in self.devices() if e.state is not SelectionState.FAILED
            ]
            if not usable:
                raise NoDevices("inventory has no acquirable devices")
            plan = [e.descriptor.device_id for e in usable]
            for priority, device_id in enumerate(plan, start=1):
                self._entries[device_id] = replace(
                    self._entries[device_id],
                    state=SelectionState.QUEUED,
                    priority=priority,
                )
            return self._start_run(plan)

    def acquire_selected(self) -> list[str]:
        """Run the queued devices in ascending priority order."""
        with self._lock:
            self._ensure_idle()
            plan = self.queued_order()
            if not plan:
                raise NoDevices("no devices are queued")
            return self._start_run(plan)

    def _ensure_idle(self) -> None:
        if self._worker is not None and self._worker.is_alive():
            raise JobActive("an acquisition run is already in progress")

    def _start_run(self, device_ids: list[str]) -> list[str]:
        job_ids = []
        for device_id in device_ids:
            self._job_counter += 1
            job_id = f"job-{self._job_counter}"
            self._jobs[job_id] = JobRecord(
                job_id=job_id, device_id=device_id, state=JobState.QUEUED
            )
            job_ids.append(job_id)
        self._worker = threading.Thread(
            target=self._run_jobs, args=(job_ids,), daemon=True
        )
        self._worker.start()
        return job_ids

    def wait_idle(self, timeout: float | None = None) -> bool:
        worker = self._worker
        if worker is None:
            return True
        worker.join(timeout)
        return not worker.is_alive()

    # -- job registry --------------------------------------------------------

    def job(self, job_id: str) -> JobRecord:
        with self._lock:
            record = self._jobs.get(job_id)
            if record is None:
                raise UnknownJob(f"no job {job_id!r}")
            return record

    def jobs(self) -> list[JobRecord]:
        with self._lock:
            return list(self._jobs.values())

    def abort(self, job_id: str) -> JobRecord:
        """Cancel a queued job, or cut the connection of a running one."""
        with self._lock:
            record = self._jobs.get(job_id)
            if record is None:
                raise UnknownJob(f"no job {job_id!r}")
            if record.terminal:
                raise JobNotActive(f"job {job_id} already {record.state.value}")
            self._aborted_jobs.add(job_id)
            endpoint = self._active_endpoint
            if record.state is JobState.RUNNING and endpoint is not None:
                endpoint.close()
            return record

    # -- events --------------------------------------------------------------

    def events_since(self, last_event_id: int = 0) -> list[AgentEvent]:
        with self._lock:
            return [e for e in self._events if e.event_id > last_event_id]

    def wait_events(self, last_event_id: int, timeout: float) -> list[AgentEvent]:
        """Events strictly after last_event_id, blocking until some exist."""
        with self._events_cond:
            fresh = [e for e in self._events if e.event_id > last_event_id]
            if fresh:
                return fresh
            self._events_cond.wait(timeout)
            return [e for e in self._events if e.event_id > last_event_id]

    def _emit_locked(self, kind: str, job_id: str = "", device_id: str = "",
                     data: dict | None = None) -> None:
        event = AgentEvent(
            event_id=len(self._events) + 1,
            at=format_timestamp(utc_now()),
            kind=kind,
            job_id=job_id,
            device_id=device_id,
            data=data or {},
        )
        self._events.append(event)
        self._events_cond.notify_all()

    def _emit(self, kind: str, job_id: str = "", device_id: str = "",
              data: dict | None = None) -> None:
        with self._lock:
            self._emit_locked(kind, job_id=job_id, device_id=device_id, data=data)

    # -- worker ---------------------------------------------------------------

    def _set_entry_state(self, device_id: str, state: SelectionState,
                         detail: str = "") -> None:
        with self._lock:
            self._entries[device_id] = replace(
                self._entries[device_id], state=state, detail=detail
            )

    def _set_job(self, job_id: str, **changes) -> None:
        with self._lock:
            self._jobs[job_id] = replace(self._jobs[job_id], **changes)

    def _run_jobs(self, job_ids: list[str]) -> None:
        for job_id in job_ids:
            record = self.job(job_id)
            device_id = record.device_id
            with self._lock:
                if job_id in self._aborted_jobs:
                    self._set_job(job_id, state=JobState.FAILED,
                                  detail="aborted before start")
                    self._set_entry_state(device_id, SelectionState.UNSELECTED)
                    self._emit_locked("job_aborted", job_id=job_id,
                                      device_id=device_id)
                    continue
                entry = self._entries[device_id]
                self._entries[device_id] = replace(
                    entry, state=SelectionState.ACTIVE
                )
                self._jobs[job_id] = replace(
                    self._jobs[job_id], state=JobState.RUNNING
                )
                self._emit_locked("job_started", job_id=job_id,
                                  device_id=device_id,
                                  data={"label": entry.descriptor.label})
            try:
                outcome = self._acquire_one(job_id, entry)
            except RaftError as exc:
                self._finish_job(job_id, device_id, verified=False,
                                 detail=str(exc),
                                 failure_reason=type(exc).__name__)
                continue
            self._finish_job(
                job_id,
                device_id,
                verified=outcome.verified,
                session_id=outcome.session_id,
                chunks_sent=outcome.chunks_sent,
                nak_count=outcome.nak_count,
                resumed_from=outcome.resumed_from,
                detail=outcome.failure_detail,
                failure_reason=(
                    outcome.failure_reason.value
                    if outcome.failure_reason is not None
                    else ""
                ),
            )

    def _acquire_one(self, job_id: str, entry: DeviceEntry):
        endpoint = self._endpoint_factory(self._config)
        with self._lock:
            self._active_endpoint = endpoint
            # An abort issued while the factory was still connecting found
            # no endpoint to close; honour it now so the transfer dies at
            # the handshake instead of running to completion.
            if job_id in self._aborted_jobs:
                endpoint.close()
        device_id = entry.descriptor.device_id

        def forward(event) -> None:
            self._emit(event.kind, job_id=job_id, device_id=device_id,
                       data=event.data)

        try:
            with open_source(entry.descriptor, entry.path) as source:
                return acquire_device(
                    endpoint,
                    case_id=self._config.case_id,
                    descriptor=entry.descriptor,
                    source=source,
                    auth_secret=self._config.passphrase_digest.encode("ascii"),
                    chunk_size=self._config.chunk_size,
                    chunk_digest_algorithm=self._config.chunk_digest_algorithm,
                    whole_image_algorithm=self._config.whole_image_algorithm,
                    on_event=forward,
                )
        finally:
            with self._lock:
                self._active_endpoint = None
            endpoint.close()

    def _finish_job(self, job_id: str, device_id: str, *, verified: bool,
                    session_id: str = "", chunks_sent: int = 0,
                    nak_count: int = 0, resumed_from: int = 0,
                    detail: str = "", failure_reason: str = "") -> None:
        with self._lock:
            aborted = job_id in self._aborted_jobs
            if aborted and not verified:
                # The socket error produced by the forced close is noise;
                # the operator's abort is the cause worth recording.
                detail = "aborted by operator"
            self._set_job(
                job_id,
                state=JobState.VERIFIED if verified else JobState.FAILED,
                session_id=session_id,
                chunks_sent=chunks_sent,
                nak_count=nak_count,
                resumed_from=resumed_from,
                detail=detail,
                failure_reason="" if verified else failure_reason,
            )
            self._set_entry_state(
                device_id,
                SelectionState.DONE if verified else SelectionState.FAILED,
                detail=detail,
            )
            self._emit_locked(
                "job_finished",
                job_id=job_id,
                device_id=device_id,
                data={
                    "verdict": "verified" if verified else "failed",
                    "detail": detail,
                },
            )
