"""Deterministic virtual-time simulation of a verified transfer.

The simulator drives the real client and server state machines over a
modelled link: the uplink carries one chunk frame at a time and holds it
for a configured transfer time, the server verifies one chunk at a time
for a configured verify time, and control messages cost only latency.
Payloads are real bytes and digests are really computed, so an injected
corruption genuinely fails verification and exercises the NAK path, and
a dropped connection genuinely resumes from the appended prefix.

Time never touches the wall clock. Two runs with the same arguments
produce identical traces, which makes the pipeline's overlap and its
total time directly assertable in tests.
"""
from __future__ import annotations

import heapq
import itertools
import random
from dataclasses import dataclass, field

from . import protocol, wire
from .hashing import digest_bytes
from .model import DeviceDescriptor, HashAlgorithm, appended_prefix_count
from .protocol import (
    AwaitingAuth,
    ChunkReady,
    ClientDone,
    ClientFailed,
    ClientParams,
    CmdAppend,
    CmdFinalVerify,
    CmdOpenJob,
    CmdVerify,
    Connected,
    FinalVerifyDone,
    JobOpened,
    MsgReceived,
    OpenJob,
    PeerDisconnected,
    ServerDone,
    ServerFailed,
    ServerParams,
    Start,
    VerifyDone,
    client_step,
    server_step,
    transmit_intent,
)
from .transport import FaultPlan

_SIM_SECRET = b"simulation shared secret"


@dataclass(frozen=True)
class SimConfig:
    """Virtual durations, all in the same (arbitrary) time unit."""

    chunk_transfer_time: float
    verify_time: float
    latency: float = 0.0
    prehash_time: float = 0.0
    final_verify_time: float = 0.0
    append_time: float = 0.0


@dataclass(frozen=True)
class TraceEvent:
    time: float
    kind: str
    seq: int | None = None
    detail: str = ""


@dataclass(frozen=True)
class SessionRecord:
    started_at: float
    ended_at: float
    client_state: object
    server_state: object


@dataclass
class SimResult:
    trace: list[TraceEvent]
    client_state: object
    server_state: object
    nak_count: int
    corrupted_seqs: list[int]
    sessions: list[SessionRecord] = field(default_factory=list)
    total_time: float = 0.0
    transfer_verify_time: float = 0.0
    image: bytes = b""
    source_data: bytes = b""

    @property
    def session_count(self) -> int:
        return len(self.sessions)

    @property
    def verified(self) -> bool:
        return isinstance(self.server_state, ServerDone) and self.server_state.verdict

    def events(self, kind: str) -> list[TraceEvent]:
        return [event for event in self.trace if event.kind == kind]


class _Simulator:
    def __init__(
        self,
        data: bytes,
        chunk_size: int,
        config: SimConfig,
        fault_plan: FaultPlan,
        retry_limit: int,
        chunk_algorithm: HashAlgorithm,
        whole_algorithm: HashAlgorithm,
    ):
        self.data = data
        self.chunk_size = chunk_size
        self.config = config
        self.plan = fault_plan
        self.rng = random.Random(fault_plan.seed)
        self.chunk_algorithm = chunk_algorithm
        self.whole_algorithm = whole_algorithm
        self.device = DeviceDescriptor("sim-0", "simulated device", len(data))
        self.whole_digest = digest_bytes(data, whole_algorithm)
        self.retry_limit = retry_limit

        self.now = 0.0
        self.heap: list = []
        self.counter = itertools.count()
        self.trace: list[TraceEvent] = []
        self.store = bytearray()
        self.epoch = 0
        self.session_started_at = 0.0
        self.sessions: list[SessionRecord] = []
        self.session_closed = True
        self.drop_used = False
        self.forwarded_payload = 0
        self.nak_count = 0
        self.corrupted_seqs: list[int] = []

        self.client_state: object = Connected()
        self.server_state: object = AwaitingAuth()
        self.client_params: ClientParams | None = None
        self.server_params: ServerParams | None = None
        self.uplink_free = 0.0
        self.verifier_free = 0.0

    # -- scheduling ---------------------------------------------------------

    def schedule(self, when: float, fn) -> None:
        heapq.heappush(self.heap, (when, next(self.counter), fn))

    def mark(self, when: float, kind: str, seq: int | None = None, detail: str = ""):
        self.trace.append(TraceEvent(when, kind, seq, detail))

    def run(self) -> SimResult:
        self.start_session()
        budget = 1_000_000
        while self.heap:
            budget -= 1
            if budget <= 0:
                raise AssertionError("simulation did not settle")
            self.now, _, fn = heapq.heappop(self.heap)
            fn()
        if not self.session_closed:
            self.close_session()
        self.trace.sort(key=lambda event: event.time)
        sends = [e.time for e in self.trace if e.kind == "chunk_send_start"]
        verifies = [e.time for e in self.trace if e.kind == "verify_done"]
        span = (max(verifies) - min(sends)) if sends and verifies else 0.0
        return SimResult(
            trace=self.trace,
            client_state=self.client_state,
            server_state=self.server_state,
            nak_count=self.nak_count,
            corrupted_seqs=self.corrupted_seqs,
            sessions=self.sessions,
            total_time=self.now,
            transfer_verify_time=span,
            image=bytes(self.store),
        )

    # -- session lifecycle ---------------------------------------------------

    def start_session(self) -> None:
        self.epoch += 1
        epoch = self.epoch
        self.session_closed = False
        self.session_started_at = self.now
        number = len(self.sessions) + 1
        self.client_params = ClientParams(
            case_id="SIM-CASE",
            device=self.device,
            chunk_size=self.chunk_size,
            chunk_digest_algorithm=self.chunk_algorithm,
            whole_image_digest=self.whole_digest,
            auth_secret=_SIM_SECRET,
            client_nonce=f"client-{number}".encode(),
            retry_limit=self.retry_limit,
        )
        self.server_params = ServerParams(
            auth_digest=_SIM_SECRET,
            server_nonce=f"server-{number}".encode(),
        )
        self.client_state = Connected()
        self.server_state = AwaitingAuth()
        self.uplink_free = self.now
        self.verifier_free = self.now
        self.mark(self.now, "session_start", detail=str(number))
        if number == 1:
            self.mark(self.now, "prehash_start")
            done = self.now + self.config.prehash_time
            self.mark(done, "prehash_done")
            self.schedule(done, lambda: self.client_event(Start(), epoch))
        else:
            self.schedule(self.now, lambda: self.client_event(Start(), epoch))

    def close_session(self) -> None:
        if self.session_closed:
            return
        self.session_closed = True
        self.sessions.append(
            SessionRecord(
                started_at=self.session_started_at,
                ended_at=self.now,
                client_state=self.client_state,
                server_state=self.server_state,
            )
        )
        self.mark(self.now, "session_done", detail=str(len(self.sessions)))

    def check_terminal(self) -> None:
        client_done = isinstance(self.client_state, (ClientDone, ClientFailed))
        server_done = isinstance(self.server_state, (ServerDone, ServerFailed))
        if client_done and server_done:
            self.close_session()

    # -- client side ----------------------------------------------------------

    def chunk_payload(self, seq: int) -> bytes:
        start = seq * self.chunk_size
        return self.data[start : start + self.chunk_size]

    def client_event(self, event, epoch: int) -> None:
        if epoch != self.epoch:
            return
        if isinstance(self.client_state, (ClientDone, ClientFailed)):
            return
        self.client_state, messages = client_step(
            self.client_params, self.client_state, event
        )
        for message in messages:
            self.send_to_server(message, epoch)
        if isinstance(self.client_state, protocol.Authenticated):
            self.client_state, messages = client_step(
                self.client_params, self.client_state, OpenJob()
            )
            for message in messages:
                self.send_to_server(message, epoch)
        self.pump_client_sends(epoch)
        self.check_terminal()

    def pump_client_sends(self, epoch: int) -> None:
        while True:
            seq = transmit_intent(self.client_params, self.client_state)
            if seq is None:
                return
            payload = self.chunk_payload(seq)
            digest = digest_bytes(payload, self.chunk_algorithm)
            self.client_state, messages = client_step(
                self.client_params,
                self.client_state,
                ChunkReady(seq, payload, digest),
            )
            for message in messages:
                self.send_to_server(message, epoch)

    def send_to_server(self, message, epoch: int) -> None:
        if isinstance(message, wire.ChunkData):
            start = max(self.now, self.uplink_free)
            end = start + self.config.chunk_transfer_time
            self.uplink_free = end
            self.mark(start, "chunk_send_start", message.seq)
            self.mark(end, "chunk_send_done", message.seq)
            payload = message.payload
            if (
                self.plan.corrupt_chunk_probability > 0
                and payload
                and self.rng.random() < self.plan.corrupt_chunk_probability
            ):
                position = self.rng.randrange(len(payload))
                flipped = self.rng.randrange(1, 256)
                payload = (
                    payload[:position]
                    + bytes([payload[position] ^ flipped])
                    + payload[position + 1 :]
                )
                self.corrupted_seqs.append(message.seq)
                message = wire.ChunkData(seq=message.seq, payload=payload)
            budget = self.plan.drop_connection_after_bytes
            if (
                not self.drop_used
                and budget is not None
                and self.forwarded_payload + len(payload) > budget
            ):
                self.drop_used = True
                self.schedule(end, lambda: self.connection_lost(epoch))
                return
            self.forwarded_payload += len(payload)
            self.schedule(
                end + self.config.latency,
                lambda m=message: self.deliver_to_server(m, epoch),
            )
        else:
            start = max(self.now, self.uplink_free)
            self.schedule(
                start + self.config.latency,
                lambda m=message: self.deliver_to_server(m, epoch),
            )

    # -- server side ------------------------------------------------------------

    def deliver_to_server(self, message, epoch: int) -> None:
        if epoch != self.epoch:
            return
        if isinstance(message, wire.ChunkData):
            self.mark(self.now, "chunk_recv", message.seq)
        self.server_event(MsgReceived(message), epoch)

    def server_event(self, event, epoch: int) -> None:
        if epoch != self.epoch:
            return
        if isinstance(self.server_state, (ServerDone, ServerFailed)):
            return
        self.server_state, messages, commands = server_step(
            self.server_params, self.server_state, event
        )
        delay = 0.0
        for command in commands:
            delay += self.run_command(command, self.now + delay, epoch)
        for message in messages:
            sent_at = self.now + delay
            if isinstance(message, wire.Ack):
                self.mark(sent_at, "ack", message.seq)
            elif isinstance(message, wire.Nak):
                self.mark(sent_at, "nak", message.seq)
                self.nak_count += 1
            self.schedule(
                sent_at + self.config.latency,
                lambda m=message: self.deliver_to_client(m, epoch),
            )
        self.check_terminal()

    def run_command(self, command, at: float, epoch: int) -> float:
        if isinstance(command, CmdOpenJob):
            spec = command.spec
            resume = appended_prefix_count(
                spec.total_bytes, spec.chunk_size, len(self.store)
            )
            session_id = f"sim-session-{len(self.sessions) + 1}"
            self.schedule(
                at,
                lambda: self.server_event(
                    JobOpened(session_id=session_id, resume_from_seq=resume),
                    epoch,
                ),
            )
            return 0.0
        if isinstance(command, CmdVerify):
            start = max(at, self.verifier_free)
            done = start + self.config.verify_time
            self.verifier_free = done
            self.mark(start, "verify_start", command.seq)
            self.mark(done, "verify_done", command.seq)
            recomputed = digest_bytes(command.payload, command.claimed.algorithm)
            ok = recomputed == command.claimed
            self.schedule(
                done,
                lambda: self.server_event(
                    VerifyDone(seq=command.seq, ok=ok, recomputed=recomputed),
                    epoch,
                ),
            )
            return 0.0
        if isinstance(command, CmdAppend):
            duration = self.config.append_time
            self.mark(at, "append_start", command.seq)
            self.mark(at + duration, "append_done", command.seq)
            self.store += command.payload
            return duration
        if isinstance(command, CmdFinalVerify):
            start = max(at, self.verifier_free)
            done = start + self.config.final_verify_time
            self.verifier_free = done
            self.mark(start, "final_verify_start")
            self.mark(done, "final_verify_done")
            recomputed = digest_bytes(bytes(self.store), self.whole_algorithm)
            ok = recomputed == self.whole_digest
            self.schedule(
                done,
                lambda: self.server_event(
                    FinalVerifyDone(ok=ok, recomputed=recomputed), epoch
                ),
            )
            return 0.0
        raise AssertionError(f"unexpected command {command!r}")

    def deliver_to_client(self, message, epoch: int) -> None:
        if epoch != self.epoch:
            return
        self.client_event(MsgReceived(message), epoch)

    # -- faults -------------------------------------------------------------------

    def connection_lost(self, epoch: int) -> None:
        if epoch != self.epoch:
            return
        self.mark(self.now, "connection_lost")
        if not isinstance(self.server_state, (ServerDone, ServerFailed)):
            self.server_state, _, _ = server_step(
                self.server_params, self.server_state, PeerDisconnected()
            )
        if not isinstance(self.client_state, (ClientDone, ClientFailed)):
            self.client_state = ClientFailed(
                protocol.FailureReason.DISCONNECTED, "connection dropped"
            )
        self.close_session()
        self.schedule(self.now, self.start_session)


def run_simulation(
    total_bytes: int,
    chunk_size: int,
    config: SimConfig,
    fault_plan: FaultPlan | None = None,
    payload_seed: int = 7,
    retry_limit: int = 5,
    chunk_algorithm: HashAlgorithm = HashAlgorithm.SHA512,
    whole_algorithm: HashAlgorithm = HashAlgorithm.SHA256,
) -> SimResult:
    """Simulate one acquisition of a pseudo-random device of total_bytes."""
    data = random.Random(payload_seed).randbytes(total_bytes)
    simulator = _Simulator(
        data=data,
        chunk_size=chunk_size,
        config=config,
        fault_plan=fault_plan or FaultPlan(),
        retry_limit=retry_limit,
        chunk_algorithm=chunk_algorithm,
        whole_algorithm=whole_algorithm,
    )
    result = simulator.run()
    result.source_data = data
    return result
