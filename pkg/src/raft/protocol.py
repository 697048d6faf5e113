"""Pure client and server protocol state machines.

Both machines are side-effect free: a step consumes one event and returns
the next state plus the wire messages to send (the server also returns
commands for the runtime to execute, such as "verify this chunk" or
"append this chunk"). The runtime must execute a step's commands before
sending that step's messages, which is what guarantees a chunk is durably
appended before its acknowledgement leaves the machine.

Keeping the machines pure makes every protocol scenario replayable in
tests and in the virtual-time simulator with no sockets or threads.
"""
from __future__ import annotations

import enum
import hashlib
import hmac
from dataclasses import dataclass, replace

from . import wire
from .errors import OutOfOrderChunk, ProtocolViolation
from .model import (
    DeviceDescriptor,
    DigestValue,
    HashAlgorithm,
    chunk_count_for,
    chunk_length_at,
)

RETRY_LIMIT = 5
WINDOW = 2


def auth_proof(secret: bytes, server_nonce: bytes) -> bytes:
    """Proof sent in AUTH: a digest over the shared secret and the nonce."""
    return hashlib.sha512(secret + server_nonce).digest()


class FailureReason(enum.Enum):
    AUTH_REFUSED = "auth_refused"
    RETRY_LIMIT = "retry_limit"
    PROTOCOL = "protocol"
    TIMEOUT = "timeout"
    PEER_ABORT = "peer_abort"
    FINAL_MISMATCH = "final_mismatch"
    DISCONNECTED = "disconnected"


# ---------------------------------------------------------------------------
# Events


@dataclass(frozen=True)
class Start:
    pass


@dataclass(frozen=True)
class OpenJob:
    pass


@dataclass(frozen=True)
class ChunkReady:
    seq: int
    payload: bytes
    digest: DigestValue


@dataclass(frozen=True)
class MsgReceived:
    message: wire.WireMessage


@dataclass(frozen=True)
class Timeout:
    pass


@dataclass(frozen=True)
class JobOpened:
    """Runtime reply to CmdOpenJob after the store created or resumed a session."""

    session_id: str
    resume_from_seq: int
    digest_mismatch: bool = False


@dataclass(frozen=True)
class VerifyDone:
    seq: int
    ok: bool
    recomputed: DigestValue


@dataclass(frozen=True)
class FinalVerifyDone:
    ok: bool
    recomputed: DigestValue


@dataclass(frozen=True)
class PeerDisconnected:
    pass


ClientEvent = Start | OpenJob | ChunkReady | MsgReceived | Timeout
ServerEvent = (
    MsgReceived
    | JobOpened
    | VerifyDone
    | FinalVerifyDone
    | PeerDisconnected
)


# ---------------------------------------------------------------------------
# Commands emitted by the server machine


@dataclass(frozen=True)
class JobSpec:
    case_id: str
    device: DeviceDescriptor
    chunk_size: int
    chunk_digest_algorithm: HashAlgorithm
    whole_image_digest: DigestValue

    @property
    def total_bytes(self) -> int:
        return self.device.total_bytes

    @property
    def chunk_count(self) -> int:
        return chunk_count_for(self.total_bytes, self.chunk_size)


@dataclass(frozen=True)
class CmdOpenJob:
    spec: JobSpec


@dataclass(frozen=True)
class CmdVerify:
    seq: int
    payload: bytes
    claimed: DigestValue


@dataclass(frozen=True)
class CmdAppend:
    seq: int
    payload: bytes


@dataclass(frozen=True)
class CmdFinalVerify:
    pass


Command = CmdOpenJob | CmdVerify | CmdAppend | CmdFinalVerify


# ---------------------------------------------------------------------------
# Client machine


@dataclass(frozen=True)
class ClientParams:
    case_id: str
    device: DeviceDescriptor
    chunk_size: int
    chunk_digest_algorithm: HashAlgorithm
    whole_image_digest: DigestValue
    auth_secret: bytes
    client_nonce: bytes
    protocol_version: int = wire.PROTOCOL_VERSION
    retry_limit: int = RETRY_LIMIT

    @property
    def chunk_count(self) -> int:
        return chunk_count_for(self.device.total_bytes, self.chunk_size)


@dataclass(frozen=True)
class Connected:
    phase: str = "start"  # start, hello_sent, auth_sent


@dataclass(frozen=True)
class Authenticated:
    pass


@dataclass(frozen=True)
class JobOpenSent:
    pass


@dataclass(frozen=True)
class Transferring:
    session_id: str
    next_seq: int
    retransmit_queue: tuple[int, ...] = ()
    outstanding: tuple[int, ...] = ()
    attempts: tuple[tuple[int, int], ...] = ()
    verified_count: int = 0


@dataclass(frozen=True)
class AwaitingFinal:
    session_id: str


@dataclass(frozen=True)
class ClientDone:
    session_id: str
    recomputed: DigestValue


@dataclass(frozen=True)
class ClientFailed:
    reason: FailureReason
    detail: str


ClientState = (
    Connected
    | Authenticated
    | JobOpenSent
    | Transferring
    | AwaitingFinal
    | ClientDone
    | ClientFailed
)


def _attempt_count(attempts: tuple[tuple[int, int], ...], seq: int) -> int:
    for recorded_seq, count in attempts:
        if recorded_seq == seq:
            return count
    return 0


def _bump_attempt(
    attempts: tuple[tuple[int, int], ...], seq: int
) -> tuple[tuple[int, int], ...]:
    for index, (recorded_seq, count) in enumerate(attempts):
        if recorded_seq == seq:
            return attempts[:index] + ((seq, count + 1),) + attempts[index + 1 :]
    return attempts + ((seq, 1),)


def _drop_attempt(
    attempts: tuple[tuple[int, int], ...], seq: int
) -> tuple[tuple[int, int], ...]:
    return tuple(item for item in attempts if item[0] != seq)


def transmit_intent(params: ClientParams, state: ClientState) -> int | None:
    """Sequence number the runtime should read and hand to the machine next.

    Returns None when the send window is full or nothing is left to send.
    Retransmissions take priority over fresh chunks.
    """
    if not isinstance(state, Transferring):
        return None
    if len(state.outstanding) >= WINDOW:
        return None
    if state.retransmit_queue:
        return state.retransmit_queue[0]
    if state.next_seq < params.chunk_count:
        return state.next_seq
    return None


def _client_finish_check(
    params: ClientParams, state: Transferring
) -> tuple[ClientState, tuple[wire.WireMessage, ...]]:
    if (
        state.verified_count == params.chunk_count
        and not state.outstanding
        and not state.retransmit_queue
    ):
        return AwaitingFinal(state.session_id), (wire.JobFinalize(),)
    return state, ()


def client_step(
    params: ClientParams, state: ClientState, event: ClientEvent
) -> tuple[ClientState, tuple[wire.WireMessage, ...]]:
    """Advance the client machine by one event.

    Raises ProtocolViolation on an event that is illegal in the current
    state; runtimes convert that into an ABORT and a failed session.
    """
    if not isinstance(state, (ClientDone, ClientFailed)):
        if isinstance(event, Timeout):
            return (
                ClientFailed(FailureReason.TIMEOUT, "timed out waiting for peer"),
                (wire.Abort(reason="timeout"),),
            )
        if isinstance(event, MsgReceived) and isinstance(event.message, wire.Abort):
            return (
                ClientFailed(FailureReason.PEER_ABORT, event.message.reason),
                (),
            )

    if isinstance(state, Connected):
        if state.phase == "start" and isinstance(event, Start):
            hello = wire.Hello(
                protocol_version=params.protocol_version,
                nonce=params.client_nonce,
            )
            return Connected(phase="hello_sent"), (hello,)
        if state.phase == "hello_sent" and isinstance(event, MsgReceived):
            message = event.message
            if isinstance(message, wire.Hello):
                if message.protocol_version != params.protocol_version:
                    raise ProtocolViolation(
                        f"server speaks version {message.protocol_version}, "
                        f"expected {params.protocol_version}"
                    )
                proof = auth_proof(params.auth_secret, message.nonce)
                return Connected(phase="auth_sent"), (
                    wire.Auth(passphrase_proof=proof),
                )
        if state.phase == "auth_sent" and isinstance(event, MsgReceived):
            message = event.message
            if isinstance(message, wire.AuthResult):
                if message.ok:
                    return Authenticated(), ()
                return (
                    ClientFailed(
                        FailureReason.AUTH_REFUSED, "server refused credentials"
                    ),
                    (),
                )
        raise ProtocolViolation(
            f"client cannot handle {type(event).__name__} in Connected/{state.phase}"
        )

    if isinstance(state, Authenticated):
        if isinstance(event, OpenJob):
            open_msg = wire.JobOpen(
                case_id=params.case_id,
                device=params.device,
                chunk_size=params.chunk_size,
                chunk_digest_algorithm=params.chunk_digest_algorithm,
                whole_image_digest=params.whole_image_digest,
            )
            return JobOpenSent(), (open_msg,)
        raise ProtocolViolation(
            f"client cannot handle {type(event).__name__} in Authenticated"
        )

    if isinstance(state, JobOpenSent):
        if isinstance(event, MsgReceived) and isinstance(
            event.message, wire.JobAccept
        ):
            accept = event.message
            if not 0 <= accept.resume_from_seq <= params.chunk_count:
                raise ProtocolViolation(
                    f"resume point {accept.resume_from_seq} outside "
                    f"0..{params.chunk_count}"
                )
            if accept.resume_from_seq == params.chunk_count:
                return AwaitingFinal(accept.session_id), (wire.JobFinalize(),)
            return (
                Transferring(
                    session_id=accept.session_id,
                    next_seq=accept.resume_from_seq,
                    verified_count=accept.resume_from_seq,
                ),
                (),
            )
        raise ProtocolViolation(
            f"client cannot handle {type(event).__name__} in JobOpenSent"
        )

    if isinstance(state, Transferring):
        if isinstance(event, ChunkReady):
            intent = transmit_intent(params, state)
            if event.seq != intent:
                raise ProtocolViolation(
                    f"runtime offered chunk {event.seq}, machine wanted {intent}"
                )
            if state.retransmit_queue and event.seq == state.retransmit_queue[0]:
                next_state = replace(
                    state,
                    retransmit_queue=state.retransmit_queue[1:],
                    outstanding=state.outstanding + (event.seq,),
                    attempts=_bump_attempt(state.attempts, event.seq),
                )
            else:
                next_state = replace(
                    state,
                    next_seq=event.seq + 1,
                    outstanding=state.outstanding + (event.seq,),
                    attempts=_bump_attempt(state.attempts, event.seq),
                )
            return next_state, (
                wire.ChunkData(seq=event.seq, payload=event.payload),
                wire.ChunkDigest(seq=event.seq, digest=event.digest),
            )
        if isinstance(event, MsgReceived):
            message = event.message
            if isinstance(message, wire.Ack):
                if message.seq not in state.outstanding:
                    raise ProtocolViolation(
                        f"ACK for chunk {message.seq} that is not outstanding"
                    )
                next_state = replace(
                    state,
                    outstanding=tuple(
                        seq for seq in state.outstanding if seq != message.seq
                    ),
                    attempts=_drop_attempt(state.attempts, message.seq),
                    verified_count=state.verified_count + 1,
                )
                return _client_finish_check(params, next_state)
            if isinstance(message, wire.Nak):
                if message.seq not in state.outstanding:
                    raise ProtocolViolation(
                        f"NAK for chunk {message.seq} that is not outstanding"
                    )
                tried = _attempt_count(state.attempts, message.seq)
                remaining = tuple(
                    seq for seq in state.outstanding if seq != message.seq
                )
                if tried >= params.retry_limit:
                    detail = (
                        f"chunk {message.seq} failed verification "
                        f"{tried} times: {message.reason}"
                    )
                    return (
                        ClientFailed(FailureReason.RETRY_LIMIT, detail),
                        (wire.Abort(reason=detail),),
                    )
                next_state = replace(
                    state,
                    outstanding=remaining,
                    retransmit_queue=(message.seq,) + state.retransmit_queue,
                )
                return next_state, ()
        raise ProtocolViolation(
            f"client cannot handle {type(event).__name__} in Transferring"
        )

    if isinstance(state, AwaitingFinal):
        if isinstance(event, MsgReceived) and isinstance(
            event.message, wire.FinalResult
        ):
            result = event.message
            if result.verified:
                return ClientDone(state.session_id, result.recomputed_digest), ()
            return (
                ClientFailed(
                    FailureReason.FINAL_MISMATCH,
                    "server recomputed a different whole-image digest",
                ),
                (),
            )
        raise ProtocolViolation(
            f"client cannot handle {type(event).__name__} in AwaitingFinal"
        )

    raise ProtocolViolation(
        f"client received {type(event).__name__} in terminal state "
        f"{type(state).__name__}"
    )


# ---------------------------------------------------------------------------
# Server machine


@dataclass(frozen=True)
class ServerParams:
    auth_digest: bytes
    server_nonce: bytes
    protocol_version: int = wire.PROTOCOL_VERSION


@dataclass(frozen=True)
class AwaitingAuth:
    phase: str = "start"  # start, hello_sent


@dataclass(frozen=True)
class AwaitingJob:
    pending: JobSpec | None = None


@dataclass(frozen=True)
class PendingChunk:
    seq: int
    payload: bytes


@dataclass(frozen=True)
class ChunkJob:
    seq: int
    payload: bytes
    claimed: DigestValue


@dataclass(frozen=True)
class Receiving:
    spec: JobSpec
    session_id: str
    appended_count: int
    next_fresh: int
    awaiting_retransmit: frozenset[int] = frozenset()
    pending: PendingChunk | None = None
    in_verify: ChunkJob | None = None
    verify_queue: tuple[ChunkJob, ...] = ()
    held: tuple[tuple[int, bytes], ...] = ()


@dataclass(frozen=True)
class Finalizing:
    spec: JobSpec
    session_id: str


@dataclass(frozen=True)
class ServerDone:
    session_id: str
    verdict: bool


@dataclass(frozen=True)
class ServerFailed:
    reason: FailureReason
    detail: str


ServerState = (
    AwaitingAuth | AwaitingJob | Receiving | Finalizing | ServerDone | ServerFailed
)

StepResult = tuple[
    "ServerState", tuple[wire.WireMessage, ...], tuple[Command, ...]
]


def _unappended_count(state: Receiving) -> int:
    return (
        (1 if state.pending else 0)
        + (1 if state.in_verify else 0)
        + len(state.verify_queue)
        + len(state.held)
    )


def _drain_appends(
    state: Receiving,
) -> tuple[Receiving, tuple[wire.WireMessage, ...], tuple[Command, ...]]:
    """Append and acknowledge every held chunk that is next in order."""
    held = dict(state.held)
    appended = state.appended_count
    messages: list[wire.WireMessage] = []
    commands: list[Command] = []
    while appended in held:
        commands.append(CmdAppend(seq=appended, payload=held.pop(appended)))
        messages.append(wire.Ack(seq=appended))
        appended += 1
    next_state = replace(
        state,
        appended_count=appended,
        held=tuple(sorted(held.items())),
    )
    return next_state, tuple(messages), tuple(commands)


def server_step(
    params: ServerParams, state: ServerState, event: ServerEvent
) -> StepResult:
    """Advance the server machine by one event.

    Returns (state, messages, commands). The runtime must execute the
    commands before sending the messages.
    """
    if not isinstance(state, (ServerDone, ServerFailed)):
        if isinstance(event, PeerDisconnected):
            return (
                ServerFailed(FailureReason.DISCONNECTED, "peer disconnected"),
                (),
                (),
            )
        if isinstance(event, MsgReceived) and isinstance(event.message, wire.Abort):
            return (
                ServerFailed(FailureReason.PEER_ABORT, event.message.reason),
                (),
                (),
            )

    if isinstance(state, AwaitingAuth):
        if state.phase == "start" and isinstance(event, MsgReceived):
            message = event.message
            if isinstance(message, wire.Hello):
                if message.protocol_version != params.protocol_version:
                    raise ProtocolViolation(
                        f"client speaks version {message.protocol_version}, "
                        f"expected {params.protocol_version}"
                    )
                reply = wire.Hello(
                    protocol_version=params.protocol_version,
                    nonce=params.server_nonce,
                )
                return AwaitingAuth(phase="hello_sent"), (reply,), ()
        if state.phase == "hello_sent" and isinstance(event, MsgReceived):
            message = event.message
            if isinstance(message, wire.Auth):
                expected = auth_proof(params.auth_digest, params.server_nonce)
                if hmac.compare_digest(message.passphrase_proof, expected):
                    return AwaitingJob(), (wire.AuthResult(ok=True),), ()
                return (
                    ServerFailed(FailureReason.AUTH_REFUSED, "bad credentials"),
                    (wire.AuthResult(ok=False),),
                    (),
                )
        raise ProtocolViolation(
            f"server cannot handle {type(event).__name__} in "
            f"AwaitingAuth/{state.phase}"
        )

    if isinstance(state, AwaitingJob):
        if state.pending is None and isinstance(event, MsgReceived):
            message = event.message
            if isinstance(message, wire.JobOpen):
                spec = JobSpec(
                    case_id=message.case_id,
                    device=message.device,
                    chunk_size=message.chunk_size,
                    chunk_digest_algorithm=message.chunk_digest_algorithm,
                    whole_image_digest=message.whole_image_digest,
                )
                return AwaitingJob(pending=spec), (), (CmdOpenJob(spec),)
        if state.pending is not None and isinstance(event, JobOpened):
            spec = state.pending
            if event.digest_mismatch:
                detail = (
                    "existing partial image for this device was built against "
                    "a different whole-image digest"
                )
                return (
                    ServerFailed(FailureReason.PROTOCOL, detail),
                    (wire.Abort(reason=detail),),
                    (),
                )
            accept = wire.JobAccept(
                session_id=event.session_id,
                resume_from_seq=event.resume_from_seq,
            )
            receiving = Receiving(
                spec=spec,
                session_id=event.session_id,
                appended_count=event.resume_from_seq,
                next_fresh=event.resume_from_seq,
            )
            return receiving, (accept,), ()
        raise ProtocolViolation(
            f"server cannot handle {type(event).__name__} in AwaitingJob"
        )

    if isinstance(state, Receiving):
        spec = state.spec
        if isinstance(event, MsgReceived):
            message = event.message
            if isinstance(message, wire.ChunkData):
                if state.pending is not None:
                    raise ProtocolViolation(
                        f"chunk {message.seq} data arrived while digest of "
                        f"chunk {state.pending.seq} is still pending"
                    )
                fresh = message.seq == state.next_fresh
                retransmit = message.seq in state.awaiting_retransmit
                if not fresh and not retransmit:
                    raise OutOfOrderChunk(
                        f"chunk {message.seq} is neither the next fresh chunk "
                        f"({state.next_fresh}) nor awaited for retransmission"
                    )
                if _unappended_count(state) >= WINDOW:
                    raise ProtocolViolation(
                        f"chunk {message.seq} exceeds the window of {WINDOW} "
                        "unappended chunks"
                    )
                expected_len = chunk_length_at(
                    spec.total_bytes, spec.chunk_size, message.seq
                )
                if len(message.payload) != expected_len:
                    raise ProtocolViolation(
                        f"chunk {message.seq} carries {len(message.payload)} "
                        f"bytes, expected {expected_len}"
                    )
                next_state = replace(
                    state,
                    pending=PendingChunk(message.seq, message.payload),
                    next_fresh=state.next_fresh + 1 if fresh else state.next_fresh,
                    awaiting_retransmit=state.awaiting_retransmit - {message.seq},
                )
                return next_state, (), ()
            if isinstance(message, wire.ChunkDigest):
                if state.pending is None or state.pending.seq != message.seq:
                    raise ProtocolViolation(
                        f"digest for chunk {message.seq} does not match the "
                        "pending chunk"
                    )
                if message.digest.algorithm is not spec.chunk_digest_algorithm:
                    raise ProtocolViolation(
                        f"chunk digest uses {message.digest.algorithm.value}, "
                        f"job uses {spec.chunk_digest_algorithm.value}"
                    )
                job = ChunkJob(message.seq, state.pending.payload, message.digest)
                if state.in_verify is None:
                    next_state = replace(state, pending=None, in_verify=job)
                    return (
                        next_state,
                        (),
                        (CmdVerify(job.seq, job.payload, job.claimed),),
                    )
                next_state = replace(
                    state,
                    pending=None,
                    verify_queue=state.verify_queue + (job,),
                )
                return next_state, (), ()
            if isinstance(message, wire.JobFinalize):
                complete = (
                    state.appended_count == spec.chunk_count
                    and state.pending is None
                    and state.in_verify is None
                    and not state.verify_queue
                    and not state.held
                    and not state.awaiting_retransmit
                )
                if not complete:
                    raise ProtocolViolation(
                        f"finalize with {state.appended_count} of "
                        f"{spec.chunk_count} chunks appended"
                    )
                return (
                    Finalizing(spec=spec, session_id=state.session_id),
                    (),
                    (CmdFinalVerify(),),
                )
        if isinstance(event, VerifyDone):
            if state.in_verify is None or state.in_verify.seq != event.seq:
                raise ProtocolViolation(
                    f"verify result for chunk {event.seq} does not match the "
                    "chunk under verification"
                )
            finished = state.in_verify
            messages: list[wire.WireMessage] = []
            commands: list[Command] = []
            if event.ok:
                next_state = replace(
                    state,
                    in_verify=None,
                    held=tuple(
                        sorted(state.held + ((finished.seq, finished.payload),))
                    ),
                )
                next_state, ack_msgs, append_cmds = _drain_appends(next_state)
                messages.extend(ack_msgs)
                commands.extend(append_cmds)
            else:
                messages.append(
                    wire.Nak(seq=finished.seq, reason="chunk digest mismatch")
                )
                next_state = replace(
                    state,
                    in_verify=None,
                    awaiting_retransmit=state.awaiting_retransmit
                    | {finished.seq},
                )
            if next_state.verify_queue:
                job = next_state.verify_queue[0]
                next_state = replace(
                    next_state,
                    in_verify=job,
                    verify_queue=next_state.verify_queue[1:],
                )
                commands.append(CmdVerify(job.seq, job.payload, job.claimed))
            return next_state, tuple(messages), tuple(commands)
        raise ProtocolViolation(
            f"server cannot handle {type(event).__name__} in Receiving"
        )

    if isinstance(state, Finalizing):
        if isinstance(event, FinalVerifyDone):
            result = wire.FinalResult(
                verified=event.ok, recomputed_digest=event.recomputed
            )
            if event.ok:
                return ServerDone(state.session_id, verdict=True), (result,), ()
            return (
                ServerFailed(
                    FailureReason.FINAL_MISMATCH,
                    "recombined image digest does not match the prehash",
                ),
                (result,),
                (),
            )
        raise ProtocolViolation(
            f"server cannot handle {type(event).__name__} in Finalizing"
        )

    raise ProtocolViolation(
        f"server received {type(event).__name__} in terminal state "
        f"{type(state).__name__}"
    )
