"""Single-session acquisition driver for the client side.

Wraps the pure client state machine with real I/O: chunks are read from
the evidence source, framed onto the endpoint, and replies are fed back
into the machine. The driver owns no policy of its own; everything about
ordering, retries, and when to finalize lives in the machine.
"""
from __future__ import annotations

import secrets
from dataclasses import dataclass, field
from typing import Callable

from .errors import ConnectionLost, ProtocolViolation, RaftError
from .imaging import ReadOnlySource, prehash_source, read_chunk
from .model import DeviceDescriptor, DigestValue, HashAlgorithm, chunk_length_at
from .protocol import (
    Authenticated,
    ChunkReady,
    ClientDone,
    ClientFailed,
    ClientParams,
    ClientState,
    Connected,
    FailureReason,
    MsgReceived,
    OpenJob,
    Start,
    Timeout,
    client_step,
    transmit_intent,
)
from .transport import Endpoint, FrameReader, send_message
from . import wire

ProgressCallback = Callable[["ProgressEvent"], None]


@dataclass(frozen=True)
class ProgressEvent:
    kind: str
    data: dict = field(default_factory=dict)


@dataclass(frozen=True)
class AcquireOutcome:
    verified: bool
    session_id: str = ""
    recomputed: DigestValue | None = None
    chunks_sent: int = 0
    nak_count: int = 0
    resumed_from: int = 0
    failure_reason: FailureReason | None = None
    failure_detail: str = ""


class _Progress:
    def __init__(self, on_event: ProgressCallback | None):
        self._on_event = on_event

    def emit(self, kind: str, **data) -> None:
        if self._on_event is not None:
            self._on_event(ProgressEvent(kind=kind, data=data))


def acquire_device(
    endpoint: Endpoint,
    *,
    case_id: str,
    descriptor: DeviceDescriptor,
    source: ReadOnlySource,
    auth_secret: bytes,
    chunk_size: int,
    chunk_digest_algorithm: HashAlgorithm = HashAlgorithm.SHA512,
    whole_image_algorithm: HashAlgorithm = HashAlgorithm.SHA512,
    on_event: ProgressCallback | None = None,
    retry_limit: int | None = None,
    timeout: float = 60.0,
) -> AcquireOutcome:
    """Image one device through an already-connected endpoint.

    Returns an outcome rather than raising for transfer-level failures,
    so callers can distinguish "the job failed" from "the driver broke".
    Connection loss is reported as a resumable failure: a later call
    against the same store picks up at the appended prefix.
    """
    progress = _Progress(on_event)

    progress.emit("prehash_started", total_bytes=descriptor.total_bytes)
    whole_digest = prehash_source(source, whole_image_algorithm)
    progress.emit("prehash_done", digest=whole_digest.hex)

    params_kwargs = dict(
        case_id=case_id,
        device=descriptor,
        chunk_size=chunk_size,
        chunk_digest_algorithm=chunk_digest_algorithm,
        whole_image_digest=whole_digest,
        auth_secret=auth_secret,
        client_nonce=secrets.token_bytes(16),
    )
    if retry_limit is not None:
        params_kwargs["retry_limit"] = retry_limit
    params = ClientParams(**params_kwargs)

    endpoint.set_timeout(timeout)
    reader = FrameReader(endpoint)
    tally = {
        "sent": 0,
        "naks": 0,
        "resumed_from": 0,
        "session_id": "",
        "nak_seqs": {},
    }

    state: ClientState = Connected()

    def run_step(event) -> ClientState:
        new_state, messages = client_step(params, state, event)
        for message in messages:
            send_message(endpoint, message)
        return new_state

    try:
        state = run_step(Start())
        while not isinstance(state, (ClientDone, ClientFailed)):
            if isinstance(state, Authenticated):
                progress.emit("authenticated")
                state = run_step(OpenJob())
                continue
            intent = transmit_intent(params, state)
            if intent is not None:
                offset = intent * chunk_size
                length = chunk_length_at(
                    descriptor.total_bytes, chunk_size, intent
                )
                payload, digest = read_chunk(
                    source, offset, length, chunk_digest_algorithm
                )
                state = run_step(ChunkReady(intent, payload, digest))
                tally["sent"] += 1
                progress.emit("chunk_sent", seq=intent)
                continue
            try:
                message = reader.read_message()
            except TimeoutError:
                progress.emit("error", detail="peer reply timed out")
                state = run_step(Timeout())
                continue
            if message is None:
                raise ConnectionLost("peer closed the connection")
            _note_message(progress, tally, message)
            state = run_step(MsgReceived(message))
    except ConnectionLost as exc:
        progress.emit("disconnected", detail=str(exc))
        return AcquireOutcome(
            verified=False,
            session_id=tally["session_id"],
            chunks_sent=tally["sent"],
            nak_count=tally["naks"],
            resumed_from=tally["resumed_from"],
            failure_reason=FailureReason.DISCONNECTED,
            failure_detail=str(exc),
        )
    except ProtocolViolation as exc:
        progress.emit("error", detail=str(exc))
        try:
            send_message(endpoint, wire.Abort(reason=str(exc)))
        except (ConnectionLost, RaftError, OSError):
            pass
        return AcquireOutcome(
            verified=False,
            session_id=tally["session_id"],
            chunks_sent=tally["sent"],
            nak_count=tally["naks"],
            resumed_from=tally["resumed_from"],
            failure_reason=FailureReason.PROTOCOL,
            failure_detail=str(exc),
        )

    if isinstance(state, ClientDone):
        progress.emit("job_finalized", verdict="verified")
        return AcquireOutcome(
            verified=True,
            session_id=state.session_id,
            recomputed=state.recomputed,
            chunks_sent=tally["sent"],
            nak_count=tally["naks"],
            resumed_from=tally["resumed_from"],
        )
    progress.emit(
        "job_failed", reason=state.reason.value, detail=state.detail
    )
    return AcquireOutcome(
        verified=False,
        session_id=tally["session_id"],
        chunks_sent=tally["sent"],
        nak_count=tally["naks"],
        resumed_from=tally["resumed_from"],
        failure_reason=state.reason,
        failure_detail=state.detail,
    )


def _note_message(progress: _Progress, tally: dict, message) -> None:
    if isinstance(message, wire.JobAccept):
        tally["session_id"] = message.session_id
        tally["resumed_from"] = message.resume_from_seq
        progress.emit(
            "job_accepted",
            session_id=message.session_id,
            resume_from=message.resume_from_seq,
        )
    elif isinstance(message, wire.Ack):
        progress.emit("chunk_acked", seq=message.seq)
    elif isinstance(message, wire.Nak):
        tally["naks"] += 1
        attempt = tally["nak_seqs"].get(message.seq, 0) + 1
        tally["nak_seqs"][message.seq] = attempt
        progress.emit(
            "chunk_nacked",
            seq=message.seq,
            attempt=attempt,
            reason=message.reason,
        )
