"""State machine tests driven through a pure in-memory bridge.

The bridge plays runtime for both machines: it moves wire messages between
them one at a time, executes server commands with real hashing, and can
corrupt chosen transmissions of a chunk in transit. Nothing here touches
sockets, threads or the clock, so every scenario replays identically.
"""
from __future__ import annotations

from collections import Counter, deque

import pytest

from raft import wire
from raft.errors import OutOfOrderChunk, ProtocolViolation
from raft.hashing import digest_bytes
from raft.model import DeviceDescriptor, HashAlgorithm, appended_prefix_count
from raft.protocol import (
    Authenticated,
    AwaitingAuth,
    AwaitingFinal,
    AwaitingJob,
    ChunkReady,
    ClientDone,
    ClientFailed,
    ClientParams,
    CmdAppend,
    CmdFinalVerify,
    CmdOpenJob,
    CmdVerify,
    Connected,
    FailureReason,
    FinalVerifyDone,
    JobOpened,
    MsgReceived,
    OpenJob,
    PeerDisconnected,
    Receiving,
    ServerDone,
    ServerFailed,
    ServerParams,
    Start,
    Timeout,
    Transferring,
    VerifyDone,
    auth_proof,
    client_step,
    server_step,
    transmit_intent,
)

CHUNK_ALG = HashAlgorithm.SHA512
WHOLE_ALG = HashAlgorithm.SHA256
SECRET = b"0" * 64


def _flip(payload: bytes) -> bytes:
    return bytes([payload[0] ^ 0xFF]) + payload[1:]


class Bridge:
    def __init__(
        self,
        data: bytes,
        chunk_size: int,
        *,
        corrupt=(),
        client_secret: bytes = SECRET,
        server_secret: bytes | None = None,
        initial_image: bytes = b"",
        retry_limit: int = 5,
        force_resume_mismatch: bool = False,
    ):
        self.data = data
        self.device = DeviceDescriptor("dev-1", "evidence unit", len(data))
        self.whole = digest_bytes(data, WHOLE_ALG)
        self.client_params = ClientParams(
            case_id="CASE-1",
            device=self.device,
            chunk_size=chunk_size,
            chunk_digest_algorithm=CHUNK_ALG,
            whole_image_digest=self.whole,
            auth_secret=client_secret,
            client_nonce=b"client-nonce",
            retry_limit=retry_limit,
        )
        self.server_params = ServerParams(
            auth_digest=server_secret if server_secret is not None else SECRET,
            server_nonce=b"server-nonce",
        )
        self.client_state = Connected()
        self.server_state = AwaitingAuth()
        self.corrupt = set(corrupt)
        self.force_resume_mismatch = force_resume_mismatch
        self.store = bytearray(initial_image)
        self.to_server: deque = deque()
        self.to_client: deque = deque()
        self.server_inbox: deque = deque()
        self.send_counts: Counter = Counter()
        self.acks: list[int] = []
        self.naks: list[int] = []
        self.append_order: list[int] = []
        self.server_steps: list[tuple] = []
        self.trace: list[tuple] = []

    # -- client side ------------------------------------------------------

    def _client_event(self, event) -> None:
        self.client_state, messages = client_step(
            self.client_params, self.client_state, event
        )
        self.trace.append(("client", type(event).__name__, messages))
        for message in messages:
            if isinstance(message, wire.ChunkData):
                self.send_counts[message.seq] += 1
                attempt = self.send_counts[message.seq]
                if (message.seq, attempt) in self.corrupt:
                    message = wire.ChunkData(
                        seq=message.seq, payload=_flip(message.payload)
                    )
            self.to_server.append(message)

    def _chunk_payload(self, seq: int) -> bytes:
        start = seq * self.client_params.chunk_size
        end = min(start + self.client_params.chunk_size, len(self.data))
        return self.data[start:end]

    # -- server side ------------------------------------------------------

    def _run_command(self, command) -> None:
        if isinstance(command, CmdOpenJob):
            spec = command.spec
            resume = appended_prefix_count(
                spec.total_bytes, spec.chunk_size, len(self.store)
            )
            self.server_inbox.append(
                JobOpened(
                    session_id="SESSION-1",
                    resume_from_seq=resume,
                    digest_mismatch=self.force_resume_mismatch,
                )
            )
        elif isinstance(command, CmdVerify):
            recomputed = digest_bytes(command.payload, command.claimed.algorithm)
            self.server_inbox.append(
                VerifyDone(
                    seq=command.seq,
                    ok=recomputed == command.claimed,
                    recomputed=recomputed,
                )
            )
        elif isinstance(command, CmdAppend):
            self.append_order.append(command.seq)
            self.store += command.payload
        elif isinstance(command, CmdFinalVerify):
            recomputed = digest_bytes(bytes(self.store), WHOLE_ALG)
            self.server_inbox.append(
                FinalVerifyDone(ok=recomputed == self.whole, recomputed=recomputed)
            )
        else:
            raise AssertionError(f"unexpected command {command!r}")

    def _server_event(self, event) -> None:
        self.server_state, messages, commands = server_step(
            self.server_params, self.server_state, event
        )
        self.server_steps.append((type(event).__name__, messages, commands))
        self.trace.append(("server", type(event).__name__, messages))
        for command in commands:
            self._run_command(command)
        for message in messages:
            if isinstance(message, wire.Ack):
                self.acks.append(message.seq)
            elif isinstance(message, wire.Nak):
                self.naks.append(message.seq)
            self.to_client.append(message)

    # -- pump -------------------------------------------------------------

    def run(self, budget: int = 10_000):
        self._client_event(Start())
        opened = False
        while budget:
            budget -= 1
            progressed = False
            if self.to_server and not isinstance(
                self.server_state, (ServerDone, ServerFailed)
            ):
                self.server_inbox.append(MsgReceived(self.to_server.popleft()))
                progressed = True
            if self.server_inbox and not isinstance(
                self.server_state, (ServerDone, ServerFailed)
            ):
                self._server_event(self.server_inbox.popleft())
                progressed = True
            if self.to_client and not isinstance(
                self.client_state, (ClientDone, ClientFailed)
            ):
                self._client_event(MsgReceived(self.to_client.popleft()))
                progressed = True
            if isinstance(self.client_state, Authenticated) and not opened:
                self._client_event(OpenJob())
                opened = True
                progressed = True
            seq = transmit_intent(self.client_params, self.client_state)
            if seq is not None:
                payload = self._chunk_payload(seq)
                self._client_event(
                    ChunkReady(seq, payload, digest_bytes(payload, CHUNK_ALG))
                )
                progressed = True
            if not progressed:
                break
        else:
            raise AssertionError("bridge did not settle within budget")
        return self


DATA = bytes(range(256)) * 4  # 1024 bytes


def test_happy_path_transfers_every_chunk():
    bridge = Bridge(DATA, 100).run()
    assert isinstance(bridge.client_state, ClientDone)
    assert isinstance(bridge.server_state, ServerDone)
    assert bridge.server_state.verdict is True
    assert bytes(bridge.store) == DATA
    assert bridge.append_order == list(range(11))
    assert bridge.acks == list(range(11))
    assert bridge.naks == []
    assert bridge.client_state.recomputed == bridge.whole


def test_single_chunk_image():
    bridge = Bridge(b"tiny", 4096).run()
    assert isinstance(bridge.client_state, ClientDone)
    assert bytes(bridge.store) == b"tiny"
    assert bridge.append_order == [0]


def test_corrupted_chunk_is_nacked_then_retransmitted():
    bridge = Bridge(DATA, 100, corrupt={(2, 1)}).run()
    assert isinstance(bridge.client_state, ClientDone)
    assert bridge.naks == [2]
    assert bridge.send_counts[2] == 2
    assert bytes(bridge.store) == DATA
    assert bridge.append_order == sorted(bridge.append_order)


def test_multiple_corruptions_all_recovered():
    corrupt = {(0, 1), (3, 1), (3, 2), (7, 1)}
    bridge = Bridge(DATA, 100, corrupt=corrupt).run()
    assert isinstance(bridge.client_state, ClientDone)
    assert sorted(bridge.naks) == [0, 3, 3, 7]
    assert len(bridge.naks) == len(corrupt)
    assert bytes(bridge.store) == DATA


def test_retry_limit_aborts_the_job():
    corrupt = {(0, attempt) for attempt in range(1, 6)}
    bridge = Bridge(DATA, 100, corrupt=corrupt, retry_limit=5).run()
    assert isinstance(bridge.client_state, ClientFailed)
    assert bridge.client_state.reason is FailureReason.RETRY_LIMIT
    assert bridge.send_counts[0] == 5
    assert bridge.naks.count(0) == 5
    assert isinstance(bridge.server_state, ServerFailed)
    assert bridge.server_state.reason is FailureReason.PEER_ABORT


def test_bad_credentials_refused():
    bridge = Bridge(DATA, 100, client_secret=b"wrong" * 13).run()
    assert isinstance(bridge.client_state, ClientFailed)
    assert bridge.client_state.reason is FailureReason.AUTH_REFUSED
    assert isinstance(bridge.server_state, ServerFailed)
    assert bridge.server_state.reason is FailureReason.AUTH_REFUSED
    assert bridge.store == bytearray()


def test_resume_skips_appended_prefix():
    bridge = Bridge(DATA, 100, initial_image=DATA[:300]).run()
    assert isinstance(bridge.client_state, ClientDone)
    assert bytes(bridge.store) == DATA
    assert bridge.append_order == list(range(3, 11))
    assert all(seq >= 3 for seq in bridge.send_counts)


def test_resume_with_nothing_left_to_send():
    bridge = Bridge(DATA, 100, initial_image=DATA).run()
    assert isinstance(bridge.client_state, ClientDone)
    assert bridge.send_counts == Counter()
    assert bridge.append_order == []
    assert isinstance(bridge.server_state, ServerDone)


def test_resume_digest_mismatch_aborts():
    bridge = Bridge(
        DATA, 100, initial_image=DATA[:300], force_resume_mismatch=True
    ).run()
    assert isinstance(bridge.server_state, ServerFailed)
    assert isinstance(bridge.client_state, ClientFailed)
    assert bridge.client_state.reason is FailureReason.PEER_ABORT


def test_ack_never_precedes_append_within_a_step():
    bridge = Bridge(DATA, 100, corrupt={(1, 1)}).run()
    appended: set[int] = set()
    for _, messages, commands in bridge.server_steps:
        for command in commands:
            if isinstance(command, CmdAppend):
                appended.add(command.seq)
        for message in messages:
            if isinstance(message, wire.Ack):
                assert message.seq in appended


def test_replay_is_deterministic():
    first = Bridge(DATA, 100, corrupt={(2, 1), (5, 1)}).run()
    second = Bridge(DATA, 100, corrupt={(2, 1), (5, 1)}).run()
    assert first.trace == second.trace
    assert first.client_state == second.client_state
    assert first.server_state == second.server_state


def test_auth_proof_depends_on_nonce():
    assert auth_proof(SECRET, b"a") != auth_proof(SECRET, b"b")
    assert auth_proof(SECRET, b"a") == auth_proof(SECRET, b"a")


# -- hand-driven server scenarios ----------------------------------------


def _receiving_server(data: bytes, chunk_size: int):
    """Walk a server machine through auth and job open, return it Receiving."""
    params = ServerParams(auth_digest=SECRET, server_nonce=b"nonce")
    device = DeviceDescriptor("dev-9", "unit", len(data))
    whole = digest_bytes(data, WHOLE_ALG)
    state: object = AwaitingAuth()
    state, messages, _ = server_step(
        params, state, MsgReceived(wire.Hello(protocol_version=1, nonce=b"c"))
    )
    assert isinstance(messages[0], wire.Hello)
    proof = auth_proof(SECRET, b"nonce")
    state, messages, _ = server_step(
        params, state, MsgReceived(wire.Auth(passphrase_proof=proof))
    )
    assert messages == (wire.AuthResult(ok=True),)
    open_msg = wire.JobOpen(
        case_id="CASE-9",
        device=device,
        chunk_size=chunk_size,
        chunk_digest_algorithm=CHUNK_ALG,
        whole_image_digest=whole,
    )
    state, _, commands = server_step(params, state, MsgReceived(open_msg))
    assert isinstance(commands[0], CmdOpenJob)
    state, messages, _ = server_step(
        params, state, JobOpened(session_id="S", resume_from_seq=0)
    )
    assert isinstance(messages[0], wire.JobAccept)
    assert isinstance(state, Receiving)
    return params, state


def _chunk_messages(data: bytes, chunk_size: int, seq: int):
    start = seq * chunk_size
    payload = data[start : start + chunk_size]
    digest = digest_bytes(payload, CHUNK_ALG)
    return (
        wire.ChunkData(seq=seq, payload=payload),
        wire.ChunkDigest(seq=seq, digest=digest),
    )


def test_out_of_order_fresh_chunk_rejected():
    data = bytes(200)
    params, state = _receiving_server(data, 50)
    chunk_data, _ = _chunk_messages(data, 50, 1)
    with pytest.raises(OutOfOrderChunk):
        server_step(params, state, MsgReceived(chunk_data))


def test_duplicate_chunk_rejected():
    data = bytes(200)
    params, state = _receiving_server(data, 50)
    chunk_data, chunk_digest = _chunk_messages(data, 50, 0)
    state, _, _ = server_step(params, state, MsgReceived(chunk_data))
    state, _, _ = server_step(params, state, MsgReceived(chunk_digest))
    with pytest.raises(OutOfOrderChunk):
        server_step(params, state, MsgReceived(chunk_data))


def test_wrong_length_chunk_rejected():
    data = bytes(200)
    params, state = _receiving_server(data, 50)
    short = wire.ChunkData(seq=0, payload=b"x" * 49)
    with pytest.raises(ProtocolViolation):
        server_step(params, state, MsgReceived(short))


def test_window_of_two_unappended_chunks_enforced():
    data = bytes(200)
    params, state = _receiving_server(data, 50)
    for seq in (0, 1):
        chunk_data, chunk_digest = _chunk_messages(data, 50, seq)
        state, _, _ = server_step(params, state, MsgReceived(chunk_data))
        state, _, _ = server_step(params, state, MsgReceived(chunk_digest))
    assert state.in_verify is not None and state.in_verify.seq == 0
    assert len(state.verify_queue) == 1
    third, _ = _chunk_messages(data, 50, 2)
    with pytest.raises(ProtocolViolation):
        server_step(params, state, MsgReceived(third))


def test_second_chunk_queues_while_first_verifies():
    data = bytes(200)
    params, state = _receiving_server(data, 50)
    chunk0 = _chunk_messages(data, 50, 0)
    chunk1 = _chunk_messages(data, 50, 1)
    state, _, commands = server_step(params, state, MsgReceived(chunk0[0]))
    assert commands == ()
    state, _, commands = server_step(params, state, MsgReceived(chunk0[1]))
    assert len(commands) == 1 and isinstance(commands[0], CmdVerify)
    state, _, commands = server_step(params, state, MsgReceived(chunk1[0]))
    state, _, commands = server_step(params, state, MsgReceived(chunk1[1]))
    assert commands == ()
    assert state.verify_queue[0].seq == 1
    recomputed = digest_bytes(data[:50], CHUNK_ALG)
    state, messages, commands = server_step(
        params, state, VerifyDone(seq=0, ok=True, recomputed=recomputed)
    )
    assert wire.Ack(seq=0) in messages
    assert any(isinstance(c, CmdAppend) and c.seq == 0 for c in commands)
    assert any(isinstance(c, CmdVerify) and c.seq == 1 for c in commands)
    assert state.in_verify.seq == 1


def test_finalize_before_completion_rejected():
    data = bytes(200)
    params, state = _receiving_server(data, 50)
    with pytest.raises(ProtocolViolation):
        server_step(params, state, MsgReceived(wire.JobFinalize()))


def test_finalize_while_verify_outstanding_rejected():
    data = bytes(100)
    params, state = _receiving_server(data, 25)
    for seq in range(4):
        chunk_data, chunk_digest = _chunk_messages(data, 25, seq)
        state, _, _ = server_step(params, state, MsgReceived(chunk_data))
        state, _, commands = server_step(params, state, MsgReceived(chunk_digest))
        for command in commands:
            if isinstance(command, CmdVerify):
                state, _, more = server_step(
                    params,
                    state,
                    VerifyDone(
                        seq=command.seq,
                        ok=True,
                        recomputed=command.claimed,
                    ),
                )
                commands = commands + more
    assert state.appended_count == 4
    state, _, commands = server_step(params, state, MsgReceived(wire.JobFinalize()))
    assert commands == (CmdFinalVerify(),)


def test_peer_disconnect_fails_session():
    data = bytes(200)
    params, state = _receiving_server(data, 50)
    state, messages, commands = server_step(params, state, PeerDisconnected())
    assert isinstance(state, ServerFailed)
    assert state.reason is FailureReason.DISCONNECTED
    assert messages == () and commands == ()


# -- hand-driven client scenarios ----------------------------------------


def _transferring_client(data: bytes, chunk_size: int):
    device = DeviceDescriptor("dev-2", "unit", len(data))
    params = ClientParams(
        case_id="CASE-2",
        device=device,
        chunk_size=chunk_size,
        chunk_digest_algorithm=CHUNK_ALG,
        whole_image_digest=digest_bytes(data, WHOLE_ALG),
        auth_secret=SECRET,
        client_nonce=b"cn",
    )
    state: object = Connected()
    state, messages = client_step(params, state, Start())
    assert isinstance(messages[0], wire.Hello)
    state, messages = client_step(
        params, state, MsgReceived(wire.Hello(protocol_version=1, nonce=b"sn"))
    )
    assert isinstance(messages[0], wire.Auth)
    assert messages[0].passphrase_proof == auth_proof(SECRET, b"sn")
    state, messages = client_step(
        params, state, MsgReceived(wire.AuthResult(ok=True))
    )
    assert state == Authenticated()
    state, messages = client_step(params, state, OpenJob())
    assert isinstance(messages[0], wire.JobOpen)
    state, messages = client_step(
        params,
        state,
        MsgReceived(wire.JobAccept(session_id="S", resume_from_seq=0)),
    )
    assert isinstance(state, Transferring)
    return params, state


def test_transmit_intent_prefers_retransmissions():
    data = bytes(400)
    params, state = _transferring_client(data, 100)
    assert transmit_intent(params, state) == 0
    payload = data[:100]
    digest = digest_bytes(payload, CHUNK_ALG)
    state, _ = client_step(params, state, ChunkReady(0, payload, digest))
    assert transmit_intent(params, state) == 1
    state, _ = client_step(params, state, ChunkReady(1, data[100:200], digest))
    assert transmit_intent(params, state) is None  # window full
    state, _ = client_step(
        params, state, MsgReceived(wire.Nak(seq=0, reason="digest mismatch"))
    )
    assert transmit_intent(params, state) == 0


def test_ack_for_unknown_chunk_rejected():
    data = bytes(400)
    params, state = _transferring_client(data, 100)
    with pytest.raises(ProtocolViolation):
        client_step(params, state, MsgReceived(wire.Ack(seq=3)))


def test_client_timeout_sends_abort():
    data = bytes(400)
    params, state = _transferring_client(data, 100)
    state, messages = client_step(params, state, Timeout())
    assert isinstance(state, ClientFailed)
    assert state.reason is FailureReason.TIMEOUT
    assert isinstance(messages[0], wire.Abort)


def test_peer_abort_fails_client():
    data = bytes(400)
    params, state = _transferring_client(data, 100)
    state, messages = client_step(
        params, state, MsgReceived(wire.Abort(reason="store unwritable"))
    )
    assert isinstance(state, ClientFailed)
    assert state.reason is FailureReason.PEER_ABORT
    assert messages == ()


def test_resume_point_beyond_chunk_count_rejected():
    data = bytes(400)
    device = DeviceDescriptor("dev-3", "unit", len(data))
    params = ClientParams(
        case_id="CASE-3",
        device=device,
        chunk_size=100,
        chunk_digest_algorithm=CHUNK_ALG,
        whole_image_digest=digest_bytes(data, WHOLE_ALG),
        auth_secret=SECRET,
        client_nonce=b"cn",
    )
    state: object = Connected()
    state, _ = client_step(params, state, Start())
    state, _ = client_step(
        params, state, MsgReceived(wire.Hello(protocol_version=1, nonce=b"sn"))
    )
    state, _ = client_step(params, state, MsgReceived(wire.AuthResult(ok=True)))
    state, _ = client_step(params, state, OpenJob())
    with pytest.raises(ProtocolViolation):
        client_step(
            params,
            state,
            MsgReceived(wire.JobAccept(session_id="S", resume_from_seq=5)),
        )


def test_version_mismatch_rejected():
    data = bytes(400)
    device = DeviceDescriptor("dev-4", "unit", len(data))
    params = ClientParams(
        case_id="CASE-4",
        device=device,
        chunk_size=100,
        chunk_digest_algorithm=CHUNK_ALG,
        whole_image_digest=digest_bytes(data, WHOLE_ALG),
        auth_secret=SECRET,
        client_nonce=b"cn",
    )
    state, _ = client_step(params, Connected(), Start())
    with pytest.raises(ProtocolViolation):
        client_step(
            params, state, MsgReceived(wire.Hello(protocol_version=2, nonce=b"s"))
        )
