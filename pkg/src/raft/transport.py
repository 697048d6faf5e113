"""Byte transports, security flags, framed message I/O and fault injection.

An endpoint moves raw bytes and reports three security properties:
whether the channel is confidential, integrity protected and server
authenticated. The in-process loopback pair and TCP connections that stay
on the local host satisfy all three (the bytes never leave the machine);
a plain TCP connection to another host satisfies none, and production
configurations must opt in explicitly before using one.

Fault injection wraps an endpoint and disturbs only chunk payload bytes,
never framing, so a corrupted transfer still parses and the damage is
caught by digest verification exactly as it would be on real hardware.
"""
from __future__ import annotations

import random
import socket
import threading
import time
from dataclasses import dataclass

from . import wire
from .errors import (
    BindFailed,
    ConnectFailed,
    ConnectionLost,
    NeedMoreBytes,
)

DEFAULT_PORT = 8472
_RECV_SIZE = 1 << 16


class Endpoint:
    """Base byte channel. Subclasses set the three security flags."""

    confidential = False
    integrity_protected = False
    server_authenticated = False

    def send(self, data: bytes) -> None:
        raise NotImplementedError

    def recv(self, max_bytes: int) -> bytes:
        raise NotImplementedError

    def set_timeout(self, seconds: float | None) -> None:
        raise NotImplementedError

    def close(self) -> None:
        raise NotImplementedError


def is_fully_protected(endpoint: Endpoint) -> bool:
    return (
        endpoint.confidential
        and endpoint.integrity_protected
        and endpoint.server_authenticated
    )


# ---------------------------------------------------------------------------
# In-process loopback


class _Pipe:
    def __init__(self):
        self._buffer = bytearray()
        self._closed = False
        self._cond = threading.Condition()

    def write(self, data: bytes) -> None:
        with self._cond:
            if self._closed:
                raise ConnectionLost("loopback pipe is closed")
            self._buffer += data
            self._cond.notify_all()

    def read(self, max_bytes: int, timeout: float | None) -> bytes:
        deadline = None if timeout is None else time.monotonic() + timeout
        with self._cond:
            while not self._buffer and not self._closed:
                remaining = None
                if deadline is not None:
                    remaining = deadline - time.monotonic()
                    if remaining <= 0:
                        raise TimeoutError("loopback read timed out")
                self._cond.wait(remaining)
            if not self._buffer:
                return b""
            data = bytes(self._buffer[:max_bytes])
            del self._buffer[:max_bytes]
            return data

    def close(self) -> None:
        with self._cond:
            self._closed = True
            self._cond.notify_all()


class LoopbackEndpoint(Endpoint):
    confidential = True
    integrity_protected = True
    server_authenticated = True

    def __init__(self, outgoing: _Pipe, incoming: _Pipe):
        self._outgoing = outgoing
        self._incoming = incoming
        self._timeout: float | None = None

    def send(self, data: bytes) -> None:
        self._outgoing.write(data)

    def recv(self, max_bytes: int) -> bytes:
        return self._incoming.read(max_bytes, self._timeout)

    def set_timeout(self, seconds: float | None) -> None:
        self._timeout = seconds

    def close(self) -> None:
        self._outgoing.close()
        self._incoming.close()


def loopback_pair() -> tuple[LoopbackEndpoint, LoopbackEndpoint]:
    """Two connected in-memory endpoints, as a socketpair without sockets."""
    a_to_b = _Pipe()
    b_to_a = _Pipe()
    return LoopbackEndpoint(a_to_b, b_to_a), LoopbackEndpoint(b_to_a, a_to_b)


# ---------------------------------------------------------------------------
# TCP


class TCPEndpoint(Endpoint):
    """Plain stream socket.

    Reports no protection properties: a bare TCP stream is neither
    confidential nor authenticated, loopback included. A secure channel
    implementation wrapping the socket is what flips the flags.
    """

    def __init__(self, sock: socket.socket):
        self._sock = sock

    def send(self, data: bytes) -> None:
        try:
            self._sock.sendall(data)
        except OSError as exc:
            raise ConnectionLost(f"send failed: {exc}") from exc

    def recv(self, max_bytes: int) -> bytes:
        try:
            return self._sock.recv(max_bytes)
        except TimeoutError:
            raise
        except OSError as exc:
            raise ConnectionLost(f"recv failed: {exc}") from exc

    def set_timeout(self, seconds: float | None) -> None:
        try:
            self._sock.settimeout(seconds)
        except OSError as exc:
            raise ConnectionLost(f"socket unusable: {exc}") from exc

    def close(self) -> None:
        try:
            self._sock.close()
        except OSError:
            pass


def stream_connect(
    host: str, port: int, timeout: float | None = 10.0
) -> TCPEndpoint:
    try:
        sock = socket.create_connection((host, port), timeout=timeout)
    except OSError as exc:
        raise ConnectFailed(f"cannot connect to {host}:{port}: {exc}") from exc
    sock.settimeout(None)
    return TCPEndpoint(sock)


class Listener:
    def __init__(self, sock: socket.socket):
        self._sock = sock

    @property
    def port(self) -> int:
        return self._sock.getsockname()[1]

    def accept(self) -> TCPEndpoint | None:
        """Next inbound connection, or None once the listener is closed."""
        try:
            conn, _ = self._sock.accept()
        except OSError:
            return None
        return TCPEndpoint(conn)

    def close(self) -> None:
        # shutdown() wakes a thread blocked in accept(); close() alone
        # leaves it stuck until the next inbound connection
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        try:
            self._sock.close()
        except OSError:
            pass


def stream_listen(bind: str = "127.0.0.1", port: int = DEFAULT_PORT) -> Listener:
    sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    try:
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        sock.bind((bind, port))
        sock.listen(16)
    except OSError as exc:
        sock.close()
        raise BindFailed(f"cannot listen on {bind}:{port}: {exc}") from exc
    return Listener(sock)


# ---------------------------------------------------------------------------
# Framed message I/O


def send_message(endpoint: Endpoint, message: wire.WireMessage) -> None:
    endpoint.send(wire.encode_frame(message))


class FrameReader:
    """Incremental frame decoder over an endpoint."""

    def __init__(self, endpoint: Endpoint):
        self._endpoint = endpoint
        self._buffer = bytearray()

    def read_message(self) -> wire.WireMessage | None:
        """Next message; None on a clean close at a frame boundary.

        A connection that dies mid-frame raises ConnectionLost. A recv
        timeout propagates as TimeoutError.
        """
        while True:
            try:
                message, consumed = wire.decode_frame(bytes(self._buffer))
            except NeedMoreBytes:
                data = self._endpoint.recv(_RECV_SIZE)
                if not data:
                    if self._buffer:
                        raise ConnectionLost(
                            f"connection closed with {len(self._buffer)} "
                            "bytes of a partial frame"
                        )
                    return None
                self._buffer += data
                continue
            del self._buffer[:consumed]
            return message


# ---------------------------------------------------------------------------
# Fault injection


@dataclass(frozen=True)
class FaultPlan:
    """Seeded disturbance profile applied to an endpoint's outgoing frames."""

    seed: int = 0
    corrupt_chunk_probability: float = 0.0
    drop_connection_after_bytes: int | None = None
    latency_fixed_ms: float = 0.0
    latency_jitter_ms: float = 0.0
    bandwidth_limit_bits: int | None = None

    def __post_init__(self):
        if not 0.0 <= self.corrupt_chunk_probability <= 1.0:
            raise ValueError(
                "corrupt_chunk_probability must be within [0, 1], got "
                f"{self.corrupt_chunk_probability}"
            )


class FaultInjectingEndpoint(Endpoint):
    """Wraps an endpoint and disturbs outgoing traffic per a FaultPlan.

    Corruption flips exactly one byte inside a chunk's payload, past the
    sequence number, and leaves every header field alone. Dropping the
    connection forwards bytes up to the configured budget and then cuts
    the channel, possibly mid-frame.
    """

    def __init__(self, inner: Endpoint, plan: FaultPlan):
        self._inner = inner
        self._plan = plan
        self._rng = random.Random(plan.seed)
        self._pending = bytearray()
        self._forwarded = 0
        self._dropped = False
        self.corrupted_seqs: list[int] = []
        self.confidential = inner.confidential
        self.integrity_protected = inner.integrity_protected
        self.server_authenticated = inner.server_authenticated

    @property
    def corruption_count(self) -> int:
        return len(self.corrupted_seqs)

    def _disturb(self, frame: bytearray) -> bytearray:
        plan = self._plan
        if (
            plan.corrupt_chunk_probability > 0
            and wire.frame_type(frame) == wire.TYPE_CHUNK_DATA
            and len(frame) > wire.HEADER_SIZE + 8
            and self._rng.random() < plan.corrupt_chunk_probability
        ):
            seq = int.from_bytes(
                frame[wire.HEADER_SIZE : wire.HEADER_SIZE + 8], "big"
            )
            position = self._rng.randrange(wire.HEADER_SIZE + 8, len(frame))
            frame[position] ^= self._rng.randrange(1, 256)
            self.corrupted_seqs.append(seq)
        return frame

    def _forward(self, frame: bytearray) -> None:
        plan = self._plan
        if plan.latency_fixed_ms or plan.latency_jitter_ms:
            jitter = plan.latency_jitter_ms * self._rng.random()
            time.sleep((plan.latency_fixed_ms + jitter) / 1000.0)
        if plan.bandwidth_limit_bits:
            time.sleep(len(frame) * 8 / plan.bandwidth_limit_bits)
        budget = plan.drop_connection_after_bytes
        if budget is not None and self._forwarded + len(frame) > budget:
            allowed = budget - self._forwarded
            if allowed > 0:
                self._inner.send(bytes(frame[:allowed]))
                self._forwarded += allowed
            self._dropped = True
            self._inner.close()
            raise ConnectionLost(
                f"fault plan dropped the connection after {self._forwarded} bytes"
            )
        self._inner.send(bytes(frame))
        self._forwarded += len(frame)

    def send(self, data: bytes) -> None:
        if self._dropped:
            raise ConnectionLost("connection already dropped by fault plan")
        self._pending += data
        while True:
            try:
                size = wire.peek_frame_size(bytes(self._pending))
            except NeedMoreBytes:
                return
            if len(self._pending) < size:
                return
            frame = bytearray(self._pending[:size])
            del self._pending[:size]
            self._forward(self._disturb(frame))

    def recv(self, max_bytes: int) -> bytes:
        return self._inner.recv(max_bytes)

    def set_timeout(self, seconds: float | None) -> None:
        self._inner.set_timeout(seconds)

    def close(self) -> None:
        self._inner.close()


def wrap_with_faults(endpoint: Endpoint, plan: FaultPlan) -> FaultInjectingEndpoint:
    return FaultInjectingEndpoint(endpoint, plan)
