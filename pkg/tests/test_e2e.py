"""End-to-end transfers: real server, real sockets, real files."""
import hashlib
import random
import threading
import time

import pytest

from raft.client import acquire_device
from raft.config import ServerConfig
from raft.imaging import descriptor_for_file, open_source
from raft.model import HashAlgorithm
from raft.protocol import FailureReason
from raft.server import Server, read_evidence_record
from raft.transport import FaultPlan, stream_connect, wrap_with_faults

PASSPHRASE = "correct horse battery staple"
PASS_DIGEST = hashlib.sha256(PASSPHRASE.encode()).hexdigest()
AUTH_SECRET = PASS_DIGEST.encode("ascii")

TOTAL = 64 * 1024
CHUNK = 4 * 1024  # 16 chunks


@pytest.fixture
def evidence_file(tmp_path):
    data = random.Random(2024).randbytes(TOTAL)
    path = tmp_path / "sdx.bin"
    path.write_bytes(data)
    return path, data


@pytest.fixture
def server(tmp_path):
    config = ServerConfig(
        store_root=tmp_path / "store",
        passphrase_digest=PASS_DIGEST,
        bind="127.0.0.1",
        port=0,
        insecure_transport_ok=True,
    )
    instance = Server(config).start()
    yield instance
    instance.shutdown()


def connect(server):
    return stream_connect("127.0.0.1", server.port)


def run_acquire(server, path, *, fault_plan=None, events=None, **kwargs):
    descriptor = descriptor_for_file(path)
    endpoint = connect(server)
    if fault_plan is not None:
        endpoint = wrap_with_faults(endpoint, fault_plan)
    options = dict(
        case_id="CASE-E2E",
        descriptor=descriptor,
        auth_secret=AUTH_SECRET,
        chunk_size=CHUNK,
        on_event=events.append if events is not None else None,
        timeout=30.0,
    )
    options.update(kwargs)
    try:
        with open_source(descriptor, path) as source:
            return acquire_device(endpoint, source=source, **options), endpoint
    finally:
        endpoint.close()


def wait_for(predicate, timeout=10.0):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        if predicate():
            return True
        time.sleep(0.01)
    return False


def session_dirs(server, device_id):
    root = server.store.root / "CASE-E2E"
    if not root.is_dir():
        return []
    return sorted(
        session_dir / device_id
        for session_dir in root.iterdir()
        if (session_dir / device_id).is_dir()
    )


def test_clean_acquisition_end_to_end(server, evidence_file):
    path, data = evidence_file
    events = []
    outcome, _ = run_acquire(server, path, events=events)
    assert outcome.verified
    assert outcome.chunks_sent == TOTAL // CHUNK
    assert outcome.nak_count == 0
    assert outcome.resumed_from == 0

    dirs = session_dirs(server, path.name)
    assert len(dirs) == 1
    device_dir = dirs[0]
    assert wait_for(lambda: (device_dir / "metadata.txt").exists())
    assert (device_dir / "image.raw").read_bytes() == data
    record = read_evidence_record(device_dir)
    assert record.final_verdict.value == "verified"
    assert record.session_id == outcome.session_id

    kinds = [event.kind for event in events]
    assert kinds[0] == "prehash_started"
    assert "job_accepted" in kinds
    assert kinds[-1] == "job_finalized"
    assert kinds.count("chunk_acked") == TOTAL // CHUNK


def test_strict_server_refuses_plain_transport(tmp_path, evidence_file):
    path, _ = evidence_file
    config = ServerConfig(
        store_root=tmp_path / "strict-store",
        passphrase_digest=PASS_DIGEST,
        bind="127.0.0.1",
        port=0,
    )
    strict = Server(config).start()
    try:
        outcome, _ = run_acquire(strict, path)
        assert not outcome.verified
        assert outcome.failure_reason is FailureReason.DISCONNECTED
        assert session_dirs(strict, path.name) == []
    finally:
        strict.shutdown()


def test_wrong_passphrase_refused(server, evidence_file):
    path, _ = evidence_file
    outcome, _ = run_acquire(server, path, auth_secret=b"not the digest")
    assert not outcome.verified
    assert outcome.failure_reason is FailureReason.AUTH_REFUSED
    assert session_dirs(server, path.name) == []


def test_corrupted_chunks_are_nacked_and_retransmitted(server, evidence_file):
    path, data = evidence_file
    plan = FaultPlan(seed=5, corrupt_chunk_probability=0.3)
    events = []
    outcome, endpoint = run_acquire(server, path, fault_plan=plan, events=events)
    assert outcome.verified
    assert endpoint.corruption_count > 0
    assert outcome.nak_count == endpoint.corruption_count
    assert outcome.chunks_sent == TOTAL // CHUNK + endpoint.corruption_count

    nacked = [e.data["seq"] for e in events if e.kind == "chunk_nacked"]
    assert sorted(nacked) == sorted(endpoint.corrupted_seqs)

    device_dir = session_dirs(server, path.name)[0]
    assert wait_for(lambda: (device_dir / "metadata.txt").exists())
    assert (device_dir / "image.raw").read_bytes() == data
    log_text = (device_dir / "transfer.log").read_text()
    assert "ok=false" in log_text


def test_connection_drop_then_resume(server, evidence_file):
    path, data = evidence_file
    plan = FaultPlan(seed=0, drop_connection_after_bytes=TOTAL // 2)
    outcome, _ = run_acquire(server, path, fault_plan=plan)
    assert not outcome.verified
    assert outcome.failure_reason is FailureReason.DISCONNECTED

    dirs = session_dirs(server, path.name)
    assert len(dirs) == 1
    device_dir = dirs[0]
    # the server session sees the drop and closes; wait for quiesce
    assert wait_for(lambda: "session_closed" in
                    (device_dir / "transfer.log").read_text())
    partial = (device_dir / "image.raw").stat().st_size
    assert 0 < partial < TOTAL
    assert partial % CHUNK == 0
    assert (device_dir / "image.raw").read_bytes() == data[:partial]

    events = []
    second, _ = run_acquire(server, path, events=events)
    assert second.verified
    assert second.resumed_from == partial // CHUNK
    assert second.chunks_sent == TOTAL // CHUNK - second.resumed_from
    sent = [e.data["seq"] for e in events if e.kind == "chunk_sent"]
    assert min(sent) == second.resumed_from  # verified chunks are never resent

    assert session_dirs(server, path.name) == dirs  # same session directory
    assert wait_for(lambda: (device_dir / "metadata.txt").exists())
    assert (device_dir / "image.raw").read_bytes() == data


def test_resume_refused_when_source_changed(server, evidence_file):
    path, data = evidence_file
    plan = FaultPlan(seed=0, drop_connection_after_bytes=TOTAL // 2)
    outcome, _ = run_acquire(server, path, fault_plan=plan)
    assert not outcome.verified
    device_dir = session_dirs(server, path.name)[0]
    assert wait_for(lambda: "session_closed" in
                    (device_dir / "transfer.log").read_text())

    mutated = bytearray(data)
    mutated[0] ^= 0xFF
    path.write_bytes(bytes(mutated))
    second, _ = run_acquire(server, path)
    assert not second.verified
    assert second.failure_reason is FailureReason.PEER_ABORT


def test_three_concurrent_clients_distinct_devices(server, tmp_path):
    rng = random.Random(99)
    paths = []
    for name in ("sda.bin", "sdb.bin", "sdc.bin"):
        path = tmp_path / name
        path.write_bytes(rng.randbytes(TOTAL))
        paths.append(path)

    outcomes = {}

    def worker(path):
        outcomes[path.name], _ = run_acquire(server, path)

    threads = [threading.Thread(target=worker, args=(p,)) for p in paths]
    for thread in threads:
        thread.start()
    for thread in threads:
        thread.join()

    assert all(outcome.verified for outcome in outcomes.values())
    all_dirs = set()
    for path in paths:
        dirs = session_dirs(server, path.name)
        assert len(dirs) == 1
        assert wait_for(lambda d=dirs[0]: (d / "metadata.txt").exists())
        assert (dirs[0] / "image.raw").read_bytes() == path.read_bytes()
        all_dirs.update(dirs)
    assert len(all_dirs) == 3


def test_graceful_shutdown_leaves_resumable_store(tmp_path, evidence_file):
    path, data = evidence_file
    config = ServerConfig(
        store_root=tmp_path / "store",
        passphrase_digest=PASS_DIGEST,
        bind="127.0.0.1",
        port=0,
        insecure_transport_ok=True,
    )
    server = Server(config).start()
    plan = FaultPlan(seed=1, latency_fixed_ms=25.0)
    result = {}

    def client_job():
        result["outcome"], _ = run_acquire(server, path, fault_plan=plan)

    thread = threading.Thread(target=client_job)
    thread.start()

    def some_progress():
        dirs = session_dirs(server, path.name)
        return dirs and (dirs[0] / "image.raw").stat().st_size >= CHUNK

    assert wait_for(some_progress, timeout=20.0)
    server.shutdown()
    thread.join(timeout=30.0)
    assert not thread.is_alive()
    outcome = result["outcome"]
    assert not outcome.verified

    device_dir = session_dirs(server, path.name)[0]
    assert not (device_dir / "metadata.txt").exists()
    partial = (device_dir / "image.raw").stat().st_size
    assert partial % CHUNK == 0
    assert (device_dir / "image.raw").read_bytes() == data[:partial]

    # a fresh server over the same store resumes and completes the job
    second_server = Server(config).start()
    try:
        second, _ = run_acquire(second_server, path)
        assert second.verified
        assert wait_for(lambda: (device_dir / "metadata.txt").exists())
        assert (device_dir / "image.raw").read_bytes() == data
    finally:
        second_server.shutdown()
