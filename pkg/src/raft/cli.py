"""Command-line entry points.

Exit codes: 0 success, 2 usage or configuration problem, 3 domain
failure (transfer, store, devices), 4 authentication refused, 5
protocol violation. Logs go to stderr; machine-readable output goes to
stdout.
"""
from __future__ import annotations

import dataclasses
import hashlib
import logging
import signal
import sys
import threading
from pathlib import Path

import click

from .agent import Agent, lookup_bios_backdoor
from .config import ServerConfig, load_client_config
from .errors import (
    BindFailed,
    NoDevices,
    NonPositiveInput,
    RaftError,
    StoreUnwritable,
    UnknownAlgorithm,
)
from .hashing import digest_path
from .imaging import descriptor_for_file, open_source, split_to_files
from .model import HashAlgorithm
from .server import Server
from .timing import TimingInputs, bench_hash, estimate_total_time
from .transport import DEFAULT_PORT

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DOMAIN = 3
EXIT_AUTH = 4
EXIT_PROTOCOL = 5

DEFAULT_API_PORT = 8473

logger = logging.getLogger("raft.cli")


def _fail(code: int, message: str) -> None:
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _parse_algorithm(name: str) -> HashAlgorithm:
    try:
        return HashAlgorithm.parse(name)
    except UnknownAlgorithm:
        supported = ", ".join(a.value for a in HashAlgorithm)
        _fail(EXIT_USAGE, f"unknown algorithm {name!r}; supported: {supported}")


@click.group()
def main() -> None:
    """Remote forensic acquisition toolkit."""
    logging.basicConfig(
        level=logging.INFO,
        stream=sys.stderr,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )


@main.command()
@click.option("--store", "store_root", envvar="RAFT_STORE",
              type=click.Path(path_type=Path), required=True,
              help="Evidence store root directory.")
@click.option("--port", default=DEFAULT_PORT, show_default=True, type=int)
@click.option("--bind", default="127.0.0.1", show_default=True)
@click.option("--passphrase", envvar="RAFT_PASSPHRASE", required=True,
              help="Acquisition passphrase (env RAFT_PASSPHRASE).")
@click.option("--insecure", is_flag=True,
              help="Accept connections over unprotected transports.")
def server(store_root: Path, port: int, bind: str, passphrase: str,
           insecure: bool) -> None:
    """Run the acquisition server until interrupted."""
    try:
        store_root.mkdir(parents=True, exist_ok=True)
        probe = store_root / ".write-probe"
        probe.touch()
        probe.unlink()
    except OSError as exc:
        _fail(EXIT_USAGE, f"store root is not writable: {exc}")
    config = ServerConfig(
        store_root=store_root,
        passphrase_digest=hashlib.sha256(passphrase.encode()).hexdigest(),
        bind=bind,
        port=port,
        insecure_transport_ok=insecure,
    )
    try:
        instance = Server(config).start()
    except (BindFailed, StoreUnwritable) as exc:
        _fail(EXIT_USAGE, str(exc))
    click.echo(f"ready: listening on {bind}:{instance.port}", err=True)
    stop = threading.Event()

    # Installed explicitly so SIGINT works even when the process inherited
    # an ignored disposition (shells background jobs that way), and so
    # SIGTERM gets the same graceful shutdown as Ctrl-C.
    def request_stop(signum, frame):
        stop.set()

    signal.signal(signal.SIGINT, request_stop)
    signal.signal(signal.SIGTERM, request_stop)
    try:
        stop.wait()
        click.echo("shutting down", err=True)
    finally:
        instance.shutdown()


@main.command()
@click.option("--config", "config_path", envvar="RAFT_CONFIG", required=True,
              type=click.Path(path_type=Path),
              help="Client config file (env RAFT_CONFIG).")
@click.option("--headless", is_flag=True,
              help="Acquire without the console and exit.")
@click.option("--all", "acquire_everything", is_flag=True,
              help="With --headless: image every device in the scan root.")
@click.option("--api-port", default=DEFAULT_API_PORT, show_default=True,
              type=int, help="Control API port (console mode).")
@click.option("--ui-dir", type=click.Path(path_type=Path), default=None,
              help="Directory with the built operator console.")
@click.option("--insecure", is_flag=True,
              help="Allow sending evidence over unprotected transports.")
def client(config_path: Path, headless: bool, acquire_everything: bool,
           api_port: int, ui_dir: Path | None, insecure: bool) -> None:
    """Run the client agent, headless or serving the operator console."""
    try:
        config = load_client_config(config_path)
    except (OSError, ValueError) as exc:
        _fail(EXIT_USAGE, f"cannot load client config: {exc}")
    except RaftError as exc:
        _fail(EXIT_USAGE, f"bad client config: {exc}")
    if insecure:
        config = dataclasses.replace(config, insecure_transport_ok=True)

    try:
        agent = Agent(config)
    except RaftError as exc:
        _fail(EXIT_DOMAIN, str(exc))

    if headless:
        _run_headless(agent, acquire_everything)
        return

    import uvicorn

    from .control import make_app

    if ui_dir is None:
        candidate = Path.cwd() / "frontend" / "dist"
        ui_dir = candidate if candidate.is_dir() else None
    app = make_app(agent, ui_dir=ui_dir)
    click.echo(f"ready: control API on 127.0.0.1:{api_port}", err=True)
    uvicorn.run(app, host="127.0.0.1", port=api_port, log_level="warning")


def _run_headless(agent: Agent, acquire_everything: bool) -> None:
    if not acquire_everything:
        _fail(EXIT_USAGE, "headless mode requires --all")
    try:
        job_ids = agent.acquire_all()
    except NoDevices as exc:
        _fail(EXIT_DOMAIN, str(exc))
    agent.wait_idle()
    records = [agent.job(job_id) for job_id in job_ids]
    for record in records:
        click.echo(
            f"{record.device_id}\t{record.state.value}"
            f"\t{record.session_id}\t{record.detail}"
        )
    failed = [r for r in records if r.state.value != "verified"]
    if not failed:
        sys.exit(EXIT_OK)
    reasons = {r.failure_reason for r in failed}
    if "auth_refused" in reasons:
        sys.exit(EXIT_AUTH)
    if "protocol" in reasons:
        sys.exit(EXIT_PROTOCOL)
    sys.exit(EXIT_DOMAIN)


@main.command()
@click.argument("source", type=click.Path(exists=True, path_type=Path))
@click.option("--chunk-size", required=True, type=int)
@click.option("--hash", "algorithms", default="sha512", show_default=True,
              help="Comma-separated digest algorithms for the hash log.")
@click.option("--out", "out_dir", required=True,
              type=click.Path(path_type=Path))
def image(source: Path, chunk_size: int, algorithms: str,
          out_dir: Path) -> None:
    """Split SOURCE into chunk files with a windowed hash log."""
    algs = frozenset(_parse_algorithm(name)
                     for name in algorithms.split(","))
    descriptor = descriptor_for_file(source)
    try:
        with open_source(descriptor, source) as handle:
            result = split_to_files(handle, chunk_size, out_dir,
                                    algorithms=algs)
    except RaftError as exc:
        _fail(EXIT_DOMAIN, str(exc))
    for path in result.chunk_paths:
        click.echo(str(path))
    click.echo(str(result.hash_log_path))


@main.command(name="hash")
@click.argument("file", type=click.Path(exists=True, path_type=Path))
@click.option("--alg", default="sha512", show_default=True)
def hash_command(file: Path, alg: str) -> None:
    """Digest FILE, printing lowercase hex and the algorithm name."""
    algorithm = _parse_algorithm(alg)
    try:
        digest = digest_path(file, algorithm)
    except RaftError as exc:
        _fail(EXIT_DOMAIN, str(exc))
    click.echo(f"{digest.hex}  {algorithm.value}")


@main.command()
@click.option("--sizes", default="64,128,256", show_default=True,
              help="Comma-separated file sizes in MiB.")
@click.option("--algs", default="sha256,sha512", show_default=True)
@click.option("--workdir", type=click.Path(path_type=Path),
              default=Path(".raft-bench"), show_default=True)
@click.option("--repeats", default=2, show_default=True, type=int)
@click.option("--out", "out_path", type=click.Path(path_type=Path),
              default=None, help="Also write the TSV report to this file.")
def bench(sizes: str, algs: str, workdir: Path, repeats: int,
          out_path: Path | None) -> None:
    """Benchmark hash throughput over zero-filled fixture files."""
    try:
        size_list = [int(s) * (1 << 20) for s in sizes.split(",")]
    except ValueError:
        _fail(EXIT_USAGE, f"bad --sizes value: {sizes!r}")
    algorithms = [_parse_algorithm(name) for name in algs.split(",")]
    try:
        report = bench_hash(size_list, algorithms, workdir, repeats=repeats)
    except RaftError as exc:
        _fail(EXIT_DOMAIN, str(exc))
    text = report.to_tsv()
    if out_path is not None:
        out_path.write_text(text, encoding="utf-8")
    click.echo(text, nl=False)


@main.command()
@click.option("--h-bits", "--H", "h_bits", required=True, type=float,
              help="Image size in bits.")
@click.option("--b-bits", "--B", "b_bits", required=True, type=float,
              help="Upload bandwidth in bits per second.")
@click.option("--c-bits", "--C", "c_bits", required=True, type=float,
              help="Chunk size in bits.")
@click.option("--v-bits", "--V", "v_bits", required=True, type=float,
              help="Verification throughput in bits per second.")
@click.option("--corrupt-probability", default=0.0, show_default=True,
              type=float)
@click.option("--retries", default=0, show_default=True, type=int)
def estimate(h_bits: float, b_bits: float, c_bits: float, v_bits: float,
             corrupt_probability: float, retries: int) -> None:
    """Estimate total acquisition seconds."""
    try:
        inputs = TimingInputs(h_bits=h_bits, b_bits_per_s=b_bits,
                              c_bits=c_bits, v_bits_per_s=v_bits)
        seconds = estimate_total_time(
            inputs, corrupt_probability=corrupt_probability, retries=retries
        )
    except NonPositiveInput as exc:
        _fail(EXIT_DOMAIN, str(exc))
    click.echo(f"{seconds:g}")


@main.command(name="bios-lookup")
@click.argument("manufacturer")
def bios_lookup(manufacturer: str) -> None:
    """Print candidate backdoor BIOS passwords for MANUFACTURER."""
    result = lookup_bios_backdoor(manufacturer)
    if result.advisory:
        click.echo(result.advisory, err=True)
    for password in result.passwords:
        click.echo(password)


if __name__ == "__main__":
    main()
