"""Local HTTP control surface for the client agent.

Serves the operator console: inventory, unlock, queue editing, run
control, job status, and a server-sent-event stream of progress events.
Binds loopback only by default (the CLI enforces that); every mutating
route requires the session token issued by POST /unlock in the
X-Session-Token header. Reads are open so the console can render the
device list before the operator unlocks.

Request and response bodies are documented in docs/control-api.md.
"""
from __future__ import annotations

import json
from pathlib import Path

from fastapi import FastAPI, Header, Request
from fastapi.responses import StreamingResponse
from fastapi.staticfiles import StaticFiles
from pydantic import BaseModel, Field

from .agent import Agent, AgentEvent, DeviceEntry
from .errors import (
    AuthRequired,
    BadPassphrase,
    DeviceActive,
    DuplicatePriority,
    JobActive,
    JobNotActive,
    Locked,
    NoDevices,
    RaftError,
    UnknownDevice,
    UnknownJob,
)

_STATUS_BY_ERROR = {
    AuthRequired: 401,
    BadPassphrase: 401,
    Locked: 423,
    UnknownDevice: 404,
    UnknownJob: 404,
    DeviceActive: 409,
    JobActive: 409,
    JobNotActive: 409,
    NoDevices: 409,
    DuplicatePriority: 422,
}

SSE_POLL_SECONDS = 0.25


class DeviceView(BaseModel):
    device_id: str
    label: str
    total_bytes: int
    state: str
    priority: int | None = None
    detail: str = ""


class DevicesResponse(BaseModel):
    locked: bool
    devices: list[DeviceView]


class UnlockRequest(BaseModel):
    passphrase: str


class UnlockResponse(BaseModel):
    token: str


class AcquireRequest(BaseModel):
    mode: str = Field(pattern="^(all|selected)$")


class AcquireResponse(BaseModel):
    job_ids: list[str]


class JobView(BaseModel):
    job_id: str
    device_id: str
    state: str
    session_id: str = ""
    chunks_sent: int = 0
    nak_count: int = 0
    resumed_from: int = 0
    detail: str = ""


def _device_view(entry: DeviceEntry) -> DeviceView:
    return DeviceView(
        device_id=entry.descriptor.device_id,
        label=entry.descriptor.label,
        total_bytes=entry.descriptor.total_bytes,
        state=entry.state.value,
        priority=entry.priority,
        detail=entry.detail,
    )


def _job_view(record) -> JobView:
    return JobView(
        job_id=record.job_id,
        device_id=record.device_id,
        state=record.state.value,
        session_id=record.session_id,
        chunks_sent=record.chunks_sent,
        nak_count=record.nak_count,
        resumed_from=record.resumed_from,
        detail=record.detail,
    )


def _sse_line(event: AgentEvent) -> str:
    body = json.dumps(
        {
            "event_id": event.event_id,
            "at": event.at,
            "kind": event.kind,
            "job_id": event.job_id,
            "device_id": event.device_id,
            "data": event.data,
        },
        separators=(",", ":"),
    )
    return f"id: {event.event_id}\nevent: progress\ndata: {body}\n\n"


def make_app(agent: Agent, ui_dir: Path | None = None) -> FastAPI:
    app = FastAPI(title="acquisition agent control API", docs_url=None,
                  redoc_url=None)

    @app.exception_handler(RaftError)
    async def map_domain_errors(request: Request, exc: RaftError):
        from fastapi.responses import JSONResponse

        status = _STATUS_BY_ERROR.get(type(exc), 500)
        return JSONResponse(status_code=status, content={"detail": str(exc)})

    @app.get("/health")
    def health() -> dict:
        return {"status": "ok"}

    @app.get("/devices", response_model=DevicesResponse)
    def devices() -> DevicesResponse:
        return DevicesResponse(
            locked=agent.locked,
            devices=[_device_view(e) for e in agent.devices()],
        )

    @app.post("/unlock", response_model=UnlockResponse)
    def unlock(body: UnlockRequest) -> UnlockResponse:
        return UnlockResponse(token=agent.unlock(body.passphrase))

    @app.post("/queue", response_model=DevicesResponse)
    def queue(
        priorities: dict[str, int],
        x_session_token: str | None = Header(default=None),
    ) -> DevicesResponse:
        agent.check_token(x_session_token)
        entries = agent.set_priorities(priorities)
        return DevicesResponse(
            locked=agent.locked,
            devices=[_device_view(e) for e in entries],
        )

    @app.post("/acquire", response_model=AcquireResponse)
    def acquire(
        body: AcquireRequest,
        x_session_token: str | None = Header(default=None),
    ) -> AcquireResponse:
        agent.check_token(x_session_token)
        if body.mode == "all":
            return AcquireResponse(job_ids=agent.acquire_all())
        return AcquireResponse(job_ids=agent.acquire_selected())

    @app.get("/jobs", response_model=list[JobView])
    def jobs() -> list[JobView]:
        return [_job_view(record) for record in agent.jobs()]

    @app.get("/jobs/{job_id}", response_model=JobView)
    def job(job_id: str) -> JobView:
        return _job_view(agent.job(job_id))

    @app.post("/abort/{job_id}", response_model=JobView)
    def abort(
        job_id: str,
        x_session_token: str | None = Header(default=None),
    ) -> JobView:
        agent.check_token(x_session_token)
        agent.abort(job_id)
        return _job_view(agent.job(job_id))

    @app.get("/events")
    def events(
        request: Request,
        last_event_id: str | None = Header(default=None),
        limit: int | None = None,
    ) -> StreamingResponse:
        """Progress events as SSE; replays history after Last-Event-ID.

        Without the header the full history is replayed, so a console
        reconnecting mid-run sees every event from job start. `limit`
        closes the stream after that many events (diagnostic aid).
        """
        try:
            cursor = int(last_event_id) if last_event_id else 0
        except ValueError:
            cursor = 0

        def stream():
            sent = 0
            last = cursor
            while True:
                fresh = agent.wait_events(last, timeout=SSE_POLL_SECONDS)
                if not fresh:
                    yield ": keepalive\n\n"
                    continue
                for event in fresh:
                    yield _sse_line(event)
                    last = event.event_id
                    sent += 1
                    if limit is not None and sent >= limit:
                        return

        return StreamingResponse(stream(), media_type="text/event-stream")

    if ui_dir is not None and Path(ui_dir).is_dir():
        app.mount("/ui", StaticFiles(directory=ui_dir, html=True), name="ui")

    return app
