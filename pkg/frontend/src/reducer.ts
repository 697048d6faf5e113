/** Pure view-model reducer over control-API events.
 *
 * Every update returns fresh objects, so replaying a recorded stream
 * always reproduces the identical state and nothing the UI shows is
 * console-local truth.
 */

import type {
  ApiEvent,
  Banner,
  ChunkCell,
  ConnectionPhase,
  ConsoleState,
  DeviceRow,
  DevicesResponse,
  JobProgress,
  JobRow,
  LogLine,
  SelectionState,
} from "./types.js";

export function initialState(): ConsoleState {
  return {
    unlocked: false,
    lockedOut: false,
    devices: {},
    deviceOrder: [],
    jobs: {},
    jobOrder: [],
    activeJobId: null,
    lastFinishedJobId: null,
    log: [],
    lastEventId: 0,
    connection: "connecting",
  };
}

function asNumber(value: unknown, fallback = 0): number {
  return typeof value === "number" ? value : fallback;
}

function asString(value: unknown, fallback = ""): string {
  return typeof value === "string" ? value : fallback;
}

function emptyJob(jobId: string, deviceId: string): JobProgress {
  return {
    jobId,
    deviceId,
    label: deviceId,
    phase: "starting",
    totalBytes: null,
    sessionId: null,
    resumedFrom: 0,
    wholeImageDigest: null,
    chunks: {},
    sentCount: 0,
    ackedCount: 0,
    nakCount: 0,
    verdict: null,
    failureDetail: null,
    lastError: null,
  };
}

function withJob(
  state: ConsoleState,
  event: ApiEvent,
  update: (job: JobProgress) => JobProgress,
): ConsoleState {
  const existing = state.jobs[event.job_id];
  const base = existing ?? emptyJob(event.job_id, event.device_id);
  const jobOrder = existing
    ? state.jobOrder
    : [...state.jobOrder, event.job_id];
  return {
    ...state,
    jobs: { ...state.jobs, [event.job_id]: update(base) },
    jobOrder,
  };
}

function withChunk(
  job: JobProgress,
  seq: number,
  update: (cell: ChunkCell) => ChunkCell,
): JobProgress {
  const cell = job.chunks[seq] ?? { seq, phase: "sent" as const, attempts: 0 };
  return { ...job, chunks: { ...job.chunks, [seq]: update(cell) } };
}

function setDeviceState(
  state: ConsoleState,
  deviceId: string,
  selection: SelectionState,
  detail = "",
): ConsoleState {
  const device = state.devices[deviceId];
  if (device === undefined) {
    return state;
  }
  return {
    ...state,
    devices: {
      ...state.devices,
      [deviceId]: { ...device, state: selection, detail },
    },
  };
}

function shortDigest(digest: string): string {
  return digest.length > 16 ? `${digest.slice(0, 16)}…` : digest;
}

function describe(event: ApiEvent): string {
  const d = event.data;
  const job = event.job_id;
  switch (event.kind) {
    case "device_listed":
      return `device ${event.device_id} (${asNumber(d["total_bytes"])} bytes)`;
    case "unlocked":
      return "console unlocked";
    case "job_started":
      return `${job} started for ${event.device_id}`;
    case "prehash_started":
      return `${job} prehash over ${asNumber(d["total_bytes"])} bytes`;
    case "prehash_done":
      return `${job} prehash ${shortDigest(asString(d["digest"]))}`;
    case "authenticated":
      return `${job} authenticated`;
    case "job_accepted":
      return `${job} session ${asString(d["session_id"])}, resume from ${asNumber(d["resume_from"])}`;
    case "chunk_sent":
      return `${job} chunk ${asNumber(d["seq"])} sent`;
    case "chunk_acked":
      return `${job} chunk ${asNumber(d["seq"])} acked`;
    case "chunk_nacked":
      return (
        `${job} chunk ${asNumber(d["seq"])} rejected ` +
        `(attempt ${asNumber(d["attempt"])}): ${asString(d["reason"])}`
      );
    case "job_finalized":
      return `${job} finalized: ${asString(d["verdict"])}`;
    case "job_failed":
      return `${job} failed: ${asString(d["detail"], asString(d["reason"]))}`;
    case "job_aborted":
      return `${job} aborted before start`;
    case "job_finished":
      return `${job} finished: ${asString(d["verdict"])}`;
    case "disconnected":
      return `${job} connection lost: ${asString(d["detail"])}`;
    case "error":
      return `${job} error: ${asString(d["detail"])}`;
    default:
      return event.kind;
  }
}

export function reduce(state: ConsoleState, event: ApiEvent): ConsoleState {
  const line: LogLine = {
    eventId: event.event_id,
    at: event.at,
    text: describe(event),
  };
  let next: ConsoleState = {
    ...state,
    log: [...state.log, line],
    lastEventId: Math.max(state.lastEventId, event.event_id),
  };
  const d = event.data;

  switch (event.kind) {
    case "device_listed": {
      const existing = next.devices[event.device_id];
      const row: DeviceRow = {
        device_id: event.device_id,
        label: asString(d["label"], event.device_id),
        total_bytes: asNumber(d["total_bytes"]),
        state: asString(d["state"], "unselected") as SelectionState,
        priority: existing?.priority ?? 0,
        detail: existing?.detail ?? "",
      };
      return {
        ...next,
        devices: { ...next.devices, [event.device_id]: row },
        deviceOrder: existing
          ? next.deviceOrder
          : [...next.deviceOrder, event.device_id],
      };
    }

    case "unlocked":
      return { ...next, unlocked: true, lockedOut: false };

    case "job_started":
      next = withJob(next, event, (jobProgress) => ({
        ...jobProgress,
        label: asString(d["label"], event.device_id),
        phase: "starting",
      }));
      next = setDeviceState(next, event.device_id, "active");
      return { ...next, activeJobId: event.job_id };

    case "prehash_started":
      return withJob(next, event, (jobProgress) => ({
        ...jobProgress,
        phase: "prehash",
        totalBytes: asNumber(d["total_bytes"]),
      }));

    case "prehash_done":
      return withJob(next, event, (jobProgress) => ({
        ...jobProgress,
        phase: "handshake",
        wholeImageDigest: asString(d["digest"]),
      }));

    case "authenticated":
      return withJob(next, event, (jobProgress) => ({
        ...jobProgress,
        phase: "handshake",
      }));

    case "job_accepted":
      return withJob(next, event, (jobProgress) => ({
        ...jobProgress,
        phase: "transfer",
        sessionId: asString(d["session_id"]),
        resumedFrom: asNumber(d["resume_from"]),
      }));

    case "chunk_sent":
      return withJob(next, event, (jobProgress) => {
        const updated = withChunk(jobProgress, asNumber(d["seq"]), (cell) => ({
          ...cell,
          phase: "sent",
        }));
        return { ...updated, sentCount: updated.sentCount + 1 };
      });

    case "chunk_acked":
      return withJob(next, event, (jobProgress) => {
        const updated = withChunk(jobProgress, asNumber(d["seq"]), (cell) => ({
          ...cell,
          phase: "acked",
        }));
        return { ...updated, ackedCount: updated.ackedCount + 1 };
      });

    case "chunk_nacked":
      return withJob(next, event, (jobProgress) => {
        const attempt = asNumber(d["attempt"]);
        const updated = withChunk(jobProgress, asNumber(d["seq"]), (cell) => ({
          ...cell,
          phase: "retrying",
          attempts: Math.max(cell.attempts, attempt),
        }));
        return { ...updated, nakCount: updated.nakCount + 1 };
      });

    case "job_finalized":
      return withJob(next, event, (jobProgress) => ({
        ...jobProgress,
        phase: "finished",
        verdict: asString(d["verdict"]) === "verified" ? "verified" : "failed",
      }));

    case "job_failed":
      return withJob(next, event, (jobProgress) => ({
        ...jobProgress,
        phase: "finished",
        verdict: "failed",
        failureDetail: asString(d["detail"], asString(d["reason"])),
      }));

    case "job_aborted":
      next = withJob(next, event, (jobProgress) => ({
        ...jobProgress,
        phase: "finished",
        verdict: "failed",
        failureDetail: "aborted before start",
      }));
      return setDeviceState(next, event.device_id, "unselected");

    case "job_finished": {
      const verified = asString(d["verdict"]) === "verified";
      next = withJob(next, event, (jobProgress) => ({
        ...jobProgress,
        phase: "finished",
        verdict: verified ? "verified" : "failed",
        failureDetail: verified
          ? jobProgress.failureDetail
          : asString(d["detail"], jobProgress.failureDetail ?? ""),
      }));
      next = setDeviceState(
        next,
        event.device_id,
        verified ? "done" : "failed",
        asString(d["detail"]),
      );
      return {
        ...next,
        activeJobId: next.activeJobId === event.job_id ? null : next.activeJobId,
        lastFinishedJobId: event.job_id,
      };
    }

    case "disconnected":
    case "error":
      return withJob(next, event, (jobProgress) => ({
        ...jobProgress,
        lastError: asString(d["detail"]),
      }));

    default:
      return next;
  }
}

/** Merge a GET /devices response; the agent's answer replaces local rows. */
export function applyDevices(
  state: ConsoleState,
  response: DevicesResponse,
): ConsoleState {
  const devices: Record<string, DeviceRow> = {};
  const deviceOrder: string[] = [];
  for (const row of response.devices) {
    devices[row.device_id] = row;
    deviceOrder.push(row.device_id);
  }
  return { ...state, devices, deviceOrder, lockedOut: response.locked };
}

/** Merge a GET /jobs response for jobs the event stream has not covered. */
export function applyJobs(state: ConsoleState, rows: JobRow[]): ConsoleState {
  let next = state;
  for (const row of rows) {
    if (next.jobs[row.job_id] !== undefined) {
      continue;
    }
    const job: JobProgress = {
      ...emptyJob(row.job_id, row.device_id),
      phase: row.state === "queued" || row.state === "running"
        ? "starting"
        : "finished",
      sessionId: row.session_id || null,
      sentCount: row.chunks_sent,
      nakCount: row.nak_count,
      resumedFrom: row.resumed_from,
      verdict: row.state === "verified"
        ? "verified"
        : row.state === "failed"
          ? "failed"
          : null,
      failureDetail: row.detail || null,
    };
    next = {
      ...next,
      jobs: { ...next.jobs, [row.job_id]: job },
      jobOrder: [...next.jobOrder, row.job_id],
    };
  }
  return next;
}

export function setConnection(
  state: ConsoleState,
  connection: ConnectionPhase,
): ConsoleState {
  return state.connection === connection ? state : { ...state, connection };
}

/** Chunks that were rejected at least once, mapped to their attempt count. */
export function retryMarkers(job: JobProgress): Record<number, number> {
  const markers: Record<number, number> = {};
  for (const cell of Object.values(job.chunks)) {
    if (cell.attempts > 0) {
      markers[cell.seq] = cell.attempts;
    }
  }
  return markers;
}

export function banner(state: ConsoleState): Banner {
  if (state.activeJobId !== null) {
    const job = state.jobs[state.activeJobId];
    if (job !== undefined) {
      return { tone: "working", jobId: job.jobId, label: job.label };
    }
  }
  if (state.lastFinishedJobId !== null) {
    const job = state.jobs[state.lastFinishedJobId];
    if (job !== undefined && job.verdict === "verified") {
      return {
        tone: "verified",
        jobId: job.jobId,
        label: job.label,
        digest: job.wholeImageDigest,
      };
    }
    if (job !== undefined) {
      return {
        tone: "failed",
        jobId: job.jobId,
        label: job.label,
        detail: job.failureDetail ?? "",
      };
    }
  }
  return { tone: "idle" };
}
