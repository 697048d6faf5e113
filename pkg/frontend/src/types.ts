/** Wire shapes of the control API, mirrored field for field. */

export interface ApiEvent {
  event_id: number;
  at: string;
  kind: string;
  job_id: string;
  device_id: string;
  data: Record<string, unknown>;
}

export type SelectionState =
  | "unselected"
  | "queued"
  | "active"
  | "done"
  | "failed";

export interface DeviceRow {
  device_id: string;
  label: string;
  total_bytes: number;
  state: SelectionState;
  priority: number;
  detail: string;
}

export interface DevicesResponse {
  locked: boolean;
  devices: DeviceRow[];
}

export interface JobRow {
  job_id: string;
  device_id: string;
  state: "queued" | "running" | "verified" | "failed";
  session_id: string;
  chunks_sent: number;
  nak_count: number;
  resumed_from: number;
  detail: string;
}

/** View-model state, derived purely from API responses and the event stream. */

export type ChunkPhase = "sent" | "acked" | "retrying";

export interface ChunkCell {
  seq: number;
  phase: ChunkPhase;
  /** How many times the server has rejected this chunk so far. */
  attempts: number;
}

export type JobPhase =
  | "starting"
  | "prehash"
  | "handshake"
  | "transfer"
  | "finished";

export interface JobProgress {
  jobId: string;
  deviceId: string;
  label: string;
  phase: JobPhase;
  totalBytes: number | null;
  sessionId: string | null;
  resumedFrom: number;
  wholeImageDigest: string | null;
  chunks: Record<number, ChunkCell>;
  sentCount: number;
  ackedCount: number;
  nakCount: number;
  verdict: "verified" | "failed" | null;
  failureDetail: string | null;
  lastError: string | null;
}

export interface LogLine {
  eventId: number;
  at: string;
  text: string;
}

export type ConnectionPhase = "connecting" | "live" | "reconnecting";

export interface ConsoleState {
  unlocked: boolean;
  /** True when the agent refuses further unlock attempts. */
  lockedOut: boolean;
  devices: Record<string, DeviceRow>;
  deviceOrder: string[];
  jobs: Record<string, JobProgress>;
  jobOrder: string[];
  activeJobId: string | null;
  lastFinishedJobId: string | null;
  log: LogLine[];
  lastEventId: number;
  connection: ConnectionPhase;
}

export type Banner =
  | { tone: "idle" }
  | { tone: "working"; jobId: string; label: string }
  | { tone: "verified"; jobId: string; label: string; digest: string | null }
  | { tone: "failed"; jobId: string; label: string; detail: string };
