import { describe, expect, test } from "vitest";

import { applyDevices, initialState, reduce } from "../src/reducer.js";
import type { ApiEvent, ConsoleState } from "../src/types.js";
import {
  escapeHtml,
  renderApp,
  renderBanner,
  renderDevices,
  renderJob,
  renderUnlock,
} from "../src/views.js";

function event(
  id: number,
  kind: string,
  jobId: string,
  deviceId: string,
  data: Record<string, unknown> = {},
): ApiEvent {
  return {
    event_id: id,
    at: "2026-08-19T00:00:00Z",
    kind,
    job_id: jobId,
    device_id: deviceId,
    data,
  };
}

function withDevices(
  rows: Array<{ id: string; state: string; priority?: number }>,
): ConsoleState {
  return applyDevices(initialState(), {
    locked: false,
    devices: rows.map((row) => ({
      device_id: row.id,
      label: row.id,
      total_bytes: 1 << 20,
      state: row.state as never,
      priority: row.priority ?? 0,
      detail: "",
    })),
  });
}

describe("unlock panel", () => {
  test("locked console disables the passphrase input", () => {
    const html = renderUnlock({ ...initialState(), lockedOut: true });
    expect(html).toContain("disabled");
    expect(html).toContain("Console locked");
  });

  test("app shows only the unlock panel before unlocking", () => {
    const html = renderApp(initialState());
    expect(html).toContain("unlock-form");
    expect(html).not.toContain("device-table");
  });
});

describe("device panel", () => {
  test("empty inventory renders guidance instead of a table", () => {
    const html = renderDevices(withDevices([]));
    expect(html).toContain("No storage devices found");
    expect(html).not.toContain("<table");
  });

  test("acquire selected stays disabled until something is queued", () => {
    const idle = renderDevices(withDevices([{ id: "sda", state: "unselected" }]));
    expect(idle).toMatch(/id="acquire-selected"[^>]*disabled/);
    const queued = renderDevices(
      withDevices([{ id: "sda", state: "queued", priority: 1 }]),
    );
    expect(queued).not.toMatch(/id="acquire-selected"[^>]*disabled/);
  });

  test("priority values round-trip into the inputs", () => {
    const html = renderDevices(
      withDevices([{ id: "sda", state: "queued", priority: 3 }]),
    );
    expect(html).toContain('value="3"');
  });
});

describe("progress panel", () => {
  test("retried chunk cells carry the attempt count", () => {
    let state = initialState();
    state = reduce(state, event(1, "job_started", "job-1", "sda", {}));
    state = reduce(state, event(2, "chunk_sent", "job-1", "sda", { seq: 0 }));
    state = reduce(
      state,
      event(3, "chunk_nacked", "job-1", "sda", {
        seq: 0,
        attempt: 2,
        reason: "chunk digest mismatch",
      }),
    );
    const html = renderJob(state, state.jobs["job-1"]!);
    expect(html).toContain("chunk-retrying");
    expect(html).toContain("2 retries");
  });

  test("a finished job offers no abort button", () => {
    let state = initialState();
    state = reduce(state, event(1, "job_started", "job-1", "sda", {}));
    const running = renderJob(state, state.jobs["job-1"]!);
    expect(running).toContain('data-action="abort"');
    state = reduce(
      state,
      event(2, "job_finished", "job-1", "sda", { verdict: "verified", detail: "" }),
    );
    const finished = renderJob(state, state.jobs["job-1"]!);
    expect(finished).not.toContain('data-action="abort"');
  });
});

describe("verdict banner", () => {
  test("verified banner carries the whole-image digest", () => {
    const html = renderBanner({
      tone: "verified",
      jobId: "job-1",
      label: "sda",
      digest: "abc123",
    });
    expect(html).toContain("banner-verified");
    expect(html).toContain("abc123");
  });

  test("failure banner carries the detail", () => {
    const html = renderBanner({
      tone: "failed",
      jobId: "job-1",
      label: "sda",
      detail: "final digest mismatch",
    });
    expect(html).toContain("banner-failed");
    expect(html).toContain("final digest mismatch");
  });
});

describe("escaping", () => {
  test("markup in device names never reaches the page raw", () => {
    expect(escapeHtml("<img src=x>")).toBe("&lt;img src=x&gt;");
    const state = withDevices([{ id: "<script>alert(1)</script>", state: "unselected" }]);
    const html = renderDevices(state);
    expect(html).not.toContain("<script>alert");
  });
});
