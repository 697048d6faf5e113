/** HTML renderers for the console. Pure functions from state to markup,
 * so they can be checked without a browser. All dynamic text is escaped.
 */

import { banner, retryMarkers } from "./reducer.js";
import type {
  Banner,
  ConsoleState,
  DeviceRow,
  JobProgress,
} from "./types.js";

export function escapeHtml(text: string): string {
  return text
    .replaceAll("&", "&amp;")
    .replaceAll("<", "&lt;")
    .replaceAll(">", "&gt;")
    .replaceAll('"', "&quot;");
}

function formatBytes(total: number): string {
  if (total >= 1 << 30) {
    return `${(total / (1 << 30)).toFixed(1)} GiB`;
  }
  if (total >= 1 << 20) {
    return `${(total / (1 << 20)).toFixed(1)} MiB`;
  }
  if (total >= 1 << 10) {
    return `${(total / (1 << 10)).toFixed(1)} KiB`;
  }
  return `${total} B`;
}

export function renderConnectionBadge(state: ConsoleState): string {
  const labels = {
    connecting: "connecting",
    live: "live",
    reconnecting: "reconnecting…",
  } as const;
  return (
    `<span class="badge badge-${state.connection}">` +
    `${labels[state.connection]}</span>`
  );
}

export function renderUnlock(state: ConsoleState): string {
  const disabled = state.lockedOut ? " disabled" : "";
  const note = state.lockedOut
    ? '<p class="error">Console locked: too many failed attempts. ' +
      "Restart the agent to try again.</p>"
    : "";
  return `
    <section class="panel unlock-panel">
      <h2>Unlock</h2>
      <p>Enter the case passphrase to reach the device console.</p>
      <form id="unlock-form">
        <input type="password" id="passphrase" name="passphrase"
               placeholder="passphrase" autocomplete="off"${disabled}>
        <button type="submit"${disabled}>Unlock</button>
      </form>
      ${note}
      <p class="error" id="unlock-error"></p>
    </section>`;
}

function deviceRowHtml(device: DeviceRow): string {
  const priority = device.priority > 0 ? String(device.priority) : "";
  const detail = device.detail
    ? `<div class="detail">${escapeHtml(device.detail)}</div>`
    : "";
  return `
    <tr data-device="${escapeHtml(device.device_id)}">
      <td>${escapeHtml(device.label)}</td>
      <td>${formatBytes(device.total_bytes)}</td>
      <td><span class="state state-${device.state}">${device.state}</span>${detail}</td>
      <td>
        <input type="number" min="1" class="priority-input"
               data-device="${escapeHtml(device.device_id)}"
               value="${priority}" placeholder="-">
      </td>
    </tr>`;
}

export function renderDevices(state: ConsoleState): string {
  const rows = state.deviceOrder
    .map((id) => state.devices[id])
    .filter((row): row is DeviceRow => row !== undefined);
  if (rows.length === 0) {
    return `
      <section class="panel">
        <h2>Devices</h2>
        <p class="guidance">No storage devices found under the scan root.
        Attach evidence media and restart the agent.</p>
      </section>`;
  }
  const anyQueued = rows.some((row) => row.state === "queued");
  const selectedDisabled = anyQueued ? "" : " disabled";
  return `
    <section class="panel">
      <h2>Devices</h2>
      <table class="device-table">
        <thead>
          <tr><th>Device</th><th>Size</th><th>State</th><th>Priority</th></tr>
        </thead>
        <tbody>${rows.map(deviceRowHtml).join("")}</tbody>
      </table>
      <div class="actions">
        <button id="apply-priorities" data-action="apply-priorities">
          Apply priorities</button>
        <button id="collect-all" data-action="collect-all">
          Collect All Evidence</button>
        <button id="acquire-selected" data-action="acquire-selected"${selectedDisabled}>
          Acquire Selected</button>
      </div>
      <p class="error" id="queue-error"></p>
    </section>`;
}

function chunkCellHtml(job: JobProgress, seq: number): string {
  const cell = job.chunks[seq];
  if (cell === undefined) {
    return `<span class="chunk chunk-pending" title="chunk ${seq}"></span>`;
  }
  const title =
    cell.attempts > 0
      ? `chunk ${seq}: ${cell.phase}, ${cell.attempts} retr${cell.attempts === 1 ? "y" : "ies"}`
      : `chunk ${seq}: ${cell.phase}`;
  const retry = cell.attempts > 0 ? ` chunk-retried` : "";
  return (
    `<span class="chunk chunk-${cell.phase}${retry}" title="${title}">` +
    `${cell.attempts > 0 ? cell.attempts : ""}</span>`
  );
}

export function renderJob(state: ConsoleState, job: JobProgress): string {
  const seqs = Object.keys(job.chunks)
    .map(Number)
    .sort((a, b) => a - b);
  const highest = seqs.length > 0 ? Math.max(...seqs) : -1;
  const grid = Array.from({ length: highest + 1 }, (_, seq) =>
    chunkCellHtml(job, seq),
  ).join("");
  const phaseLine =
    job.phase === "finished"
      ? `verdict: ${job.verdict ?? "unknown"}`
      : `phase: ${job.phase}`;
  const counts =
    `sent ${job.sentCount} / acked ${job.ackedCount} / ` +
    `rejected ${job.nakCount}`;
  const resume =
    job.resumedFrom > 0 ? ` (resumed from chunk ${job.resumedFrom})` : "";
  const error = job.lastError
    ? `<p class="error">${escapeHtml(job.lastError)}</p>`
    : "";
  const failure = job.failureDetail
    ? `<p class="error">${escapeHtml(job.failureDetail)}</p>`
    : "";
  const abortable = job.phase !== "finished";
  const abortButton = abortable
    ? `<button data-action="abort" data-job="${escapeHtml(job.jobId)}">Abort</button>`
    : "";
  return `
    <section class="panel job-panel" data-job="${escapeHtml(job.jobId)}">
      <h3>${escapeHtml(job.jobId)}: ${escapeHtml(job.label)}</h3>
      <p>${escapeHtml(phaseLine)}${resume}</p>
      <p class="counts">${counts}</p>
      <div class="chunk-grid">${grid}</div>
      ${error}${failure}${abortButton}
    </section>`;
}

export function renderBanner(current: Banner): string {
  switch (current.tone) {
    case "idle":
      return `<div class="banner banner-idle">Idle: no acquisition running.</div>`;
    case "working":
      return (
        `<div class="banner banner-working">Acquiring ` +
        `${escapeHtml(current.label)} (${escapeHtml(current.jobId)})…</div>`
      );
    case "verified":
      return (
        `<div class="banner banner-verified">VERIFIED: ` +
        `${escapeHtml(current.label)} acquired and re-verified.` +
        (current.digest !== null
          ? `<code class="digest">${escapeHtml(current.digest)}</code>`
          : "") +
        `</div>`
      );
    case "failed":
      return (
        `<div class="banner banner-failed">FAILED: ` +
        `${escapeHtml(current.label)}: ${escapeHtml(current.detail)}</div>`
      );
  }
}

export function renderLog(state: ConsoleState): string {
  const lines = state.log
    .slice(-200)
    .map(
      (line) =>
        `<div class="log-line"><span class="log-id">#${line.eventId}</span> ` +
        `${escapeHtml(line.text)}</div>`,
    )
    .join("");
  return `
    <section class="panel log-panel">
      <h2>Event log</h2>
      <div class="log">${lines}</div>
    </section>`;
}

function renderJobs(state: ConsoleState): string {
  const jobs = state.jobOrder
    .map((id) => state.jobs[id])
    .filter((job): job is JobProgress => job !== undefined);
  if (jobs.length === 0) {
    return "";
  }
  return jobs.map((job) => renderJob(state, job)).join("");
}

export function renderApp(state: ConsoleState): string {
  const header = `
    <header>
      <h1>Acquisition console</h1>
      ${renderConnectionBadge(state)}
    </header>`;
  if (!state.unlocked) {
    return `${header}${renderUnlock(state)}`;
  }
  return [
    header,
    renderBanner(banner(state)),
    renderDevices(state),
    renderJobs(state),
    renderLog(state),
  ].join("");
}

/** Retry markers for display or assertion, re-exported for convenience. */
export { retryMarkers };
