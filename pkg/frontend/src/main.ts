/** Browser entry point: wires the pure reducer and renderers to the DOM.
 *
 * The session token is held in a local variable and nowhere else; a page
 * refresh forgets it and the operator unlocks again.
 */

import { ApiClient, ApiError, subscribeEvents } from "./api.js";
import {
  applyDevices,
  applyJobs,
  initialState,
  reduce,
  setConnection,
} from "./reducer.js";
import type { ConsoleState } from "./types.js";
import { renderApp } from "./views.js";

const client = new ApiClient("");
let state: ConsoleState = initialState();
let token: string | null = null;

const root = document.getElementById("app");
if (root === null) {
  throw new Error("missing #app container");
}

function render(): void {
  const focused = document.activeElement;
  const focusId = focused instanceof HTMLElement ? focused.id : null;
  root!.innerHTML = renderApp(state);
  if (focusId !== null) {
    document.getElementById(focusId)?.focus();
  }
}

function update(next: ConsoleState): void {
  if (next !== state) {
    state = next;
    render();
  }
}

function showError(elementId: string, message: string): void {
  const element = document.getElementById(elementId);
  if (element !== null) {
    element.textContent = message;
  }
}

async function refreshDevices(): Promise<void> {
  update(applyDevices(state, await client.devices()));
}

async function refreshJobs(): Promise<void> {
  update(applyJobs(state, await client.jobs()));
}

async function handleUnlock(form: HTMLFormElement): Promise<void> {
  const input = form.querySelector<HTMLInputElement>("#passphrase");
  if (input === null || input.value === "") {
    return;
  }
  const passphrase = input.value;
  input.value = "";
  try {
    token = await client.unlock(passphrase);
    update({ ...state, unlocked: true });
    await refreshDevices();
    await refreshJobs();
  } catch (error) {
    if (error instanceof ApiError && error.status === 423) {
      update({ ...state, lockedOut: true });
    } else if (error instanceof ApiError) {
      showError("unlock-error", error.message);
    } else {
      showError("unlock-error", "agent unreachable, retry in a moment");
    }
  }
}

function collectPriorities(): Record<string, number> {
  const priorities: Record<string, number> = {};
  for (const input of document.querySelectorAll<HTMLInputElement>(
    ".priority-input",
  )) {
    const device = input.dataset["device"];
    const value = Number.parseInt(input.value, 10);
    if (device !== undefined && Number.isFinite(value) && value > 0) {
      priorities[device] = value;
    }
  }
  return priorities;
}

async function withQueueErrors(action: () => Promise<void>): Promise<void> {
  try {
    showError("queue-error", "");
    await action();
  } catch (error) {
    if (error instanceof ApiError) {
      showError("queue-error", error.message);
    } else {
      showError("queue-error", "agent unreachable");
    }
  }
}

async function handleAction(target: HTMLElement): Promise<void> {
  if (token === null) {
    return;
  }
  const held = token;
  switch (target.dataset["action"]) {
    case "apply-priorities":
      await withQueueErrors(async () => {
        update(applyDevices(state, await client.setQueue(held, collectPriorities())));
      });
      return;
    case "collect-all":
      await withQueueErrors(async () => {
        await client.acquire(held, "all");
        await refreshDevices();
      });
      return;
    case "acquire-selected":
      await withQueueErrors(async () => {
        await client.acquire(held, "selected");
        await refreshDevices();
      });
      return;
    case "abort": {
      const jobId = target.dataset["job"];
      if (jobId !== undefined) {
        await withQueueErrors(async () => {
          await client.abort(held, jobId);
        });
      }
      return;
    }
    default:
      return;
  }
}

document.addEventListener("submit", (event) => {
  const form = event.target;
  if (form instanceof HTMLFormElement && form.id === "unlock-form") {
    event.preventDefault();
    void handleUnlock(form);
  }
});

document.addEventListener("click", (event) => {
  const target = event.target;
  if (target instanceof HTMLElement && target.dataset["action"] !== undefined) {
    void handleAction(target);
  }
});

async function bootstrap(): Promise<void> {
  render();
  try {
    await client.health();
    await refreshDevices();
  } catch {
    update(setConnection(state, "reconnecting"));
  }
  void subscribeEvents(client, {
    onEvent: (event) => update(reduce(state, event)),
    onStatus: (status) => update(setConnection(state, status)),
  });
}

void bootstrap();
