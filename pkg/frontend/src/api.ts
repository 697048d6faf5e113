/** Typed client for the acquisition agent's control API.
 *
 * Every mutating call takes the session token as its first argument, so
 * a request without one cannot be expressed. The token lives in page
 * memory only; nothing here persists it.
 */

import type {
  ApiEvent,
  DevicesResponse,
  JobRow,
} from "./types.js";

export class ApiError extends Error {
  constructor(
    readonly status: number,
    detail: string,
  ) {
    super(detail);
    this.name = "ApiError";
  }
}

async function parseDetail(response: Response): Promise<string> {
  try {
    const body = (await response.json()) as { detail?: unknown };
    if (typeof body.detail === "string") {
      return body.detail;
    }
    return JSON.stringify(body.detail ?? body);
  } catch {
    return response.statusText || `HTTP ${response.status}`;
  }
}

export class ApiClient {
  constructor(private readonly base: string = "") {}

  private async request<T>(
    path: string,
    init: RequestInit = {},
  ): Promise<T> {
    const response = await fetch(this.base + path, init);
    if (!response.ok) {
      throw new ApiError(response.status, await parseDetail(response));
    }
    return (await response.json()) as T;
  }

  private mutating(token: string, body: unknown): RequestInit {
    return {
      method: "POST",
      headers: {
        "content-type": "application/json",
        "x-session-token": token,
      },
      body: JSON.stringify(body),
    };
  }

  health(): Promise<{ status: string }> {
    return this.request("/health");
  }

  async unlock(passphrase: string): Promise<string> {
    const response = await this.request<{ token: string }>("/unlock", {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({ passphrase }),
    });
    return response.token;
  }

  devices(): Promise<DevicesResponse> {
    return this.request("/devices");
  }

  jobs(): Promise<JobRow[]> {
    return this.request("/jobs");
  }

  job(jobId: string): Promise<JobRow> {
    return this.request(`/jobs/${encodeURIComponent(jobId)}`);
  }

  setQueue(
    token: string,
    priorities: Record<string, number>,
  ): Promise<DevicesResponse> {
    return this.request("/queue", this.mutating(token, priorities));
  }

  async acquire(token: string, mode: "all" | "selected"): Promise<string[]> {
    const response = await this.request<{ job_ids: string[] }>(
      "/acquire",
      this.mutating(token, { mode }),
    );
    return response.job_ids;
  }

  abort(token: string, jobId: string): Promise<JobRow> {
    return this.request(
      `/abort/${encodeURIComponent(jobId)}`,
      this.mutating(token, {}),
    );
  }

  /** Read the SSE stream once, resolving when the server closes it. */
  async streamEvents(
    onEvent: (event: ApiEvent) => void,
    options: { lastEventId?: number; signal?: AbortSignal } = {},
  ): Promise<void> {
    const headers: Record<string, string> = { accept: "text/event-stream" };
    if (options.lastEventId !== undefined && options.lastEventId > 0) {
      headers["last-event-id"] = String(options.lastEventId);
    }
    const init: RequestInit = { headers };
    if (options.signal !== undefined) {
      init.signal = options.signal;
    }
    const response = await fetch(`${this.base}/events`, init);
    if (!response.ok || response.body === null) {
      throw new ApiError(response.status, "event stream unavailable");
    }
    const reader = response.body.getReader();
    const decoder = new TextDecoder();
    let buffer = "";
    for (;;) {
      const { done, value } = await reader.read();
      if (done) {
        return;
      }
      buffer += decoder.decode(value, { stream: true });
      let boundary;
      while ((boundary = buffer.indexOf("\n\n")) >= 0) {
        const block = buffer.slice(0, boundary);
        buffer = buffer.slice(boundary + 2);
        for (const line of block.split("\n")) {
          if (line.startsWith("data: ")) {
            onEvent(JSON.parse(line.slice(6)) as ApiEvent);
          }
        }
      }
    }
  }
}

function delay(ms: number, signal?: AbortSignal): Promise<void> {
  return new Promise((resolve) => {
    const timer = setTimeout(resolve, ms);
    signal?.addEventListener(
      "abort",
      () => {
        clearTimeout(timer);
        resolve();
      },
      { once: true },
    );
  });
}

/** Keep the event subscription alive across drops.
 *
 * Reconnects resume from the last seen event id, so the caller's reducer
 * state rebuilds losslessly: the replay starts strictly after what it
 * already folded in.
 */
export async function subscribeEvents(
  client: ApiClient,
  callbacks: {
    onEvent: (event: ApiEvent) => void;
    onStatus?: (status: "live" | "reconnecting") => void;
  },
  options: { signal?: AbortSignal; retryDelayMs?: number } = {},
): Promise<void> {
  const retryDelayMs = options.retryDelayMs ?? 1000;
  let lastEventId = 0;
  while (options.signal === undefined || !options.signal.aborted) {
    try {
      callbacks.onStatus?.("live");
      const streamOptions: { lastEventId: number; signal?: AbortSignal } = {
        lastEventId,
      };
      if (options.signal !== undefined) {
        streamOptions.signal = options.signal;
      }
      await client.streamEvents((event) => {
        lastEventId = Math.max(lastEventId, event.event_id);
        callbacks.onEvent(event);
      }, streamOptions);
    } catch {
      // Fall through to the reconnect path.
    }
    if (options.signal?.aborted) {
      return;
    }
    callbacks.onStatus?.("reconnecting");
    await delay(retryDelayMs, options.signal);
  }
}
