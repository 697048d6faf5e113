/** Workflow conformance against a live agent and loopback server.
 *
 * Spawns the real `raft server` and `raft client` processes, then drives
 * the console's own API client through unlock, prioritization (b before
 * a), and selected acquisition, feeding the live event stream through
 * the reducer until the verdict banner lands.
 */

import { type ChildProcess, spawn } from "node:child_process";
import { createHash, randomBytes } from "node:crypto";
import { mkdtempSync, rmSync, writeFileSync } from "node:fs";
import { createServer } from "node:net";
import { tmpdir } from "node:os";
import { join } from "node:path";
import { afterAll, beforeAll, describe, expect, test } from "vitest";

import { ApiClient, ApiError, subscribeEvents } from "../src/api.js";
import { banner, initialState, reduce } from "../src/reducer.js";
import type { ApiEvent, ConsoleState } from "../src/types.js";

const PASSPHRASE = "correct horse battery staple";

function freePort(): Promise<number> {
  return new Promise((resolve, reject) => {
    const probe = createServer();
    probe.listen(0, "127.0.0.1", () => {
      const address = probe.address();
      if (address === null || typeof address === "string") {
        reject(new Error("no port assigned"));
        return;
      }
      probe.close(() => resolve(address.port));
    });
  });
}

function waitForLine(
  child: ChildProcess,
  pattern: RegExp,
  timeoutMs: number,
): Promise<RegExpMatchArray> {
  return new Promise((resolve, reject) => {
    let collected = "";
    const timer = setTimeout(() => {
      reject(new Error(`timed out waiting for ${pattern}; got: ${collected}`));
    }, timeoutMs);
    child.stderr?.on("data", (data: Buffer) => {
      collected += data.toString();
      const match = collected.match(pattern);
      if (match !== null) {
        clearTimeout(timer);
        resolve(match);
      }
    });
    child.on("exit", (code) => {
      clearTimeout(timer);
      reject(new Error(`process exited with ${code}: ${collected}`));
    });
  });
}

async function until(
  predicate: () => boolean,
  timeoutMs: number,
  label: string,
): Promise<void> {
  const deadline = Date.now() + timeoutMs;
  while (Date.now() < deadline) {
    if (predicate()) {
      return;
    }
    await new Promise((resolve) => setTimeout(resolve, 50));
  }
  throw new Error(`timed out waiting for ${label}`);
}

describe("operator workflow against a live agent", () => {
  let workdir: string;
  let server: ChildProcess;
  let agent: ChildProcess;
  let client: ApiClient;

  beforeAll(async () => {
    workdir = mkdtempSync(join(tmpdir(), "console-workflow-"));
    const scanRoot = join(workdir, "devices");
    const store = join(workdir, "store");
    const { mkdirSync } = await import("node:fs");
    mkdirSync(scanRoot);
    writeFileSync(join(scanRoot, "a.img"), randomBytes(128 * 1024));
    writeFileSync(join(scanRoot, "b.img"), randomBytes(128 * 1024));

    server = spawn("raft", [
      "server",
      "--store",
      store,
      "--port",
      "0",
      "--passphrase",
      PASSPHRASE,
      "--insecure",
    ]);
    const ready = await waitForLine(
      server,
      /listening on 127\.0\.0\.1:(\d+)/,
      20_000,
    );
    const serverPort = Number(ready[1]);

    const digest = createHash("sha256").update(PASSPHRASE).digest("hex");
    const configPath = join(workdir, "client.cfg");
    writeFileSync(
      configPath,
      [
        "server_host: 127.0.0.1",
        `server_port: ${serverPort}`,
        `passphrase_digest: ${digest}`,
        `scan_root: ${scanRoot}`,
        "case_id: CASE-CONSOLE",
        "chunk_size: 32768",
        "insecure_transport_ok: true",
        "",
      ].join("\n"),
    );

    const apiPort = await freePort();
    agent = spawn("raft", [
      "client",
      "--config",
      configPath,
      "--api-port",
      String(apiPort),
    ]);
    await waitForLine(agent, /control API on 127\.0\.0\.1:(\d+)/, 20_000);
    client = new ApiClient(`http://127.0.0.1:${apiPort}`);
    const deadline = Date.now() + 15_000;
    for (;;) {
      try {
        await client.health();
        break;
      } catch (error) {
        if (Date.now() > deadline) {
          throw error;
        }
        await new Promise((resolve) => setTimeout(resolve, 200));
      }
    }
  });

  afterAll(() => {
    agent?.kill("SIGTERM");
    server?.kill("SIGTERM");
    rmSync(workdir, { recursive: true, force: true });
  });

  test("unlock, prioritize b before a, acquire selected, reach the verified banner", async () => {
    await expect(client.unlock("wrong passphrase")).rejects.toMatchObject({
      name: "ApiError",
      status: 401,
    });

    await expect(
      client.setQueue("not-a-token", { "b.img": 1 }),
    ).rejects.toMatchObject({ name: "ApiError", status: 401 });

    const token = await client.unlock(PASSPHRASE);
    expect(token.length).toBeGreaterThan(0);

    const inventory = await client.devices();
    expect(inventory.devices.map((row) => row.device_id).sort()).toEqual([
      "a.img",
      "b.img",
    ]);

    const recorded: unknown[] = [];
    const realFetch = globalThis.fetch;
    globalThis.fetch = (async (input: RequestInfo | URL, init?: RequestInit) => {
      if (String(input).endsWith("/queue") && typeof init?.body === "string") {
        recorded.push(JSON.parse(init.body));
      }
      return realFetch(input, init);
    }) as typeof fetch;
    let queued;
    try {
      queued = await client.setQueue(token, { "b.img": 1, "a.img": 2 });
    } finally {
      globalThis.fetch = realFetch;
    }
    expect(recorded).toEqual([{ "b.img": 1, "a.img": 2 }]);

    const byId = new Map(queued.devices.map((row) => [row.device_id, row]));
    expect(byId.get("b.img")?.priority).toBe(1);
    expect(byId.get("b.img")?.state).toBe("queued");
    expect(byId.get("a.img")?.priority).toBe(2);
    expect(byId.get("a.img")?.state).toBe("queued");

    const jobIds = await client.acquire(token, "selected");
    expect(jobIds).toHaveLength(2);

    let state: ConsoleState = initialState();
    const stop = new AbortController();
    const stream = subscribeEvents(
      client,
      {
        onEvent: (event: ApiEvent) => {
          state = reduce(state, event);
        },
      },
      { signal: stop.signal },
    );
    try {
      await until(
        () =>
          jobIds.every((id) => state.jobs[id]?.phase === "finished") &&
          banner(state).tone === "verified",
        60_000,
        "both jobs finished and the banner verified",
      );
    } finally {
      stop.abort();
      await stream;
    }

    const first = state.jobs[jobIds[0]!];
    const second = state.jobs[jobIds[1]!];
    expect(first?.deviceId).toBe("b.img");
    expect(second?.deviceId).toBe("a.img");
    expect(first?.verdict).toBe("verified");
    expect(second?.verdict).toBe("verified");
    for (const job of [first!, second!]) {
      expect(Object.values(job.chunks).every((cell) => cell.phase === "acked")).toBe(
        true,
      );
      expect(job.wholeImageDigest).toMatch(/^[0-9a-f]{128}$/);
    }

    const finalBanner = banner(state);
    expect(finalBanner.tone).toBe("verified");
    expect(state.devices["a.img"]?.state).toBe("done");
    expect(state.devices["b.img"]?.state).toBe("done");
  });
});
