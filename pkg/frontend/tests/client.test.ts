// Event-buffer contract and the drive loop against a scripted service.

import { describe, expect, it } from "vitest";

import { EventBuffer, RunEvent, ServiceClient, driveRun } from "../src/client.js";

function event(index: number): RunEvent {
  return { index, session_id: "s", t: 38, k: index, loss: 1, eta: 0, elapsed_ms: 0 };
}

describe("event buffer", () => {
  it("accepts contiguous pages", () => {
    const buffer = new EventBuffer();
    buffer.append([event(0), event(1)]);
    buffer.append([event(2)]);
    expect(buffer.cursor).toBe(2);
  });

  it("refuses gaps and duplicates", () => {
    const buffer = new EventBuffer();
    buffer.append([event(0)]);
    expect(() => buffer.append([event(2)])).toThrow(/gap/);
    expect(() => buffer.append([event(0)])).toThrow(/gap/);
  });
});

// a scripted fetch standing in for the service
function scriptedFetch(pages: Array<{ state: string; events: RunEvent[] }>) {
  let poll = 0;
  const calls: string[] = [];
  const fn = (async (input: RequestInfo | URL, init?: RequestInit) => {
    const url = String(input);
    calls.push(`${init?.method ?? "GET"} ${url}`);
    const respond = (body: unknown, ok = true, status = 200) =>
      ({
        ok,
        status,
        json: async () => body,
        arrayBuffer: async () => new ArrayBuffer(4),
      }) as unknown as Response;
    if (url.endsWith("/sessions")) return respond({ id: "abc" });
    if (url.endsWith("/run")) return respond({ state: "running" });
    if (url.includes("/events")) {
      const page = pages[Math.min(poll++, pages.length - 1)];
      return respond({ ...page, error: null });
    }
    if (url.includes("/result")) return respond({});
    return respond({ detail: "nope" }, false, 404);
  }) as typeof fetch;
  return { fn, calls };
}

describe("drive loop", () => {
  it("creates, starts, polls to completion, keeps events contiguous", async () => {
    const { fn, calls } = scriptedFetch([
      { state: "running", events: [event(0), event(1)] },
      { state: "running", events: [event(2)] },
      { state: "done", events: [] },
    ]);
    const client = new ServiceClient("http://x", fn);
    const buffer = new EventBuffer();
    const states: string[] = [];
    let created = "";
    const outcome = await driveRun(client, new Uint8Array([1]), "{}", {}, buffer, {
      onCreated: (id) => { created = id; },
      onState: (s) => states.push(s),
    }, 0);
    expect(outcome).toEqual({ id: "abc", state: "done" });
    expect(created).toBe("abc");
    expect(buffer.events.length).toBe(3);
    expect(states).toContain("done");
    expect(calls[0]).toContain("POST http://x/sessions");
    expect(calls[1]).toContain("POST http://x/sessions/abc/run");
  });

  it("surfaces service errors with detail", async () => {
    const fn = (async () =>
      ({
        ok: false,
        status: 400,
        json: async () => ({ detail: "spec invalid: center" }),
      }) as unknown as Response) as typeof fetch;
    const client = new ServiceClient("http://x", fn);
    await expect(client.createSession(new Uint8Array(), "{}"))
      .rejects.toThrow(/400: spec invalid: center/);
  });
});
