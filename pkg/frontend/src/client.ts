// Thin client for the run service: create, start, poll, cancel, fetch.
// The poll loop keeps a contiguous event buffer and surfaces transport
// failures without dying.

export interface RunEvent {
  index: number;
  session_id: string;
  t: number;
  k: number;
  loss: number;
  eta: number;
  elapsed_ms: number;
  rho_preview?: string[];
}

export interface EventsPage {
  state: string;
  events: RunEvent[];
  error: string | null;
}

export interface ComponentChoices {
  denoiser?: string;
  extractor?: string;
  codec?: string;
}

export class ServiceClient {
  constructor(readonly baseUrl: string,
              private readonly fetchFn: typeof fetch = fetch) {}

  private async check(response: Response): Promise<Response> {
    if (!response.ok) {
      let detail = `${response.status}`;
      try {
        const body = await response.json();
        if (body && body.detail) detail = `${response.status}: ${body.detail}`;
      } catch {
        // plain-text or empty error body
      }
      throw new Error(`service error ${detail}`);
    }
    return response;
  }

  async createSession(imagePng: Uint8Array, specJson: string): Promise<string> {
    const form = new FormData();
    form.append("image", new Blob([imagePng.buffer as ArrayBuffer], { type: "image/png" }), "image.png");
    form.append("spec", new Blob([specJson], { type: "application/json" }), "spec.json");
    const r = await this.check(
      await this.fetchFn(`${this.baseUrl}/sessions`, { method: "POST", body: form }));
    const body = await r.json();
    return body.id as string;
  }

  async startRun(id: string, components: ComponentChoices = {}): Promise<void> {
    const form = new FormData();
    for (const [key, value] of Object.entries(components)) {
      if (value) form.append(key, value);
    }
    await this.check(await this.fetchFn(`${this.baseUrl}/sessions/${id}/run`, {
      method: "POST",
      body: form,
    }));
  }

  async pollEvents(id: string, after: number, waitMs = 500): Promise<EventsPage> {
    const url = `${this.baseUrl}/sessions/${id}/events?after=${after}&wait_ms=${waitMs}`;
    const r = await this.check(await this.fetchFn(url));
    return (await r.json()) as EventsPage;
  }

  async cancel(id: string): Promise<void> {
    await this.check(await this.fetchFn(`${this.baseUrl}/sessions/${id}/cancel`, { method: "POST" }));
  }

  async fetchResultPng(id: string): Promise<Uint8Array> {
    const r = await this.check(await this.fetchFn(`${this.baseUrl}/sessions/${id}/result`));
    return new Uint8Array(await r.arrayBuffer());
  }

  async fetchManifest(id: string): Promise<unknown> {
    const r = await this.check(
      await this.fetchFn(`${this.baseUrl}/sessions/${id}/result?format=manifest`));
    return r.json();
  }
}

export const TERMINAL_STATES = new Set(["done", "failed", "cancelled"]);

// Event buffer that refuses gaps: the service guarantees contiguous
// indices and the view depends on it.
export class EventBuffer {
  readonly events: RunEvent[] = [];

  append(page: RunEvent[]): void {
    for (const event of page) {
      if (event.index !== this.events.length) {
        throw new Error(
          `event gap: expected index ${this.events.length}, got ${event.index}`);
      }
      this.events.push(event);
    }
  }

  get cursor(): number {
    return this.events.length - 1;
  }
}

export interface RunObserver {
  onCreated?(id: string): void;
  onEvents?(events: RunEvent[]): void;
  onState?(state: string, error: string | null): void;
}

// create -> start -> poll until terminal; returns the final state.
export async function driveRun(
  client: ServiceClient,
  imagePng: Uint8Array,
  specJson: string,
  components: ComponentChoices,
  buffer: EventBuffer,
  observer: RunObserver = {},
  pollWaitMs = 500,
): Promise<{ id: string; state: string }> {
  const id = await client.createSession(imagePng, specJson);
  observer.onCreated?.(id);
  await client.startRun(id, components);
  let state = "running";
  let error: string | null = null;
  for (;;) {
    const page = await client.pollEvents(id, buffer.cursor, pollWaitMs);
    if (page.events.length) {
      buffer.append(page.events);
      observer.onEvents?.(page.events);
    }
    if (page.state !== state || page.error !== error) {
      state = page.state;
      error = page.error ?? null;
      observer.onState?.(state, error);
    }
    if (TERMINAL_STATES.has(state)) break;
  }
  return { id, state };
}
