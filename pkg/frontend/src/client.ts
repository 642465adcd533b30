// Service client: one streaming connection with auto-reconnect, plus the
// POST controls. Keeps the "pending vs acknowledged" objective distinction:
// the acked pair only changes when the server answers /objective or a frame
// reports it, never when a slider is mid-drag.

import { Frame, SessionSnapshot, parseFrame, parseSession, sameOmega } from "./protocol.js";
import { SseParser, backoffMs } from "./sse.js";

export type ConnectionState = "connecting" | "open" | "down";

export interface ObjectiveUpdate {
  omega_x?: number;
  omega_theta?: number;
}

export interface SteerHandlers {
  onFrame?: (frame: Frame) => void;
  onConnection?: (state: ConnectionState) => void;
  /** Called when a frame first reflects an accepted objective, with the
      elapsed ms since the POST was issued. */
  onRoundTrip?: (ms: number) => void;
}

interface PendingAck {
  omega: [number, number];
  sentAt: number;
}

type FetchFn = typeof fetch;

export class SteerClient {
  readonly baseUrl: string;
  private handlers: SteerHandlers;
  private fetchFn: FetchFn;
  private now: () => number;
  private sleep: (ms: number) => Promise<void>;
  private stopped = false;
  private pendingAcks: PendingAck[] = [];
  private ackedOmega: [number, number] | null = null;
  private connection: ConnectionState = "connecting";

  constructor(baseUrl: string, handlers: SteerHandlers = {}, deps: {
    fetchFn?: FetchFn;
    now?: () => number;
    sleep?: (ms: number) => Promise<void>;
  } = {}) {
    this.baseUrl = baseUrl.replace(/\/$/, "");
    this.handlers = handlers;
    this.fetchFn = deps.fetchFn ?? fetch.bind(globalThis);
    this.now = deps.now ?? (() => performance.now());
    this.sleep = deps.sleep ?? ((ms) => new Promise((r) => setTimeout(r, ms)));
  }

  connectionState(): ConnectionState {
    return this.connection;
  }

  lastAckedOmega(): [number, number] | null {
    return this.ackedOmega;
  }

  /** Run the stream until stop(); resolves when stopped. */
  async run(): Promise<void> {
    let attempt = 0;
    while (!this.stopped) {
      this.setConnection(attempt === 0 ? "connecting" : "down");
      try {
        const resp = await this.fetchFn(`${this.baseUrl}/stream`);
        if (!resp.ok || resp.body === null) {
          throw new Error(`stream: HTTP ${resp.status}`);
        }
        this.setConnection("open");
        attempt = 0;
        await this.consume(resp.body);
        throw new Error("stream ended");
      } catch (err) {
        if (this.stopped) {
          break;
        }
        this.setConnection("down");
        await this.sleep(backoffMs(attempt));
        attempt += 1;
      }
    }
  }

  stop(): void {
    this.stopped = true;
  }

  private async consume(body: ReadableStream<Uint8Array>): Promise<void> {
    const reader = body.getReader();
    const decoder = new TextDecoder();
    const parser = new SseParser();
    for (;;) {
      const { done, value } = await reader.read();
      if (done || this.stopped) {
        return;
      }
      for (const event of parser.push(decoder.decode(value, { stream: true }))) {
        this.dispatchFrame(parseFrame(JSON.parse(event.data)));
      }
    }
  }

  private dispatchFrame(frame: Frame): void {
    // a frame carrying an omega we have an outstanding ack for completes
    // the slider round trip
    const hit = this.pendingAcks.findIndex((p) => sameOmega(p.omega, frame.omega));
    if (hit >= 0) {
      const pending = this.pendingAcks[hit];
      this.pendingAcks.splice(0, hit + 1); // older pends are superseded
      this.handlers.onRoundTrip?.(this.now() - pending.sentAt);
    }
    this.handlers.onFrame?.(frame);
  }

  private setConnection(state: ConnectionState): void {
    if (state !== this.connection) {
      this.connection = state;
      this.handlers.onConnection?.(state);
    }
  }

  private async post(path: string, payload?: unknown): Promise<unknown> {
    const resp = await this.fetchFn(this.baseUrl + path, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: payload === undefined ? "{}" : JSON.stringify(payload),
    });
    const doc: unknown = await resp.json();
    if (!resp.ok) {
      const detail = (doc as { detail?: string }).detail ?? `HTTP ${resp.status}`;
      throw new Error(detail);
    }
    return doc;
  }

  /** POST /objective; resolves with the server-acknowledged pair. */
  async setObjective(update: ObjectiveUpdate): Promise<[number, number]> {
    const sentAt = this.now();
    const doc = await this.post("/objective", update) as { omega: [number, number] };
    this.ackedOmega = [doc.omega[0], doc.omega[1]];
    this.pendingAcks.push({ omega: this.ackedOmega, sentAt });
    return this.ackedOmega;
  }

  async session(): Promise<SessionSnapshot> {
    const resp = await this.fetchFn(`${this.baseUrl}/session`);
    if (!resp.ok) {
      throw new Error(`session: HTTP ${resp.status}`);
    }
    return parseSession(await resp.json());
  }

  async reset(pose?: { x?: number; theta?: number }): Promise<void> {
    await this.post("/reset", pose ?? {});
  }

  async pause(): Promise<void> {
    await this.post("/pause");
  }

  async resume(): Promise<void> {
    await this.post("/resume");
  }

  async step(n: number): Promise<void> {
    await this.post("/step", { n });
  }
}
