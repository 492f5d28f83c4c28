/** Reconnecting event-stream session.
 *
 * On every (re)connect the server replays its durable history before the
 * live tail, so the handler gets onReset() first: stores rebuild from the
 * replay and nothing visible is lost across a dropped connection.
 */

import { parseEvent, type TrainingEvent } from "./protocol.js";

export type ConnectionState = "connecting" | "open" | "reconnecting" | "closed" | "failed";

export interface WebSocketLike {
  onopen: ((ev?: unknown) => void) | null;
  onmessage: ((ev: { data: unknown }) => void) | null;
  onclose: ((ev?: unknown) => void) | null;
  onerror: ((ev?: unknown) => void) | null;
  close(): void;
}

export interface StreamHandlers {
  onEvent(event: TrainingEvent): void;
  onState?(state: ConnectionState, detail?: string): void;
  onReset?(): void; // new connection: clear derived stores before the replay
}

export interface StreamOptions {
  wsFactory?: (url: string) => WebSocketLike;
  maxRetries?: number;
  backoffMs?: number;
}

export function wsUrl(baseUrl: string): string {
  const base = baseUrl.replace(/\/+$/, "");
  if (base.startsWith("https://")) return "wss://" + base.slice("https://".length) + "/ws";
  if (base.startsWith("http://")) return "ws://" + base.slice("http://".length) + "/ws";
  return base + "/ws";
}

const defaultFactory = (url: string): WebSocketLike =>
  new (globalThis as unknown as { WebSocket: new (url: string) => WebSocketLike }).WebSocket(url);

export class StreamSession {
  private ws: WebSocketLike | null = null;
  private retries = 0;
  private stopped = false;
  private timer: ReturnType<typeof setTimeout> | null = null;

  constructor(
    private baseUrl: string,
    private handlers: StreamHandlers,
    private options: StreamOptions = {},
  ) {}

  start(): void {
    this.stopped = false;
    this.connect("connecting");
  }

  stop(): void {
    this.stopped = true;
    if (this.timer) clearTimeout(this.timer);
    this.ws?.close();
    this.ws = null;
    this.handlers.onState?.("closed");
  }

  private connect(state: ConnectionState): void {
    if (this.stopped) return;
    this.handlers.onState?.(state);
    const factory = this.options.wsFactory ?? defaultFactory;
    let ws: WebSocketLike;
    try {
      ws = factory(wsUrl(this.baseUrl));
    } catch (err) {
      this.scheduleReconnect(String(err));
      return;
    }
    this.ws = ws;
    let sawOpen = false;
    ws.onopen = () => {
      sawOpen = true;
      this.retries = 0;
      this.handlers.onReset?.();
      this.handlers.onState?.("open");
    };
    ws.onmessage = (msg) => {
      try {
        this.handlers.onEvent(parseEvent(String(msg.data)));
      } catch (err) {
        this.handlers.onState?.("open", `bad frame: ${String(err)}`);
      }
    };
    ws.onerror = () => {
      /* the close handler decides what happens next */
    };
    ws.onclose = () => {
      if (this.stopped) return;
      this.scheduleReconnect(sawOpen ? "connection lost" : "connection refused");
    };
  }

  private scheduleReconnect(detail: string): void {
    this.retries += 1;
    const max = this.options.maxRetries ?? 8;
    if (this.retries > max) {
      this.handlers.onState?.("failed", detail);
      return;
    }
    const backoff = (this.options.backoffMs ?? 500) * this.retries;
    this.handlers.onState?.("reconnecting", `${detail}; retry ${this.retries}/${max}`);
    this.timer = setTimeout(() => this.connect("connecting"), backoff);
  }
}
