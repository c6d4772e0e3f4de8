// Reconnecting WebSocket wrapper: exponential backoff, connection-state
// callbacks, envelope parsing. Pending console state survives reconnects;
// the queues on the broker side are the durable path.

import { Envelope, parseEnvelope, ProtocolError } from "./protocol.js";

export interface SocketHandlers {
  onEnvelope: (env: Envelope) => void;
  onState: (connected: boolean) => void;
  onError?: (message: string) => void;
}

export class ReconnectingSocket {
  private ws: WebSocket | null = null;
  private stopped = false;
  private attempt = 0;
  private timer: ReturnType<typeof setTimeout> | null = null;

  constructor(
    private readonly urlFactory: () => string,
    private readonly handlers: SocketHandlers,
    private readonly baseDelayMs = 500,
    private readonly maxDelayMs = 10_000,
  ) {}

  start(): void {
    this.stopped = false;
    this.connect();
  }

  stop(): void {
    this.stopped = true;
    if (this.timer !== null) clearTimeout(this.timer);
    this.ws?.close();
    this.ws = null;
  }

  send(frame: string): boolean {
    if (this.ws === null || this.ws.readyState !== WebSocket.OPEN) return false;
    this.ws.send(frame);
    return true;
  }

  private connect(): void {
    const ws = new WebSocket(this.urlFactory());
    this.ws = ws;
    ws.onopen = () => {
      this.attempt = 0;
      this.handlers.onState(true);
    };
    ws.onmessage = (event: MessageEvent) => {
      try {
        this.handlers.onEnvelope(parseEnvelope(String(event.data)));
      } catch (err) {
        if (err instanceof ProtocolError) {
          this.handlers.onError?.(err.message);
        } else {
          throw err;
        }
      }
    };
    ws.onclose = () => {
      this.ws = null;
      this.handlers.onState(false);
      this.scheduleReconnect();
    };
    ws.onerror = () => {
      // onclose follows; nothing else to do here.
    };
  }

  private scheduleReconnect(): void {
    if (this.stopped) return;
    const delay = Math.min(this.baseDelayMs * 2 ** this.attempt, this.maxDelayMs);
    this.attempt += 1;
    this.timer = setTimeout(() => this.connect(), delay);
  }
}
