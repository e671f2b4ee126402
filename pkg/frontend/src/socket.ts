// Socket wrapper: pairs every frame_meta with the binary payload that follows it,
// surfaces typed events, and reconnects with exponential backoff.

import { FrameMeta, ServerMessage, parseServerMessage } from "./protocol";
import { backoffDelays } from "./rateLimiter";

export interface SocketEvents {
  onOpen: () => void;
  onClose: (willRetry: boolean) => void;
  onMessage: (msg: ServerMessage) => void;
  onFramePayload: (meta: FrameMeta, payload: Blob | ArrayBuffer) => void;
}

// Pure pairing logic, unit-testable without a real WebSocket.
export class FramePairer {
  private awaiting: FrameMeta | null = null;

  constructor(private readonly events: Pick<SocketEvents, "onMessage" | "onFramePayload">) {}

  text(data: string): void {
    const msg = parseServerMessage(data);
    if (msg.type === "frame_meta") {
      this.awaiting = msg;
    }
    this.events.onMessage(msg);
  }

  binary(payload: Blob | ArrayBuffer): void {
    if (!this.awaiting) return; // stray binary frame: nothing to attach it to
    const meta = this.awaiting;
    this.awaiting = null;
    this.events.onFramePayload(meta, payload);
  }
}

export class ViewerSocket {
  private ws: WebSocket | null = null;
  private closedByUser = false;
  private nextDelay = backoffDelays();
  private pairer: FramePairer;

  constructor(private readonly url: string, private readonly events: SocketEvents) {
    this.pairer = new FramePairer(events);
    this.connect();
  }

  private connect(): void {
    const ws = new WebSocket(this.url);
    ws.binaryType = "blob";
    this.ws = ws;
    ws.onopen = () => {
      this.nextDelay = backoffDelays();
      this.events.onOpen();
    };
    ws.onmessage = (ev) => {
      if (typeof ev.data === "string") {
        try {
          this.pairer.text(ev.data);
        } catch (err) {
          console.warn("dropping bad message:", err);
        }
      } else {
        this.pairer.binary(ev.data);
      }
    };
    ws.onclose = () => {
      this.ws = null;
      if (this.closedByUser) {
        this.events.onClose(false);
        return;
      }
      this.events.onClose(true);
      setTimeout(() => this.connect(), this.nextDelay());
    };
    ws.onerror = () => ws.close();
  }

  send(obj: unknown): boolean {
    if (this.ws && this.ws.readyState === WebSocket.OPEN) {
      this.ws.send(JSON.stringify(obj));
      return true;
    }
    return false;
  }

  close(): void {
    this.closedByUser = true;
    this.ws?.close();
  }
}
