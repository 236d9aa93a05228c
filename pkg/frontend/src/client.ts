/**
 * Connection and send/receive logic, independent of the DOM. The socket is
 * injected as a minimal interface so tests can drive the client with a fake
 * or a Node TCP adapter; the page passes a browser WebSocket.
 */

import {
  Kind,
  PROTOCOL_VERSION,
  ProtocolMessage,
  decodeMessage,
  encodeMessage,
} from "./protocol.js";
import {
  ConsoleState,
  TimelineEvent,
  applyEvent,
  initialState,
} from "./state.js";

export interface SocketLike {
  send(text: string): void;
  close(): void;
  onopen: (() => void) | null;
  onmessage: ((text: string) => void) | null;
  onclose: (() => void) | null;
}

export type SocketFactory = (url: string) => SocketLike;

export interface ClientOptions {
  url: string;
  connect: SocketFactory;
  /** Called after every state change with the new state. */
  onChange?: (state: ConsoleState) => void;
  /** Reconnect backoff schedule in ms; the last entry repeats. */
  backoffMs?: number[];
  setTimeoutFn?: (fn: () => void, ms: number) => unknown;
}

export class ConsoleClient {
  state: ConsoleState = initialState();
  /** Full event record; replaying it reproduces `state` exactly. */
  timeline: TimelineEvent[] = [];

  private socket: SocketLike | null = null;
  private outSeq = 0;
  private attempts = 0;
  private closedByUser = false;
  private readonly backoff: number[];
  private readonly later: (fn: () => void, ms: number) => unknown;

  constructor(private readonly opts: ClientOptions) {
    this.backoff = opts.backoffMs ?? [250, 500, 1000, 2000, 4000];
    this.later = opts.setTimeoutFn ?? ((fn, ms) => setTimeout(fn, ms));
  }

  connect(): void {
    this.closedByUser = false;
    this.push({ dir: "link", connection: this.attempts ? "reconnecting" : "connecting" });
    const sock = this.opts.connect(this.opts.url);
    this.socket = sock;
    sock.onopen = () => {
      this.attempts = 0;
      this.sendRaw("hello", { protocol: PROTOCOL_VERSION });
    };
    sock.onmessage = (text) => {
      let msg: ProtocolMessage;
      try {
        msg = decodeMessage(text);
      } catch {
        return; // unparsable inbound data is dropped
      }
      this.push({ dir: "in", msg });
    };
    sock.onclose = () => {
      this.socket = null;
      if (this.closedByUser) {
        this.push({ dir: "link", connection: "disconnected" });
        return;
      }
      const wait =
        this.backoff[Math.min(this.attempts, this.backoff.length - 1)] ?? 1000;
      this.attempts += 1;
      this.push({ dir: "link", connection: "reconnecting" });
      this.later(() => {
        if (!this.closedByUser) this.connect();
      }, wait);
    };
  }

  close(): void {
    this.closedByUser = true;
    this.socket?.close();
  }

  startEpisode(): number {
    return this.sendRaw("start_episode", {});
  }

  stopEpisode(): number {
    return this.sendRaw("stop_episode", {});
  }

  /**
   * Queue an instruction. Returns its sequence number. Empty text or a
   * stopped episode is a local validation error: nothing is sent.
   */
  sendInstruction(text: string): number {
    if (text.trim() === "") {
      throw new Error("instruction text is empty");
    }
    if (this.state.lifecycle !== "running") {
      throw new Error("no episode running");
    }
    return this.sendRaw("instruction", { text });
  }

  private sendRaw(kind: Kind, payload: Record<string, unknown>): number {
    if (this.socket === null) {
      throw new Error("not connected");
    }
    const msg: ProtocolMessage = { kind, seq: this.outSeq++, payload };
    this.socket.send(encodeMessage(msg));
    this.push({ dir: "out", msg });
    return msg.seq;
  }

  private push(ev: TimelineEvent): void {
    this.timeline.push(ev);
    this.state = applyEvent(this.state, ev);
    this.opts.onChange?.(this.state);
  }
}
