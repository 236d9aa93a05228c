/**
 * Console state as a pure fold over a timeline of events. The console never
 * mutates episode data locally: every rendered fact derives from server
 * messages (plus the local record of what was sent), so replaying a recorded
 * timeline reproduces the exact state.
 */

import { Frame, FramePayload, ProtocolMessage, decodeFrame } from "./protocol.js";

export type Connection =
  | "disconnected"
  | "connecting"
  | "connected"
  | "reconnecting";

export type Lifecycle = "idle" | "running" | "done";

export interface PendingInstruction {
  seq: number;
  text: string;
}

export interface ConsoleState {
  connection: Connection;
  lifecycle: Lifecycle;
  /** Terminal episode status reported by the server, if any. */
  status: string | null;
  /** Highest inbound sequence number seen; lower ones are discarded. */
  lastSeq: number;
  /** Latest simulator frames per view and the step they belong to. */
  frames: Record<string, Frame>;
  frameStep: number;
  /** Latest generated subgoal preview per view. */
  subgoal: Record<string, Frame> | null;
  /** Current subtask (the server's view) and context version. */
  subtask: string | null;
  contextVersion: number;
  /** Subtask most recently acknowledged for an instruction we sent. */
  activeInstruction: string | null;
  progress: number;
  step: number;
  /** Instructions sent but not yet acknowledged, in send order. */
  pending: PendingInstruction[];
  /** Quick-pick vocabulary delivered in the hello acknowledgement. */
  vocabulary: string[];
  banner: string | null;
  /** Set when the server refused or ended the session: view-only. */
  readOnly: boolean;
  savedPath: string | null;
}

export function initialState(): ConsoleState {
  return {
    connection: "disconnected",
    lifecycle: "idle",
    status: null,
    lastSeq: -1,
    frames: {},
    frameStep: -1,
    subgoal: null,
    subtask: null,
    contextVersion: -1,
    activeInstruction: null,
    progress: 0,
    step: 0,
    pending: [],
    vocabulary: [],
    banner: null,
    readOnly: false,
    savedPath: null,
  };
}

/** One timeline entry: a server message, a local send, or a link event. */
export type TimelineEvent =
  | { dir: "in"; msg: ProtocolMessage }
  | { dir: "out"; msg: ProtocolMessage }
  | { dir: "link"; connection: Connection };

function decodeViews(views: Record<string, FramePayload>): Record<string, Frame> {
  const out: Record<string, Frame> = {};
  for (const [name, payload] of Object.entries(views)) {
    out[name] = decodeFrame(payload);
  }
  return out;
}

function applyInbound(state: ConsoleState, msg: ProtocolMessage): ConsoleState {
  if (msg.seq <= state.lastSeq) {
    return state; // out-of-order: discard, keep the newest rendered state
  }
  const next: ConsoleState = { ...state, lastSeq: msg.seq };
  const p = msg.payload;
  switch (msg.kind) {
    case "frame_update": {
      next.frames = decodeViews(p["views"] as Record<string, FramePayload>);
      next.frameStep = p["step"] as number;
      break;
    }
    case "subgoal_preview": {
      next.subgoal = decodeViews(p["views"] as Record<string, FramePayload>);
      break;
    }
    case "state_update": {
      next.step = p["step"] as number;
      next.progress = p["progress"] as number;
      next.subtask = (p["subtask"] as string | null) ?? null;
      next.contextVersion = p["context_version"] as number;
      if (typeof p["status"] === "string") {
        next.status = p["status"];
        next.lifecycle = "done";
        next.readOnly = true;
      }
      break;
    }
    case "progress_update": {
      next.step = p["step"] as number;
      next.progress = p["progress"] as number;
      break;
    }
    case "ack": {
      const of = p["of"] as number;
      if (typeof p["protocol"] === "string") {
        next.connection = "connected";
        next.vocabulary = (p["vocabulary"] as string[] | undefined) ?? [];
        break;
      }
      const hit = state.pending.find((q) => q.seq === of);
      next.pending = state.pending.filter((q) => q.seq !== of);
      if (hit && typeof p["text"] === "string") {
        next.activeInstruction = p["text"];
        next.subtask = p["text"];
      }
      if (typeof p["saved"] === "string") {
        next.savedPath = p["saved"];
      }
      if (hit === undefined && typeof p["text"] !== "string" &&
          p["saved"] === undefined) {
        // acknowledges start_episode
        next.lifecycle = "running";
        next.status = null;
      }
      break;
    }
    case "error": {
      const of = p["of"] as number | undefined;
      next.banner = String(p["message"] ?? "server error");
      if (of !== undefined) {
        next.pending = state.pending.filter((q) => q.seq !== of);
      }
      if (p["expected"] !== undefined) {
        next.readOnly = true; // protocol refusal: stale client
      }
      break;
    }
    default:
      break; // server never sends the other kinds
  }
  return next;
}

function applyOutbound(state: ConsoleState, msg: ProtocolMessage): ConsoleState {
  switch (msg.kind) {
    case "instruction":
      return {
        ...state,
        pending: [
          ...state.pending,
          { seq: msg.seq, text: msg.payload["text"] as string },
        ],
      };
    case "start_episode":
      return { ...state, lifecycle: "running", status: null, banner: null };
    case "stop_episode":
      return { ...state, lifecycle: "done" };
    default:
      return state;
  }
}

export function applyEvent(state: ConsoleState, ev: TimelineEvent): ConsoleState {
  if (ev.dir === "link") {
    const next = { ...state, connection: ev.connection };
    if (ev.connection === "disconnected" || ev.connection === "reconnecting") {
      next.banner = "connection lost; reconnecting";
    }
    return next;
  }
  return ev.dir === "in" ? applyInbound(state, ev.msg) : applyOutbound(state, ev.msg);
}

export function replay(events: readonly TimelineEvent[]): ConsoleState {
  return events.reduce(applyEvent, initialState());
}
