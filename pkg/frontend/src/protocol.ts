/**
 * Wire protocol shared with the runtime server: JSON objects
 * {"kind", "seq", "payload"} over WebSocket text frames. Sequence numbers
 * strictly increase per direction; frames travel as base64 of raw
 * little-endian float32 grids plus a shape triple.
 */

export const PROTOCOL_VERSION = "flowsteer-console/1";

export const KINDS = [
  "hello",
  "frame_update",
  "state_update",
  "instruction",
  "start_episode",
  "stop_episode",
  "subgoal_preview",
  "progress_update",
  "ack",
  "error",
] as const;

export type Kind = (typeof KINDS)[number];

export interface ProtocolMessage {
  kind: Kind;
  seq: number;
  payload: Record<string, unknown>;
}

export function encodeMessage(msg: ProtocolMessage): string {
  // Key order matches the server's canonical encoding (sorted).
  return JSON.stringify({ kind: msg.kind, payload: msg.payload, seq: msg.seq });
}

export function decodeMessage(text: string): ProtocolMessage {
  let obj: unknown;
  try {
    obj = JSON.parse(text);
  } catch {
    throw new Error("message is not valid JSON");
  }
  if (typeof obj !== "object" || obj === null) {
    throw new Error("message is not an object");
  }
  const rec = obj as Record<string, unknown>;
  const keys = Object.keys(rec).sort();
  if (keys.join(",") !== "kind,payload,seq") {
    throw new Error("malformed message object");
  }
  const kind = rec["kind"];
  if (typeof kind !== "string" || !(KINDS as readonly string[]).includes(kind)) {
    throw new Error(`unknown message kind ${JSON.stringify(kind)}`);
  }
  const seq = rec["seq"];
  if (typeof seq !== "number" || !Number.isInteger(seq) || seq < 0) {
    throw new Error("bad sequence number");
  }
  const payload = rec["payload"];
  if (typeof payload !== "object" || payload === null) {
    throw new Error("payload must be an object");
  }
  return { kind: kind as Kind, seq, payload: payload as Record<string, unknown> };
}

/** A decoded image: row-major (height, width, 3) floats in [0, 1]. */
export interface Frame {
  shape: [number, number, number];
  data: Float32Array;
}

export interface FramePayload {
  shape: number[];
  data: string;
}

function base64ToBytes(b64: string): Uint8Array {
  if (typeof atob === "function") {
    const bin = atob(b64);
    const out = new Uint8Array(bin.length);
    for (let i = 0; i < bin.length; i++) out[i] = bin.charCodeAt(i);
    return out;
  }
  // Node fallback (tests)
  return new Uint8Array(Buffer.from(b64, "base64"));
}

function bytesToBase64(bytes: Uint8Array): string {
  if (typeof btoa === "function") {
    let bin = "";
    for (const b of bytes) bin += String.fromCharCode(b);
    return btoa(bin);
  }
  return Buffer.from(bytes).toString("base64");
}

export function decodeFrame(obj: FramePayload): Frame {
  const shape = obj.shape;
  if (shape.length !== 3 || shape[2] !== 3) {
    throw new Error("frame shape must be (height, width, 3)");
  }
  const bytes = base64ToBytes(obj.data);
  const n = shape.reduce((a, b) => a * b, 1);
  if (bytes.byteLength !== n * 4) {
    throw new Error("frame byte length does not match shape");
  }
  const data = new Float32Array(n);
  const view = new DataView(bytes.buffer, bytes.byteOffset, bytes.byteLength);
  for (let i = 0; i < n; i++) data[i] = view.getFloat32(i * 4, true);
  return { shape: shape as [number, number, number], data };
}

export function encodeFrame(frame: Frame): FramePayload {
  const bytes = new Uint8Array(frame.data.length * 4);
  const view = new DataView(bytes.buffer);
  for (let i = 0; i < frame.data.length; i++) {
    view.setFloat32(i * 4, frame.data[i] ?? 0, true);
  }
  return { shape: [...frame.shape], data: bytesToBase64(bytes) };
}
