/** Page wiring: DOM panels driven by ConsoleClient state changes. */

import { ConsoleClient, SocketLike } from "./client.js";
import { frameToImage, progressPercent } from "./render.js";
import { ConsoleState } from "./state.js";

const SCALE = 8;

function browserSocket(url: string): SocketLike {
  const ws = new WebSocket(url);
  const like: SocketLike = {
    send: (text) => ws.send(text),
    close: () => ws.close(),
    onopen: null,
    onmessage: null,
    onclose: null,
  };
  ws.onopen = () => like.onopen?.();
  ws.onmessage = (ev) => like.onmessage?.(String(ev.data));
  ws.onclose = () => like.onclose?.();
  return like;
}

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

function paint(canvas: HTMLCanvasElement, state: ConsoleState, view: string,
               source: "frames" | "subgoal"): void {
  const group = source === "frames" ? state.frames : state.subgoal;
  const frame = group?.[view];
  if (!frame) return;
  const img = frameToImage(frame, SCALE);
  canvas.width = img.width;
  canvas.height = img.height;
  const ctx = canvas.getContext("2d");
  const pixels = new Uint8ClampedArray(img.data); // fresh ArrayBuffer backing
  ctx?.putImageData(new ImageData(pixels, img.width, img.height), 0, 0);
}

function render(state: ConsoleState): void {
  paint(el("view-global"), state, "global", "frames");
  paint(el("view-wrist"), state, "wrist", "frames");
  paint(el("view-subgoal"), state, "global", "subgoal");
  el("status").textContent =
    `${state.connection} | ${state.lifecycle}` +
    (state.status ? ` (${state.status})` : "");
  el("subtask").textContent = state.subtask ?? "—";
  el("version").textContent = String(state.contextVersion);
  el<HTMLProgressElement>("progress").value = progressPercent(state.progress);
  el("progress-label").textContent = `${progressPercent(state.progress)}%`;
  el("banner").textContent = state.banner ?? "";
  el("pending").textContent = state.pending.map((p) => p.text).join(" · ");
  const picks = el("quick-picks");
  if (picks.childElementCount === 0 && state.vocabulary.length > 0) {
    for (const word of state.vocabulary) {
      const b = document.createElement("button");
      b.textContent = word;
      b.onclick = () => trySend(word);
      picks.appendChild(b);
    }
  }
  const stopped = state.lifecycle !== "running" || state.readOnly;
  el<HTMLButtonElement>("send").disabled = stopped;
  el<HTMLInputElement>("instruction").disabled = stopped;
}

let client: ConsoleClient | null = null;

function trySend(text: string): void {
  try {
    client?.sendInstruction(text);
  } catch (err) {
    el("banner").textContent = String(err instanceof Error ? err.message : err);
  }
}

export function boot(): void {
  el<HTMLButtonElement>("connect").onclick = () => {
    client?.close();
    client = new ConsoleClient({
      url: el<HTMLInputElement>("server-url").value,
      connect: browserSocket,
      onChange: render,
    });
    client.connect();
  };
  el<HTMLButtonElement>("start").onclick = () => client?.startEpisode();
  el<HTMLButtonElement>("stop").onclick = () => client?.stopEpisode();
  el<HTMLButtonElement>("send").onclick = () => {
    const box = el<HTMLInputElement>("instruction");
    trySend(box.value);
    box.value = "";
  };
}

if (typeof document !== "undefined" && document.getElementById("connect")) {
  boot();
}
