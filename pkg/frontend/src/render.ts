/**
 * Pure pixel math for the view panels. Frames are scaled by plain
 * nearest-neighbor replication — no smoothing — so what the coach sees is
 * exactly the grid the model sees.
 */

import { Frame } from "./protocol.js";

export interface RGBAImage {
  width: number;
  height: number;
  /** Row-major RGBA bytes, length width * height * 4. */
  data: Uint8ClampedArray;
}

function toByte(v: number): number {
  return Math.max(0, Math.min(255, Math.round(v * 255)));
}

export function frameToImage(frame: Frame, scale: number): RGBAImage {
  if (!Number.isInteger(scale) || scale < 1) {
    throw new Error("scale must be a positive integer");
  }
  const [h, w] = [frame.shape[0], frame.shape[1]];
  const width = w * scale;
  const height = h * scale;
  const out = new Uint8ClampedArray(width * height * 4);
  for (let y = 0; y < height; y++) {
    const sy = Math.floor(y / scale);
    for (let x = 0; x < width; x++) {
      const sx = Math.floor(x / scale);
      const src = (sy * w + sx) * 3;
      const dst = (y * width + x) * 4;
      out[dst] = toByte(frame.data[src] ?? 0);
      out[dst + 1] = toByte(frame.data[src + 1] ?? 0);
      out[dst + 2] = toByte(frame.data[src + 2] ?? 0);
      out[dst + 3] = 255;
    }
  }
  return { width, height, data: out };
}

/** Progress in [0, 1] to a whole percentage for the progress bar. */
export function progressPercent(progress: number): number {
  return Math.round(Math.max(0, Math.min(1, progress)) * 100);
}
