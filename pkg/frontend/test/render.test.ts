import { describe, expect, it } from "vitest";

import { frameToImage, progressPercent } from "../src/render.js";

describe("nearest-neighbor scaling", () => {
  it("replicates each source pixel into a scale x scale block", () => {
    // 2x2 frame: red, green / blue, white
    const data = new Float32Array([
      1, 0, 0, 0, 1, 0,
      0, 0, 1, 1, 1, 1,
    ]);
    const img = frameToImage({ shape: [2, 2, 3], data }, 3);
    expect(img.width).toBe(6);
    expect(img.height).toBe(6);
    const px = (x: number, y: number) => {
      const i = (y * img.width + x) * 4;
      return [img.data[i], img.data[i + 1], img.data[i + 2], img.data[i + 3]];
    };
    // every pixel of the top-left 3x3 block is pure red, opaque
    for (let y = 0; y < 3; y++) {
      for (let x = 0; x < 3; x++) {
        expect(px(x, y)).toEqual([255, 0, 0, 255]);
      }
    }
    expect(px(5, 0)).toEqual([0, 255, 0, 255]);
    expect(px(0, 5)).toEqual([0, 0, 255, 255]);
    expect(px(5, 5)).toEqual([255, 255, 255, 255]);
  });

  it("clamps out-of-range values instead of wrapping", () => {
    const data = new Float32Array([1.5, -0.2, 0.5]);
    const img = frameToImage({ shape: [1, 1, 3], data }, 1);
    expect([img.data[0], img.data[1], img.data[2]]).toEqual([255, 0, 128]);
  });

  it("rejects non-integer scales", () => {
    const data = new Float32Array(3);
    expect(() => frameToImage({ shape: [1, 1, 3], data }, 1.5)).toThrow(/scale/);
  });
});

describe("progress bar", () => {
  it("maps 0.5 to 50%", () => {
    expect(progressPercent(0.5)).toBe(50);
  });
  it("clamps to [0, 100]", () => {
    expect(progressPercent(-1)).toBe(0);
    expect(progressPercent(2)).toBe(100);
  });
});
