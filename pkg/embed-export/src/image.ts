/** Image decoding and preprocessing.
 *
 * Decoding accepts PNG only; pngjs normalizes every color type
 * (grayscale, palette, RGB, with or without alpha, 8- or 16-bit) to
 * 8-bit RGBA. Alpha is dropped, not composited: exports describe the
 * stored color values, and compositing would make them depend on an
 * arbitrary background choice.
 *
 * Resize is bilinear with half-pixel centers (sample at
 * (dst + 0.5) * scale - 0.5, edges clamped), computed in float64 so the
 * result is a pure function of the pixel bytes. Presets then map [0,1]
 * channel values through (value - mean) / std.
 */

import { PNG } from "pngjs";

import { FormatError } from "./errors.js";

export interface Pixels {
  width: number;
  height: number;
  /** RGBA, 8-bit, row-major. */
  data: Uint8Array;
}

export interface Preset {
  name: string;
  /** Output is size x size pixels, RGB. */
  size: number;
  mean: readonly [number, number, number];
  std: readonly [number, number, number];
}

/** Normalization presets. `centered32` matches the backbone training
 * convention of pixels in [-1, 1]; `unit32` leaves them in [0, 1]. */
export const PRESETS: Record<string, Preset> = {
  "centered32": { name: "centered32", size: 32, mean: [0.5, 0.5, 0.5], std: [0.5, 0.5, 0.5] },
  "unit32": { name: "unit32", size: 32, mean: [0.0, 0.0, 0.0], std: [1.0, 1.0, 1.0] },
};

/** Decode a PNG buffer. Throws FormatError on anything malformed. */
export function decodePng(data: Buffer): Pixels {
  let png: PNG;
  try {
    png = PNG.sync.read(data);
  } catch (err) {
    throw new FormatError(`not a decodable PNG: ${(err as Error).message}`, 0);
  }
  return { width: png.width, height: png.height, data: new Uint8Array(png.data) };
}

/** Resize to size x size RGB in [0,1], bilinear, alpha dropped. */
export function resizeBilinear(img: Pixels, size: number): Float64Array {
  if (img.width < 1 || img.height < 1) {
    throw new RangeError("image has no pixels");
  }
  const out = new Float64Array(size * size * 3);
  const scaleX = img.width / size;
  const scaleY = img.height / size;
  for (let dy = 0; dy < size; dy++) {
    const srcY = (dy + 0.5) * scaleY - 0.5;
    const y0 = Math.min(Math.max(Math.floor(srcY), 0), img.height - 1);
    const y1 = Math.min(y0 + 1, img.height - 1);
    const fy = Math.min(Math.max(srcY - y0, 0), 1);
    for (let dx = 0; dx < size; dx++) {
      const srcX = (dx + 0.5) * scaleX - 0.5;
      const x0 = Math.min(Math.max(Math.floor(srcX), 0), img.width - 1);
      const x1 = Math.min(x0 + 1, img.width - 1);
      const fx = Math.min(Math.max(srcX - x0, 0), 1);
      for (let c = 0; c < 3; c++) {
        const p00 = img.data[4 * (y0 * img.width + x0) + c];
        const p01 = img.data[4 * (y0 * img.width + x1) + c];
        const p10 = img.data[4 * (y1 * img.width + x0) + c];
        const p11 = img.data[4 * (y1 * img.width + x1) + c];
        const top = p00 + (p01 - p00) * fx;
        const bot = p10 + (p11 - p10) * fx;
        out[(dy * size + dx) * 3 + c] = (top + (bot - top) * fy) / 255;
      }
    }
  }
  return out;
}

/** Decode bytes and produce the preset's normalized HWC float block. */
export function preprocess(data: Buffer, preset: Preset): Float64Array {
  const img = decodePng(data);
  const rgb = resizeBilinear(img, preset.size);
  for (let i = 0; i < rgb.length; i++) {
    const c = i % 3;
    rgb[i] = (rgb[i] - preset.mean[c]) / preset.std[c];
  }
  return rgb;
}
