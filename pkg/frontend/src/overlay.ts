/** Pixel-level overlay compositing, shared by the browser renderer and the
 * tests. Works on plain {width, height, data} RGBA buffers (ImageData-
 * compatible) so it runs identically in the browser and under node. */

import type { ClickRecord } from './types.js';

export interface RgbaBuffer {
  width: number;
  height: number;
  data: Uint8ClampedArray;
}

export const MASK_COLOR: [number, number, number] = [40, 90, 255]; // overlay blue
export const POSITIVE_COLOR: [number, number, number] = [34, 197, 94]; // green dot
export const NEGATIVE_COLOR: [number, number, number] = [239, 68, 68]; // red dot

/** Mask bits as one byte per pixel (0 background, 1 foreground). */
export function maskBitsFromGray(gray: Uint8Array): Uint8Array {
  const bits = new Uint8Array(gray.length);
  for (let i = 0; i < gray.length; i++) bits[i] = gray[i] > 127 ? 1 : 0;
  return bits;
}

/** Alpha-blend the mask color over foreground pixels; opacity 0 is the
 * identity. Background pixels are untouched. */
export function compositeOverlay(
  image: RgbaBuffer,
  maskBits: Uint8Array,
  opacity: number,
  color: [number, number, number] = MASK_COLOR,
): RgbaBuffer {
  if (maskBits.length !== image.width * image.height) {
    throw new Error(
      `mask size ${maskBits.length} != image area ${image.width * image.height}`,
    );
  }
  const out = new Uint8ClampedArray(image.data);
  const a = Math.min(1, Math.max(0, opacity));
  for (let p = 0; p < maskBits.length; p++) {
    if (!maskBits[p]) continue;
    const i = p * 4;
    out[i] = Math.round((1 - a) * out[i] + a * color[0]);
    out[i + 1] = Math.round((1 - a) * out[i + 1] + a * color[1]);
    out[i + 2] = Math.round((1 - a) * out[i + 2] + a * color[2]);
  }
  return { width: image.width, height: image.height, data: out };
}

/** Stamp click dots (filled disks in image pixels) onto the buffer. */
export function drawClickDots(
  image: RgbaBuffer,
  clicks: ClickRecord[],
  radius = 2,
): RgbaBuffer {
  const out = new Uint8ClampedArray(image.data);
  for (const click of clicks) {
    const color = click.polarity === 'positive' ? POSITIVE_COLOR : NEGATIVE_COLOR;
    for (let dr = -radius; dr <= radius; dr++) {
      for (let dc = -radius; dc <= radius; dc++) {
        if (dr * dr + dc * dc > radius * radius) continue;
        const r = click.row + dr;
        const c = click.col + dc;
        if (r < 0 || c < 0 || r >= image.height || c >= image.width) continue;
        const i = (r * image.width + c) * 4;
        out[i] = color[0];
        out[i + 1] = color[1];
        out[i + 2] = color[2];
        out[i + 3] = 255;
      }
    }
  }
  return { width: image.width, height: image.height, data: out };
}

/** Foreground pixel set of a composited overlay relative to the original:
 * exactly the pixels the mask marked (used by the round-trip tests). */
export function changedPixels(original: RgbaBuffer, composited: RgbaBuffer): Uint8Array {
  const bits = new Uint8Array(original.width * original.height);
  for (let p = 0; p < bits.length; p++) {
    const i = p * 4;
    bits[p] =
      original.data[i] !== composited.data[i] ||
      original.data[i + 1] !== composited.data[i + 1] ||
      original.data[i + 2] !== composited.data[i + 2]
        ? 1
        : 0;
  }
  return bits;
}
