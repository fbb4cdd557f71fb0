// Target-region overlays: decode the run events' RLE payloads into RGBA
// pixels for canvas compositing. Decoding must reproduce the mask bits
// exactly; rendering only colors them.

import { rleToMask } from "./canonical.js";

export interface OverlayColor {
  r: number;
  g: number;
  b: number;
  a: number;
}

export const REGION_COLORS: OverlayColor[] = [
  { r: 80, g: 170, b: 255, a: 110 },
  { r: 255, g: 170, b: 60, a: 110 },
  { r: 120, g: 230, b: 120, a: 110 },
  { r: 230, g: 110, b: 230, a: 110 },
];

export function decodeOverlay(rle: string): { bits: Uint8Array; width: number; height: number } {
  return rleToMask(rle);
}

// RGBA buffer for one region mask; transparent off the region. Backed by
// a plain ArrayBuffer so it can feed ImageData directly.
export function overlayPixels(bits: Uint8Array, width: number, height: number,
                              color: OverlayColor): Uint8ClampedArray<ArrayBuffer> {
  const out = new Uint8ClampedArray(new ArrayBuffer(width * height * 4));
  for (let i = 0; i < width * height; i++) {
    if (bits[i]) {
      out[i * 4] = color.r;
      out[i * 4 + 1] = color.g;
      out[i * 4 + 2] = color.b;
      out[i * 4 + 3] = color.a;
    }
  }
  return out;
}

// Inverse of overlayPixels for verification: a pixel is on the region
// exactly when it is not fully transparent.
export function pixelsToMask(pixels: Uint8ClampedArray): Uint8Array {
  const bits = new Uint8Array(pixels.length / 4);
  for (let i = 0; i < bits.length; i++) {
    bits[i] = pixels[i * 4 + 3] > 0 ? 1 : 0;
  }
  return bits;
}

export function renderOverlays(
  ctx: CanvasRenderingContext2D,
  previews: string[],
  scale: number,
): void {
  previews.forEach((rle, i) => {
    const { bits, width, height } = decodeOverlay(rle);
    const color = REGION_COLORS[i % REGION_COLORS.length];
    const pixels = overlayPixels(bits, width, height, color);
    const off = new OffscreenCanvas(width, height);
    const offCtx = off.getContext("2d")!;
    offCtx.putImageData(new ImageData(pixels, width, height), 0, 0);
    ctx.imageSmoothingEnabled = false;
    ctx.drawImage(off, 0, 0, width * scale, height * scale);
  });
}
