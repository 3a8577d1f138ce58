/** 8-bit PNG IO on top of pngjs: RGB images and single-channel masks. */

import * as fs from "node:fs";
import { PNG } from "pngjs";

export interface Rgb {
  width: number;
  height: number;
  data: Uint8Array; // 3 * width * height, row-major RGB
}

export interface Gray {
  width: number;
  height: number;
  data: Uint8Array; // width * height
}

export function readRgb(path: string): Rgb {
  const png = PNG.sync.read(fs.readFileSync(path));
  const n = png.width * png.height;
  const data = new Uint8Array(3 * n);
  for (let i = 0; i < n; i++) {
    data[3 * i] = png.data[4 * i];
    data[3 * i + 1] = png.data[4 * i + 1];
    data[3 * i + 2] = png.data[4 * i + 2];
  }
  return { width: png.width, height: png.height, data };
}

/** Masks are stored as true single-channel PNGs, so any channel serves. */
export function readGray(path: string): Gray {
  const png = PNG.sync.read(fs.readFileSync(path));
  const n = png.width * png.height;
  const data = new Uint8Array(n);
  for (let i = 0; i < n; i++) {
    data[i] = png.data[4 * i];
  }
  return { width: png.width, height: png.height, data };
}

export function writeGray(gray: Gray, path: string): void {
  const png = new PNG({ width: gray.width, height: gray.height });
  png.data = Buffer.from(gray.data);
  fs.writeFileSync(
    path,
    PNG.sync.write(png, { colorType: 0, inputColorType: 0, bitDepth: 8 })
  );
}

export function writeRgb(rgb: Rgb, path: string): void {
  const png = new PNG({ width: rgb.width, height: rgb.height });
  png.data = Buffer.from(rgb.data);
  fs.writeFileSync(
    path,
    PNG.sync.write(png, { colorType: 2, inputColorType: 2, bitDepth: 8 })
  );
}
