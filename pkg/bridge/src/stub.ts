/**
 * Deterministic no-download embedder and segmenter.
 *
 * Embeddings hash the raw input bytes (plus the bbox and a component index)
 * through sha256 into float32-exact values in [-1, 1), so the same bytes
 * always produce bit-identical vectors regardless of transport (JSON reply or
 * .f32 file). The segmenter labels 4-connected components of identical
 * non-black color, which is exact on the engine's synthetic renders.
 */

import { createHash } from 'node:crypto';
import { Raster } from './png.js';

export const STUB_DIM = 64;
export const STUB_SEED = 0;

function unitFloat(payload: Buffer, index: number): number {
  const head = Buffer.alloc(8);
  head.writeUInt32LE(STUB_SEED, 0);
  head.writeUInt32LE(index, 4);
  const digest = createHash('sha256').update(head).update(payload).digest();
  const u = digest.readUInt32BE(0);
  return Math.fround(u / 2 ** 31 - 1);
}

function hashVector(payload: Buffer, dim: number): number[] {
  const out = new Array<number>(dim);
  for (let j = 0; j < dim; j++) out[j] = unitFloat(payload, j);
  return out;
}

function bboxTag(bbox: number[]): Buffer {
  return Buffer.from(`bbox:${bbox.join(',')}`, 'utf8');
}

export function embedText(text: string, dim = STUB_DIM): number[] {
  return hashVector(Buffer.concat([Buffer.from('text:', 'utf8'), Buffer.from(text, 'utf8')]), dim);
}

export function embedRegion(imageBytes: Buffer, bbox: number[], dim = STUB_DIM): number[] {
  return hashVector(Buffer.concat([Buffer.from('region:', 'utf8'), bboxTag(bbox), imageBytes]), dim);
}

export function embedMasked(
  imageBytes: Buffer,
  maskBytes: Buffer,
  bbox: number[],
  dim = STUB_DIM,
): number[] {
  return hashVector(
    Buffer.concat([Buffer.from('masked:', 'utf8'), bboxTag(bbox), imageBytes, maskBytes]),
    dim,
  );
}

/** Label 4-connected regions of identical non-black color, ids dense from 1. */
export function segmentColors(image: Raster): Uint16Array {
  const { width, height, channels, data } = image;
  if (channels < 3) throw new Error('segmenter expects an RGB image');
  const labels = new Uint16Array(width * height);
  const key = (i: number) => (data[i * 3] << 16) | (data[i * 3 + 1] << 8) | data[i * 3 + 2];
  let next = 1;
  const stack: number[] = [];
  for (let start = 0; start < width * height; start++) {
    if (labels[start] !== 0 || key(start) === 0) continue;
    const color = key(start);
    labels[start] = next;
    stack.push(start);
    while (stack.length > 0) {
      const i = stack.pop()!;
      const x = i % width;
      const y = (i / width) | 0;
      const neighbors = [
        x > 0 ? i - 1 : -1,
        x < width - 1 ? i + 1 : -1,
        y > 0 ? i - width : -1,
        y < height - 1 ? i + width : -1,
      ];
      for (const n of neighbors) {
        if (n >= 0 && labels[n] === 0 && key(n) === color) {
          labels[n] = next;
          stack.push(n);
        }
      }
    }
    next += 1;
    if (next > 0xffff) throw new Error('too many segments for a 16-bit id map');
  }
  return labels;
}
