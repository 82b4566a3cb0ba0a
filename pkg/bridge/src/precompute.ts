/**
 * Batch precomputation into the engine's dataset layout.
 *
 * Pass 1 (--root + --stride): segment every strided color frame and write
 * masks/%06d.png 16-bit id maps.
 * Pass 2 (--root + --manifest): embed the crop files listed in an
 * engine-produced crop manifest and write embeds/%06d_%04d_%d.f32 rows.
 */

import { existsSync, mkdirSync, readFileSync, readdirSync, writeFileSync } from 'node:fs';
import { join, resolve } from 'node:path';
import { decodePng, encodePng } from './png.js';
import { embedMasked, embedRegion, segmentColors } from './stub.js';

export interface PrecomputeOptions {
  root: string;
  stride: number;
  manifest?: string;
  cropsBase?: string;
}

interface ManifestEntry {
  frame: number;
  instance: number;
  crop_type: number;
  image: string;
  mask: string | null;
}

function pad(n: number, width: number): string {
  return n.toString().padStart(width, '0');
}

export function precomputeMasks(root: string, stride: number): number {
  const colorDir = join(root, 'color');
  const maskDir = join(root, 'masks');
  if (!existsSync(colorDir)) throw new Error(`no color directory under ${root}`);
  mkdirSync(maskDir, { recursive: true });
  const indices = readdirSync(colorDir)
    .filter((f) => f.endsWith('.png'))
    .map((f) => parseInt(f, 10))
    .sort((a, b) => a - b);
  let written = 0;
  let failures = 0;
  for (let i = 0; i < indices.length; i += stride) {
    const idx = indices[i];
    try {
      const image = decodePng(readFileSync(join(colorDir, `${pad(idx, 6)}.png`)));
      const labels = segmentColors(image);
      writeFileSync(
        join(maskDir, `${pad(idx, 6)}.png`),
        encodePng({
          width: image.width,
          height: image.height,
          channels: 1,
          bitDepth: 16,
          data: labels,
        }),
      );
      written += 1;
    } catch (err) {
      failures += 1;
      process.stderr.write(`frame ${idx}: ${err instanceof Error ? err.message : err}\n`);
    }
  }
  if (failures > 0) throw new Error(`${failures} frames failed`);
  return written;
}

export function precomputeEmbeddings(root: string, manifestPath: string, cropsBase: string): number {
  const entries = JSON.parse(readFileSync(manifestPath, 'utf8')) as ManifestEntry[];
  const embedDir = join(root, 'embeds');
  mkdirSync(embedDir, { recursive: true });
  let written = 0;
  for (const entry of entries) {
    const imageBytes = readFileSync(resolve(cropsBase, entry.image));
    const { width, height } = decodePng(imageBytes);
    const bbox = [0, 0, width, height];
    const vec = entry.mask
      ? embedMasked(imageBytes, readFileSync(resolve(cropsBase, entry.mask)), bbox)
      : embedRegion(imageBytes, bbox);
    const buf = Buffer.alloc(vec.length * 4);
    vec.forEach((v, i) => buf.writeFloatLE(v, i * 4));
    const name = `${pad(entry.frame, 6)}_${pad(entry.instance, 4)}_${entry.crop_type}.f32`;
    writeFileSync(join(embedDir, name), buf);
    written += 1;
  }
  return written;
}

export function precompute(opts: PrecomputeOptions): void {
  if (opts.manifest) {
    const n = precomputeEmbeddings(opts.root, opts.manifest, opts.cropsBase ?? opts.root);
    process.stderr.write(`wrote ${n} embedding files under ${join(opts.root, 'embeds')}\n`);
  } else {
    const n = precomputeMasks(opts.root, opts.stride);
    process.stderr.write(`wrote ${n} mask files under ${join(opts.root, 'masks')}\n`);
  }
}
