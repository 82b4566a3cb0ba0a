/**
 * NDJSON request/response loop over stdio.
 *
 * The first line written is the handshake announcing the embedding dimension;
 * every following line answers exactly one request, echoing its id in order.
 * Malformed or failing requests produce ok:false responses and the loop
 * continues.
 */

import { createInterface } from 'node:readline';
import { readFileSync, writeFileSync } from 'node:fs';
import { decodePng, encodePng } from './png.js';
import { STUB_DIM, embedMasked, embedRegion, embedText, segmentColors } from './stub.js';

interface Request {
  op?: string;
  id?: number;
  image_path?: string;
  mask_path?: string;
  bbox?: number[];
  text?: string;
}

export interface ServeOptions {
  model: string; // "stub" | "siglip"
  seg: string; // "stub" | "none"
  /** Proposal confidence cutoff for learned segmenters; the stub has none. */
  minConfidence: number;
}

function requireField<T>(value: T | undefined, name: string): T {
  if (value === undefined || value === null) throw new Error(`missing field: ${name}`);
  return value;
}

function handle(req: Request, opts: ServeOptions): Record<string, unknown> {
  const op = requireField(req.op, 'op');
  switch (op) {
    case 'embed_text':
      return { embedding: embedText(requireField(req.text, 'text')) };
    case 'embed_region': {
      const image = readFileSync(requireField(req.image_path, 'image_path'));
      return { embedding: embedRegion(image, requireField(req.bbox, 'bbox')) };
    }
    case 'embed_masked': {
      const image = readFileSync(requireField(req.image_path, 'image_path'));
      const mask = readFileSync(requireField(req.mask_path, 'mask_path'));
      return { embedding: embedMasked(image, mask, requireField(req.bbox, 'bbox')) };
    }
    case 'segment': {
      if (opts.seg === 'none') throw new Error('segmentation disabled (--seg none)');
      const path = requireField(req.image_path, 'image_path');
      const image = decodePng(readFileSync(path));
      const labels = segmentColors(image);
      const out = `${path}.ids.png`;
      writeFileSync(
        out,
        encodePng({
          width: image.width,
          height: image.height,
          channels: 1,
          bitDepth: 16,
          data: labels,
        }),
      );
      return { mask_file: out };
    }
    default:
      throw new Error(`unknown op: ${op}`);
  }
}

export async function serve(opts: ServeOptions): Promise<void> {
  if (opts.model !== 'stub') {
    // Real backbones are loaded on demand; the stub needs no weights.
    try {
      await import('@huggingface/transformers' as string);
    } catch {
      process.stderr.write(
        `model "${opts.model}" needs the optional @huggingface/transformers runtime ` +
          'and downloaded weights; install it or use --model stub\n',
      );
      process.exit(1);
    }
    process.stderr.write(`model "${opts.model}" is not wired up yet; use --model stub\n`);
    process.exit(1);
  }
  process.stdout.write(
    JSON.stringify({ dim: STUB_DIM, models: { embed: 'stub', segment: opts.seg } }) + '\n',
  );
  const rl = createInterface({ input: process.stdin });
  for await (const line of rl) {
    if (!line.trim()) continue;
    let req: Request = {};
    try {
      req = JSON.parse(line) as Request;
      const body = handle(req, opts);
      process.stdout.write(JSON.stringify({ id: req.id ?? null, ok: true, ...body }) + '\n');
    } catch (err) {
      const message = err instanceof Error ? err.message : String(err);
      process.stdout.write(JSON.stringify({ id: req.id ?? null, ok: false, error: message }) + '\n');
    }
  }
}
