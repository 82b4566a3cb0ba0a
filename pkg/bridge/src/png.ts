/**
 * Minimal PNG codec for the formats the engine exchanges:
 * grayscale 8/16-bit (depth, masks, id maps) and 8-bit RGB/RGBA (color, crops).
 * No interlacing, no palettes. Compression via node:zlib.
 */

import { deflateSync, inflateSync } from 'node:zlib';

const SIGNATURE = Buffer.from([137, 80, 78, 71, 13, 10, 26, 10]);

const CRC_TABLE = (() => {
  const table = new Uint32Array(256);
  for (let n = 0; n < 256; n++) {
    let c = n;
    for (let k = 0; k < 8; k++) c = c & 1 ? 0xedb88320 ^ (c >>> 1) : c >>> 1;
    table[n] = c >>> 0;
  }
  return table;
})();

function crc32(buf: Buffer): number {
  let c = 0xffffffff;
  for (let i = 0; i < buf.length; i++) c = CRC_TABLE[(c ^ buf[i]) & 0xff] ^ (c >>> 8);
  return (c ^ 0xffffffff) >>> 0;
}

export interface Raster {
  width: number;
  height: number;
  channels: number; // 1 gray, 3 rgb
  bitDepth: 8 | 16;
  /** Row-major, channel-interleaved samples. */
  data: Uint8Array | Uint16Array;
}

function channelsFor(colorType: number): number {
  switch (colorType) {
    case 0:
      return 1;
    case 2:
      return 3;
    case 4:
      return 2;
    case 6:
      return 4;
    default:
      throw new Error(`unsupported PNG color type ${colorType}`);
  }
}

function paeth(a: number, b: number, c: number): number {
  const p = a + b - c;
  const pa = Math.abs(p - a);
  const pb = Math.abs(p - b);
  const pc = Math.abs(p - c);
  if (pa <= pb && pa <= pc) return a;
  return pb <= pc ? b : c;
}

export function decodePng(buf: Buffer): Raster {
  if (!buf.subarray(0, 8).equals(SIGNATURE)) throw new Error('not a PNG file');
  let pos = 8;
  let width = 0;
  let height = 0;
  let bitDepth = 0;
  let colorType = 0;
  const idat: Buffer[] = [];
  while (pos < buf.length) {
    const len = buf.readUInt32BE(pos);
    const kind = buf.toString('ascii', pos + 4, pos + 8);
    const body = buf.subarray(pos + 8, pos + 8 + len);
    if (kind === 'IHDR') {
      width = body.readUInt32BE(0);
      height = body.readUInt32BE(4);
      bitDepth = body[8];
      colorType = body[9];
      if (body[12] !== 0) throw new Error('interlaced PNG unsupported');
      if (bitDepth !== 8 && bitDepth !== 16) throw new Error(`bit depth ${bitDepth} unsupported`);
    } else if (kind === 'IDAT') {
      idat.push(body);
    } else if (kind === 'IEND') {
      break;
    }
    pos += 12 + len;
  }
  const raw = inflateSync(Buffer.concat(idat));
  const nchan = channelsFor(colorType);
  const bytesPerSample = bitDepth / 8;
  const bpp = nchan * bytesPerSample;
  const stride = width * bpp;
  const out = Buffer.alloc(height * stride);
  for (let y = 0; y < height; y++) {
    const filter = raw[y * (stride + 1)];
    const row = raw.subarray(y * (stride + 1) + 1, (y + 1) * (stride + 1));
    const cur = out.subarray(y * stride, (y + 1) * stride);
    const prev = y > 0 ? out.subarray((y - 1) * stride, y * stride) : null;
    for (let x = 0; x < stride; x++) {
      const a = x >= bpp ? cur[x - bpp] : 0;
      const b = prev ? prev[x] : 0;
      const c = prev && x >= bpp ? prev[x - bpp] : 0;
      let v = row[x];
      if (filter === 1) v += a;
      else if (filter === 2) v += b;
      else if (filter === 3) v += (a + b) >> 1;
      else if (filter === 4) v += paeth(a, b, c);
      else if (filter !== 0) throw new Error(`unknown PNG filter ${filter}`);
      cur[x] = v & 0xff;
    }
  }
  // drop the alpha channel if present; the engine never uses it
  const keep = nchan === 2 ? 1 : nchan === 4 ? 3 : nchan;
  const n = width * height;
  if (bitDepth === 8) {
    const data = new Uint8Array(n * keep);
    for (let i = 0; i < n; i++)
      for (let ch = 0; ch < keep; ch++) data[i * keep + ch] = out[i * nchan + ch];
    return { width, height, channels: keep, bitDepth: 8, data };
  }
  const data = new Uint16Array(n * keep);
  for (let i = 0; i < n; i++)
    for (let ch = 0; ch < keep; ch++) data[i * keep + ch] = out.readUInt16BE((i * nchan + ch) * 2);
  return { width, height, channels: keep, bitDepth: 16, data };
}

function chunk(kind: string, body: Buffer): Buffer {
  const head = Buffer.alloc(8);
  head.writeUInt32BE(body.length, 0);
  head.write(kind, 4, 'ascii');
  const crc = Buffer.alloc(4);
  crc.writeUInt32BE(crc32(Buffer.concat([head.subarray(4), body])), 0);
  return Buffer.concat([head, body, crc]);
}

export function encodePng(raster: Raster): Buffer {
  const { width, height, channels, bitDepth, data } = raster;
  const colorType = channels === 1 ? 0 : 2;
  const bytesPerSample = bitDepth / 8;
  const stride = width * channels * bytesPerSample;
  const raw = Buffer.alloc(height * (stride + 1));
  for (let y = 0; y < height; y++) {
    const base = y * (stride + 1);
    raw[base] = 0; // filter None on every row
    for (let x = 0; x < width * channels; x++) {
      const v = data[y * width * channels + x];
      if (bitDepth === 8) raw[base + 1 + x] = v;
      else raw.writeUInt16BE(v, base + 1 + x * 2);
    }
  }
  const ihdr = Buffer.alloc(13);
  ihdr.writeUInt32BE(width, 0);
  ihdr.writeUInt32BE(height, 4);
  ihdr[8] = bitDepth;
  ihdr[9] = colorType;
  return Buffer.concat([
    SIGNATURE,
    chunk('IHDR', ihdr),
    chunk('IDAT', deflateSync(raw)),
    chunk('IEND', Buffer.alloc(0)),
  ]);
}
