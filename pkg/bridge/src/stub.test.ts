import assert from 'node:assert/strict';
import { test } from 'node:test';
import { encodePng } from './png.js';
import { STUB_DIM, embedMasked, embedRegion, embedText, segmentColors } from './stub.js';
import { decodePng } from './png.js';

test('text embedding is deterministic and float32-exact', () => {
  const a = embedText('chair');
  const b = embedText('chair');
  assert.deepEqual(a, b);
  assert.equal(a.length, STUB_DIM);
  for (const v of a) {
    assert.equal(Math.fround(v), v);
    assert.ok(v >= -1 && v < 1);
  }
});

test('different inputs give different vectors', () => {
  assert.notDeepEqual(embedText('chair'), embedText('table'));
  const img = Buffer.from('not-really-a-png');
  assert.notDeepEqual(embedRegion(img, [0, 0, 4, 4]), embedRegion(img, [0, 0, 4, 5]));
  assert.notDeepEqual(
    embedRegion(img, [0, 0, 4, 4]),
    embedMasked(img, Buffer.from('m'), [0, 0, 4, 4]),
  );
});

test('color segmentation labels components densely from 1', () => {
  // 4x3: red block left, blue block right, black gap between
  const w = 4;
  const h = 3;
  const data = new Uint8Array(w * h * 3);
  const put = (x: number, y: number, rgb: number[]) => data.set(rgb, (y * w + x) * 3);
  for (let y = 0; y < h; y++) {
    put(0, y, [255, 0, 0]);
    put(3, y, [0, 0, 255]);
  }
  const raster = { width: w, height: h, channels: 3, bitDepth: 8 as const, data };
  const labels = segmentColors(raster);
  assert.deepEqual(
    Array.from(labels),
    [1, 0, 0, 2, 1, 0, 0, 2, 1, 0, 0, 2],
  );
});

test('same color split by background yields separate ids', () => {
  const w = 3;
  const data = new Uint8Array(w * 3);
  data.set([255, 0, 0], 0);
  data.set([255, 0, 0], 6); // column 2, same color, not adjacent
  const labels = segmentColors({ width: w, height: 1, channels: 3, bitDepth: 8, data });
  assert.deepEqual(Array.from(labels), [1, 0, 2]);
});

test('16-bit id maps roundtrip through the codec', () => {
  const labels = new Uint16Array([1, 0, 2, 2]);
  const png = encodePng({ width: 2, height: 2, channels: 1, bitDepth: 16, data: labels });
  assert.deepEqual(Array.from(decodePng(png).data), [1, 0, 2, 2]);
});
