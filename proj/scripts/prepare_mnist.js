#!/usr/bin/env node
// Packs a balanced MNIST sample into IDX files under data/.
//
// Source: the `mnist` npm package, which ships 10,000 MNIST digits as JSON
// (28x28 grayscale, row-major, floats in [0,1]).  Install it first:
//   npm install mnist
// then run
//   node scripts/prepare_mnist.js <path-to-node_modules/mnist> <out-dir>
//
// Output: four IDX files (unsigned-byte pixels, big-endian headers):
//   mnist-train-images.idx  mnist-train-labels.idx   700 images per digit
//   mnist-test-images.idx   mnist-test-labels.idx    100 images per digit

const fs = require('fs');
const path = require('path');

const TRAIN_PER_DIGIT = 700;
const TEST_PER_DIGIT = 100;
const ROWS = 28, COLS = 28;

function writeIdxImages(file, images) {
  const header = Buffer.alloc(16);
  header.writeUInt32BE(0x00000803, 0);
  header.writeUInt32BE(images.length, 4);
  header.writeUInt32BE(ROWS, 8);
  header.writeUInt32BE(COLS, 12);
  const body = Buffer.alloc(images.length * ROWS * COLS);
  let o = 0;
  for (const img of images)
    for (const v of img)
      body[o++] = Math.max(0, Math.min(255, Math.round(v * 255)));
  fs.writeFileSync(file, Buffer.concat([header, body]));
}

function writeIdxLabels(file, labels) {
  const header = Buffer.alloc(8);
  header.writeUInt32BE(0x00000801, 0);
  header.writeUInt32BE(labels.length, 4);
  fs.writeFileSync(file, Buffer.concat([header, Buffer.from(labels)]));
}

const srcDir = process.argv[2] || 'node_modules/mnist';
const outDir = process.argv[3] || 'data';
fs.mkdirSync(outDir, { recursive: true });

const trainImages = [], trainLabels = [], testImages = [], testLabels = [];
for (let digit = 0; digit < 10; digit++) {
  const raw = JSON.parse(fs.readFileSync(path.join(srcDir, 'src', 'digits', digit + '.json'))).data;
  const count = raw.length / (ROWS * COLS);
  if (count < TRAIN_PER_DIGIT + TEST_PER_DIGIT)
    throw new Error(`digit ${digit}: only ${count} images available`);
  const img = i => raw.slice(i * ROWS * COLS, (i + 1) * ROWS * COLS);
  for (let i = 0; i < TRAIN_PER_DIGIT; i++) { trainImages.push(img(i)); trainLabels.push(digit); }
  for (let i = 0; i < TEST_PER_DIGIT; i++) { testImages.push(img(TRAIN_PER_DIGIT + i)); testLabels.push(digit); }
}

writeIdxImages(path.join(outDir, 'mnist-train-images.idx'), trainImages);
writeIdxLabels(path.join(outDir, 'mnist-train-labels.idx'), trainLabels);
writeIdxImages(path.join(outDir, 'mnist-test-images.idx'), testImages);
writeIdxLabels(path.join(outDir, 'mnist-test-labels.idx'), testLabels);
console.log(`wrote ${trainImages.length} train / ${testImages.length} test images to ${outDir}`);
