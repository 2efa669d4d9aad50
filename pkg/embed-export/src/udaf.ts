/** UDAF feature-file serialization.
 *
 * Layout, little-endian, no padding:
 *
 *     offset 0   magic   "UDAF"
 *     offset 4   u32     version (currently 1)
 *     offset 8   u32     rows
 *     offset 12  u32     dim
 *     offset 16  u32     flags (bit 0: label block present)
 *     offset 20  f32[rows*dim]   features, row-major
 *     then       u32[rows]       labels, 0xFFFFFFFF encodes UNKNOWN
 *
 * Writers must be byte-deterministic: equal inputs produce equal files.
 */

import { FormatError } from "./errors.js";

export const UNKNOWN = -1;

const MAGIC = "UDAF";
const VERSION = 1;
const HEADER_BYTES = 20;
const FLAG_LABELS = 1;
const UNKNOWN_U32 = 0xffffffff;

export interface FeatureFile {
  rows: number;
  dim: number;
  /** Row-major rows*dim block, already rounded to f32. */
  features: Float32Array;
  /** One label per row, UNKNOWN (-1) allowed; null when absent. */
  labels: Int32Array | null;
}

/** Serialize features (and labels, if given) to UDAF bytes. */
export function encodeFeatures(
  features: Float32Array,
  rows: number,
  dim: number,
  labels?: Int32Array | null,
): Buffer {
  if (!Number.isInteger(rows) || rows < 0) {
    throw new RangeError(`rows must be a non-negative integer, got ${rows}`);
  }
  if (!Number.isInteger(dim) || dim < 1) {
    throw new RangeError(`dim must be a positive integer, got ${dim}`);
  }
  if (features.length !== rows * dim) {
    throw new RangeError(
      `feature block has ${features.length} entries, expected ${rows * dim}`,
    );
  }
  for (let i = 0; i < features.length; i++) {
    if (!Number.isFinite(features[i])) {
      throw new RangeError(`non-finite feature entry at index ${i}`);
    }
  }
  const flags = labels != null ? FLAG_LABELS : 0;
  const labelBytes = labels != null ? 4 * rows : 0;
  const out = Buffer.alloc(HEADER_BYTES + 4 * features.length + labelBytes);
  out.write(MAGIC, 0, "ascii");
  out.writeUInt32LE(VERSION, 4);
  out.writeUInt32LE(rows, 8);
  out.writeUInt32LE(dim, 12);
  out.writeUInt32LE(flags, 16);
  const view = new DataView(out.buffer, out.byteOffset);
  for (let i = 0; i < features.length; i++) {
    view.setFloat32(HEADER_BYTES + 4 * i, features[i], true);
  }
  if (labels != null) {
    if (labels.length !== rows) {
      throw new RangeError(`${labels.length} labels for ${rows} rows`);
    }
    const base = HEADER_BYTES + 4 * features.length;
    for (let i = 0; i < rows; i++) {
      const lab = labels[i];
      if (lab !== UNKNOWN && lab < 0) {
        throw new RangeError(`label ${lab} at row ${i} is not a class or UNKNOWN`);
      }
      view.setUint32(base + 4 * i, lab === UNKNOWN ? UNKNOWN_U32 : lab, true);
    }
  }
  return out;
}

/** Parse UDAF bytes. Raises FormatError, with the byte offset of the
 * first fault, on bad magic/version, impossible header fields,
 * truncation, trailing bytes, or non-finite feature entries. */
export function decodeFeatures(data: Buffer): FeatureFile {
  if (data.length < HEADER_BYTES) {
    throw new FormatError("file shorter than the 20-byte header", data.length);
  }
  if (data.toString("ascii", 0, 4) !== MAGIC) {
    throw new FormatError(`bad magic ${JSON.stringify(data.toString("latin1", 0, 4))}`, 0);
  }
  const version = data.readUInt32LE(4);
  if (version !== VERSION) {
    throw new FormatError(`unsupported version ${version}`, 4);
  }
  const rows = data.readUInt32LE(8);
  const dim = data.readUInt32LE(12);
  if (dim < 1) {
    throw new FormatError("dim must be at least 1", 12);
  }
  const flags = data.readUInt32LE(16);
  if ((flags & ~FLAG_LABELS) !== 0) {
    throw new FormatError(`unknown flag bits 0x${flags.toString(16)}`, 16);
  }
  const featBytes = 4 * rows * dim;
  const labelBytes = flags & FLAG_LABELS ? 4 * rows : 0;
  const expected = HEADER_BYTES + featBytes + labelBytes;
  if (data.length < expected) {
    throw new FormatError(`truncated: expected ${expected} bytes`, data.length);
  }
  if (data.length > expected) {
    throw new FormatError(`${data.length - expected} trailing bytes`, expected);
  }
  const view = new DataView(data.buffer, data.byteOffset);
  const features = new Float32Array(rows * dim);
  for (let i = 0; i < features.length; i++) {
    features[i] = view.getFloat32(HEADER_BYTES + 4 * i, true);
    if (!Number.isFinite(features[i])) {
      throw new FormatError("non-finite feature entry", HEADER_BYTES + 4 * i);
    }
  }
  let labels: Int32Array | null = null;
  if (flags & FLAG_LABELS) {
    labels = new Int32Array(rows);
    for (let i = 0; i < rows; i++) {
      const off = HEADER_BYTES + featBytes + 4 * i;
      const raw = view.getUint32(off, true);
      if (raw !== UNKNOWN_U32 && raw > 0x7fffffff) {
        throw new FormatError(`label ${raw} exceeds the supported range`, off);
      }
      labels[i] = raw === UNKNOWN_U32 ? UNKNOWN : raw;
    }
  }
  return { rows, dim, features, labels };
}
