/** Folder-to-UDAF export.
 *
 * Input layout: one subfolder per class under the input directory.
 * Classes are labeled 0..C-1 in sorted folder order; rows are written
 * in sorted path order (class folder, then file name), so equal inputs
 * produce equal bytes. Embeddings are written raw, not normalized: the
 * consumer pipeline normalizes on ingestion, and the file stays a
 * faithful backbone output.
 *
 * Unreadable entries are skipped with a warning and recorded in the
 * sidecar; a class that contributes no rows is an error, because its
 * label would silently vanish from the file.
 *
 * Sidecar format (UTF-8, LF): '#'-prefixed metadata lines (backbone
 * name + weight hash, preset, one line per skipped entry), then one
 * "index<TAB>name" line per class.
 */

import * as fs from "node:fs";
import * as path from "node:path";

import { Backbone, buildBackbone } from "./backbone.js";
import { ConfigError } from "./errors.js";
import { PRESETS, preprocess } from "./image.js";
import { encodeFeatures } from "./udaf.js";

export interface ExportConfig {
  /** Directory with one subfolder per class. */
  inputDir: string;
  /** Output UDAF path; the sidecar lands next to it. */
  outPath: string;
  backbone?: string;
  /** Preprocessing preset; defaults to the backbone's own. */
  preset?: string;
  batchSize?: number;
  /** Only "cpu" exists; the field names the execution target. */
  device?: string;
}

export interface SkipRecord {
  /** Path relative to the input directory. */
  relPath: string;
  reason: string;
}

export interface ExportReport {
  rows: number;
  dim: number;
  /** Class names in label order. */
  classes: string[];
  /** Rows contributed per class, aligned with `classes`. */
  counts: number[];
  skipped: SkipRecord[];
  udafPath: string;
  sidecarPath: string;
  backboneName: string;
  weightHash: string;
  presetName: string;
}

export const DEFAULT_BACKBONE = "micro-cnn-v1";
export const DEFAULT_BATCH_SIZE = 16;

/** Sidecar path for an output file: features.udaf -> features.labels.tsv. */
export function sidecarPathFor(outPath: string): string {
  const parsed = path.parse(outPath);
  const stem = parsed.ext === ".udaf" ? parsed.name : parsed.base;
  return path.join(parsed.dir, `${stem}.labels.tsv`);
}

interface PendingRow {
  label: number;
  pixels: Float64Array;
}

function resolvePreset(backbone: Backbone, name: string | undefined) {
  const presetName = name ?? backbone.spec.preset;
  const preset = PRESETS[presetName];
  if (preset == null) {
    const known = Object.keys(PRESETS).sort().join(", ");
    throw new ConfigError(`unknown preset ${JSON.stringify(presetName)}; known: ${known}`);
  }
  return preset;
}

/** Export every class folder under cfg.inputDir to one UDAF file plus
 * its label-map sidecar. Deterministic given the config and the input
 * bytes. */
export function exportDataset(cfg: ExportConfig): ExportReport {
  const batchSize = cfg.batchSize ?? DEFAULT_BATCH_SIZE;
  if (!Number.isInteger(batchSize) || batchSize < 1) {
    throw new ConfigError(`batch size must be a positive integer, got ${batchSize}`);
  }
  const device = cfg.device ?? "cpu";
  if (device !== "cpu") {
    throw new ConfigError(`unknown device ${JSON.stringify(device)}; known: cpu`);
  }
  let stat: fs.Stats;
  try {
    stat = fs.statSync(cfg.inputDir);
  } catch {
    throw new ConfigError(`input directory not found: ${cfg.inputDir}`);
  }
  if (!stat.isDirectory()) {
    throw new ConfigError(`not a directory: ${cfg.inputDir}`);
  }

  const backbone = buildBackbone(cfg.backbone ?? DEFAULT_BACKBONE);
  const preset = resolvePreset(backbone, cfg.preset);

  const entries = fs.readdirSync(cfg.inputDir, { withFileTypes: true });
  const classes = entries.filter((e) => e.isDirectory()).map((e) => e.name).sort();
  if (classes.length === 0) {
    throw new ConfigError(`no class folders under ${cfg.inputDir}`);
  }

  const skipped: SkipRecord[] = [];
  const skip = (relPath: string, reason: string) => {
    skipped.push({ relPath, reason });
    console.warn(`embed-export: skipping ${relPath}: ${reason}`);
  };
  for (const e of entries) {
    if (!e.isDirectory()) {
      skip(e.name, "not in a class folder");
    }
  }

  const pending: PendingRow[] = [];
  const counts: number[] = [];
  classes.forEach((cls, label) => {
    const clsDir = path.join(cfg.inputDir, cls);
    const files = fs.readdirSync(clsDir, { withFileTypes: true })
      .sort((a, b) => (a.name < b.name ? -1 : a.name > b.name ? 1 : 0));
    let count = 0;
    for (const entry of files) {
      const relPath = `${cls}/${entry.name}`;
      if (!entry.isFile()) {
        skip(relPath, "not a regular file");
        continue;
      }
      let pixels: Float64Array;
      try {
        pixels = preprocess(fs.readFileSync(path.join(clsDir, entry.name)), preset);
      } catch (err) {
        skip(relPath, (err as Error).message);
        continue;
      }
      pending.push({ label, pixels });
      count += 1;
    }
    if (count === 0) {
      throw new ConfigError(`class ${JSON.stringify(cls)} contributed no readable images`);
    }
    counts.push(count);
  });

  // Inference may run batch-parallel without changing the file: rows
  // are assembled in the already-sorted pending order either way.
  const features = new Float32Array(pending.length * backbone.dim);
  const labels = new Int32Array(pending.length);
  for (let start = 0; start < pending.length; start += batchSize) {
    const batch = pending.slice(start, start + batchSize);
    const embedded = backbone.embedBatch(batch.map((r) => r.pixels), preset.size);
    embedded.forEach((row, i) => {
      features.set(row, (start + i) * backbone.dim);
      labels[start + i] = batch[i].label;
    });
  }

  const sidecarPath = sidecarPathFor(cfg.outPath);
  const lines = [
    `# backbone\t${backbone.spec.name}\tsha256:${backbone.weightHash}`,
    `# preset\t${preset.name}\tsize=${preset.size}`,
    ...skipped.map((s) => `# skipped\t${s.relPath}\t${s.reason}`),
    ...classes.map((cls, i) => `${i}\t${cls}`),
  ];
  fs.writeFileSync(cfg.outPath, encodeFeatures(features, pending.length, backbone.dim, labels));
  fs.writeFileSync(sidecarPath, lines.join("\n") + "\n", "utf-8");

  return {
    rows: pending.length,
    dim: backbone.dim,
    classes,
    counts,
    skipped,
    udafPath: cfg.outPath,
    sidecarPath,
    backboneName: backbone.spec.name,
    weightHash: backbone.weightHash,
    presetName: preset.name,
  };
}
