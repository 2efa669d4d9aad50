#!/usr/bin/env node
/** Command-line surface.
 *
 *     embed-export <input-dir> --out features.udaf
 *                  [--backbone micro-cnn-v1] [--preset centered32]
 *                  [--batch 16] [--device cpu]
 *
 * Deterministic given its flags and the input bytes. Exit codes:
 * 0 success, 1 runtime error, 2 usage error.
 */

import { parseArgs } from "node:util";

import { BACKBONES } from "./backbone.js";
import { ConfigError, ExportError } from "./errors.js";
import { PRESETS } from "./image.js";
import { DEFAULT_BACKBONE, DEFAULT_BATCH_SIZE, exportDataset } from "./exporter.js";

const USAGE = `usage: embed-export <input-dir> --out <features.udaf>
                    [--backbone <name>] [--preset <name>]
                    [--batch <n>] [--device cpu]

Converts an image folder (one subfolder per class) into a UDAF feature
file plus a label-map sidecar. Backbones: ${Object.keys(BACKBONES).sort().join(", ")}.
Presets: ${Object.keys(PRESETS).sort().join(", ")}.`;

function main(argv: string[]): number {
  let parsed;
  try {
    parsed = parseArgs({
      args: argv,
      allowPositionals: true,
      options: {
        out: { type: "string" },
        backbone: { type: "string", default: DEFAULT_BACKBONE },
        preset: { type: "string" },
        batch: { type: "string", default: String(DEFAULT_BATCH_SIZE) },
        device: { type: "string", default: "cpu" },
        help: { type: "boolean", default: false },
      },
    });
  } catch (err) {
    console.error(`embed-export: ${(err as Error).message}`);
    console.error(USAGE);
    return 2;
  }
  if (parsed.values.help) {
    console.log(USAGE);
    return 0;
  }
  if (parsed.positionals.length !== 1 || !parsed.values.out) {
    console.error("embed-export: need exactly one input directory and --out");
    console.error(USAGE);
    return 2;
  }
  const batchSize = Number(parsed.values.batch);

  try {
    const report = exportDataset({
      inputDir: parsed.positionals[0],
      outPath: parsed.values.out,
      backbone: parsed.values.backbone,
      preset: parsed.values.preset,
      batchSize,
      device: parsed.values.device,
    });
    console.log(`wrote ${report.udafPath}: ${report.rows} rows x ${report.dim} dims`);
    console.log(`wrote ${report.sidecarPath}: ${report.classes.length} classes`);
    report.classes.forEach((cls, i) => {
      console.log(`  ${i}\t${cls}\t${report.counts[i]} rows`);
    });
    if (report.skipped.length > 0) {
      console.log(`skipped ${report.skipped.length} entries (see sidecar)`);
    }
    console.log(`backbone ${report.backboneName} sha256:${report.weightHash}`);
    return 0;
  } catch (err) {
    if (err instanceof ConfigError) {
      console.error(`embed-export: ${err.message}`);
      console.error(USAGE);
      return 2;
    }
    if (err instanceof ExportError) {
      console.error(`embed-export: ${err.message}`);
      return 1;
    }
    throw err;
  }
}

process.exitCode = main(process.argv.slice(2));
