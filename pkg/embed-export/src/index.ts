export { ConfigError, ExportError, FormatError } from "./errors.js";
export { UNKNOWN, encodeFeatures, decodeFeatures } from "./udaf.js";
export type { FeatureFile } from "./udaf.js";
export { PRESETS, decodePng, preprocess, resizeBilinear } from "./image.js";
export type { Pixels, Preset } from "./image.js";
export { BACKBONES, Backbone, buildBackbone } from "./backbone.js";
export type { BackboneSpec } from "./backbone.js";
export {
  DEFAULT_BACKBONE,
  DEFAULT_BATCH_SIZE,
  exportDataset,
  sidecarPathFor,
} from "./exporter.js";
export type { ExportConfig, ExportReport, SkipRecord } from "./exporter.js";
