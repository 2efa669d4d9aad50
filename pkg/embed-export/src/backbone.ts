/** Deterministic embedding backbones.
 *
 * Weights are generated from a per-name seed, never loaded from the
 * network, so an export is reproducible from the repository alone. The
 * SHA-256 of the exact weight bytes (little-endian f32, declared layer
 * order) is exposed as `weightHash` and recorded in the export sidecar,
 * pinning which parameters produced a given file.
 *
 * Architecture per name: stride-2 3x3 convolutions with tanh, global
 * average pooling, then a linear projection. The projection output is
 * the embedding; there is no classifier head. All arithmetic is plain
 * float64 with f32-rounded weights, so equal inputs give equal bytes.
 */

import { createHash } from "node:crypto";

import { ConfigError } from "./errors.js";

export interface BackboneSpec {
  name: string;
  seed: number;
  /** Default preprocessing preset name (see image.PRESETS). */
  preset: string;
  /** Channel progression; channels[0] is the input channel count. */
  channels: readonly number[];
  /** Embedding width. */
  dim: number;
}

export const BACKBONES: Record<string, BackboneSpec> = {
  "micro-cnn-v1": {
    name: "micro-cnn-v1",
    seed: 0x01ec5ed,
    preset: "centered32",
    channels: [3, 8, 16, 32],
    dim: 64,
  },
};

/** mulberry32: tiny deterministic PRNG over [0, 1). */
function mulberry32(seed: number): () => number {
  let a = seed >>> 0;
  return () => {
    a = (a + 0x6d2b79f5) >>> 0;
    let t = a;
    t = Math.imul(t ^ (t >>> 15), t | 1);
    t ^= t + Math.imul(t ^ (t >>> 7), t | 61);
    return ((t ^ (t >>> 14)) >>> 0) / 4294967296;
  };
}

/** Uniform(-limit, limit) fill with limit = sqrt(6 / fanIn). */
function initTensor(rng: () => number, count: number, fanIn: number): Float32Array {
  const limit = Math.sqrt(6 / fanIn);
  const out = new Float32Array(count);
  for (let i = 0; i < count; i++) {
    out[i] = (2 * rng() - 1) * limit;
  }
  return out;
}

interface ConvLayer {
  /** [outC][ky][kx][inC] flattened. */
  weight: Float32Array;
  bias: Float32Array;
  inC: number;
  outC: number;
}

interface LinearLayer {
  /** [outC][inC] flattened. */
  weight: Float32Array;
  bias: Float32Array;
  inC: number;
  outC: number;
}

function hashWeights(tensors: Float32Array[]): string {
  const h = createHash("sha256");
  for (const t of tensors) {
    const buf = Buffer.alloc(4 * t.length);
    const view = new DataView(buf.buffer, buf.byteOffset);
    for (let i = 0; i < t.length; i++) {
      view.setFloat32(4 * i, t[i], true);
    }
    h.update(buf);
  }
  return h.digest("hex");
}

/** 3x3 conv, stride 2, pad 1, tanh. Input/output are HWC float64. */
function convForward(layer: ConvLayer, input: Float64Array, size: number): { out: Float64Array; size: number } {
  const { weight, bias, inC, outC } = layer;
  const outSize = Math.floor((size - 1) / 2) + 1;
  const out = new Float64Array(outSize * outSize * outC);
  for (let oy = 0; oy < outSize; oy++) {
    for (let ox = 0; ox < outSize; ox++) {
      for (let oc = 0; oc < outC; oc++) {
        let acc = bias[oc];
        for (let ky = 0; ky < 3; ky++) {
          const iy = 2 * oy + ky - 1;
          if (iy < 0 || iy >= size) continue;
          for (let kx = 0; kx < 3; kx++) {
            const ix = 2 * ox + kx - 1;
            if (ix < 0 || ix >= size) continue;
            const wBase = ((oc * 3 + ky) * 3 + kx) * inC;
            const iBase = (iy * size + ix) * inC;
            for (let ic = 0; ic < inC; ic++) {
              acc += weight[wBase + ic] * input[iBase + ic];
            }
          }
        }
        out[(oy * outSize + ox) * outC + oc] = Math.tanh(acc);
      }
    }
  }
  return { out, size: outSize };
}

export class Backbone {
  readonly spec: BackboneSpec;
  readonly weightHash: string;
  readonly dim: number;
  private readonly convs: ConvLayer[];
  private readonly proj: LinearLayer;

  constructor(spec: BackboneSpec) {
    this.spec = spec;
    this.dim = spec.dim;
    const rng = mulberry32(spec.seed);
    this.convs = [];
    const tensors: Float32Array[] = [];
    for (let i = 0; i + 1 < spec.channels.length; i++) {
      const inC = spec.channels[i];
      const outC = spec.channels[i + 1];
      const weight = initTensor(rng, outC * 3 * 3 * inC, 3 * 3 * inC);
      const bias = initTensor(rng, outC, 3 * 3 * inC);
      this.convs.push({ weight, bias, inC, outC });
      tensors.push(weight, bias);
    }
    const lastC = spec.channels[spec.channels.length - 1];
    this.proj = {
      weight: initTensor(rng, spec.dim * lastC, lastC),
      bias: initTensor(rng, spec.dim, lastC),
      inC: lastC,
      outC: spec.dim,
    };
    tensors.push(this.proj.weight, this.proj.bias);
    this.weightHash = hashWeights(tensors);
  }

  /** Embed one preprocessed HWC size x size x channels[0] block. */
  embed(input: Float64Array, size: number): Float32Array {
    const inC = this.convs[0].inC;
    if (input.length !== size * size * inC) {
      throw new RangeError(
        `input has ${input.length} entries, expected ${size * size * inC}`,
      );
    }
    let act = input;
    let actSize = size;
    for (const conv of this.convs) {
      const next = convForward(conv, act, actSize);
      act = next.out;
      actSize = next.size;
    }
    const lastC = this.proj.inC;
    const pooled = new Float64Array(lastC);
    const cells = actSize * actSize;
    for (let i = 0; i < cells; i++) {
      for (let c = 0; c < lastC; c++) {
        pooled[c] += act[i * lastC + c];
      }
    }
    for (let c = 0; c < lastC; c++) {
      pooled[c] /= cells;
    }
    const out = new Float32Array(this.dim);
    for (let o = 0; o < this.dim; o++) {
      let acc = this.proj.bias[o];
      for (let c = 0; c < lastC; c++) {
        acc += this.proj.weight[o * lastC + c] * pooled[c];
      }
      out[o] = acc;
    }
    return out;
  }

  /** Embed a batch; output order always matches input order. */
  embedBatch(inputs: readonly Float64Array[], size: number): Float32Array[] {
    return inputs.map((input) => this.embed(input, size));
  }
}

/** Construct a registered backbone. Unknown names are a ConfigError. */
export function buildBackbone(name: string): Backbone {
  const spec = BACKBONES[name];
  if (spec == null) {
    const known = Object.keys(BACKBONES).sort().join(", ");
    throw new ConfigError(`unknown backbone ${JSON.stringify(name)}; known: ${known}`);
  }
  return new Backbone(spec);
}
