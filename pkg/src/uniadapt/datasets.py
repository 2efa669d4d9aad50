"""Feature-file serialization (UDAF) and the synthetic benchmark generator.

UDAF layout, little-endian, no padding:

    offset 0   magic   b"UDAF"
    offset 4   u32     version (currently 1)
    offset 8   u32     rows
    offset 12  u32     dim
    offset 16  u32     flags (bit 0: label block present)
    offset 20  f32[rows*dim]   features, row-major
    then       u32[rows]       labels, 0xFFFFFFFF encodes UNKNOWN

Writers must be byte-deterministic: equal inputs produce equal files.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .core import (UNKNOWN, ConfigError, FormatError, SourceDataset,
                   TargetDataset, check_features, check_labels, l2_normalize,
                   stream_rng)

MAGIC = b"UDAF"
VERSION = 1
_HEADER = struct.Struct("<4sIIII")
_FLAG_LABELS = 1
_UNKNOWN_U32 = 0xFFFFFFFF


def save_features(path, features: np.ndarray, labels: np.ndarray | None = None) -> None:
    """Write a UDAF file. Labels may contain UNKNOWN (-1)."""
    features = check_features(features)
    rows, dim = features.shape
    flags = 0
    blob = bytearray()
    if labels is not None:
        labels = check_labels(labels, rows, allow_unknown=True)
        if labels.size and labels.max() >= _UNKNOWN_U32:
            raise ValueError("label value does not fit the u32 encoding")
        flags |= _FLAG_LABELS
        enc = labels.astype(np.int64, copy=True)
        enc[enc == UNKNOWN] = _UNKNOWN_U32
        blob = enc.astype("<u4").tobytes()
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, rows, dim, flags))
        fh.write(features.astype("<f4", copy=False).tobytes(order="C"))
        fh.write(blob)


def load_features(path) -> tuple[np.ndarray, np.ndarray | None]:
    """Read a UDAF file back into (features, labels-or-None).

    Raises FormatError, with the byte offset of the first fault, on bad
    magic/version, impossible header fields, truncation, trailing bytes,
    or non-finite feature entries.
    """
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < _HEADER.size:
        raise FormatError("file shorter than the 20-byte header", offset=len(data))
    magic, version, rows, dim, flags = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", offset=0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)
    if dim < 1:
        raise FormatError("dim must be at least 1", offset=12)
    if flags & ~_FLAG_LABELS:
        raise FormatError(f"unknown flag bits 0x{flags:x}", offset=16)
    feat_bytes = 4 * rows * dim
    label_bytes = 4 * rows if flags & _FLAG_LABELS else 0
    expected = _HEADER.size + feat_bytes + label_bytes
    if len(data) < expected:
        raise FormatError(f"truncated: expected {expected} bytes", offset=len(data))
    if len(data) > expected:
        raise FormatError(f"{len(data) - expected} trailing bytes", offset=expected)
    feats = np.frombuffer(data, dtype="<f4", count=rows * dim,
                          offset=_HEADER.size).reshape(rows, dim)
    finite = np.isfinite(feats)
    if not finite.all():
        idx = int(np.flatnonzero(~finite.ravel())[0])
        raise FormatError("non-finite feature entry", offset=_HEADER.size + 4 * idx)
    feats = np.ascontiguousarray(feats, dtype=np.float32)
    labels = None
    if flags & _FLAG_LABELS:
        raw = np.frombuffer(data, dtype="<u4", count=rows,
                            offset=_HEADER.size + feat_bytes)
        labels = raw.astype(np.int64)
        labels[raw == _UNKNOWN_U32] = UNKNOWN
    return feats, labels


@dataclass
class SyntheticConfig:
    """Gaussian mixture benchmark with a domain shift and open-set classes.

    Class means sit on the sphere of radius 10*spread. Target versions of
    the common classes are displaced by `shift` along a per-class random
    unit direction; target-private means are rejection-sampled to stay at
    least 4*spread away from every common-class mean of either domain.
    """

    n_common: int = 10
    n_src_private: int = 10
    n_tgt_private: int = 11
    dim: int = 32
    per_class: int = 40
    shift: float = 2.0
    spread: float = 1.0
    seed: int = 0

    def validate(self):
        if self.n_common < 1:
            raise ConfigError("n_common must be at least 1")
        if self.n_src_private < 0 or self.n_tgt_private < 0:
            raise ConfigError("private class counts must be non-negative")
        if self.dim < 2:
            raise ConfigError("dim must be at least 2")
        if self.per_class < 1:
            raise ConfigError("per_class must be at least 1")
        if self.shift < 0:
            raise ConfigError("shift must be non-negative")
        if self.spread <= 0:
            raise ConfigError("spread must be positive")


def _sphere_point(rng, dim: int, radius: float) -> np.ndarray:
    return radius * l2_normalize(rng.standard_normal(dim))


def generate_synthetic(cfg: SyntheticConfig) -> tuple[SourceDataset, TargetDataset]:
    """Draw the benchmark datasets. Deterministic in cfg.seed.

    Source rows are grouped by class 0..Y-1 (Y = n_common + n_src_private).
    Target rows are the common classes in order, then the private classes;
    truth labels mark private rows UNKNOWN.
    """
    cfg.validate()
    rng = stream_rng(cfg.seed, "data")
    n_classes = cfg.n_common + cfg.n_src_private
    radius = 10.0 * cfg.spread

    src_means = np.stack([_sphere_point(rng, cfg.dim, radius)
                          for _ in range(n_classes)])
    shifts = np.stack([l2_normalize(rng.standard_normal(cfg.dim))
                       for _ in range(cfg.n_common)])
    tgt_common_means = src_means[:cfg.n_common] + cfg.shift * shifts

    guarded = np.vstack([src_means[:cfg.n_common], tgt_common_means])
    private_means = []
    for _ in range(cfg.n_tgt_private):
        for _attempt in range(10000):
            cand = _sphere_point(rng, cfg.dim, radius)
            if np.linalg.norm(guarded - cand, axis=1).min() >= 4.0 * cfg.spread:
                private_means.append(cand)
                break
        else:
            raise ConfigError("could not place a target-private mean at the "
                              "required distance; lower the class counts or "
                              "raise dim")

    def draw(mean):
        return mean + cfg.spread * rng.standard_normal((cfg.per_class, cfg.dim))

    src_feats = np.vstack([draw(m) for m in src_means]).astype(np.float32)
    src_labels = np.repeat(np.arange(n_classes, dtype=np.int64), cfg.per_class)

    tgt_blocks = [draw(m) for m in tgt_common_means]
    truth = [np.full(cfg.per_class, c, dtype=np.int64) for c in range(cfg.n_common)]
    for m in private_means:
        tgt_blocks.append(draw(m))
        truth.append(np.full(cfg.per_class, UNKNOWN, dtype=np.int64))
    tgt_feats = np.vstack(tgt_blocks).astype(np.float32)

    source = SourceDataset(src_feats, src_labels, n_classes=n_classes)
    target = TargetDataset(tgt_feats, np.concatenate(truth))
    return source, target
