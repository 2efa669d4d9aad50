"""Shared primitives: errors, datasets, vector math, seeded RNG streams.

Numeric policy used throughout the package: arrays are stored as float32
(row-major), every computation upcasts to float64 first and only casts
back at storage boundaries. Results must not depend on thread count, so
nothing here ever touches global RNG state.
"""

from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass

import numpy as np

# In-memory marker for the open-set class. Serialized as 0xFFFFFFFF on disk.
UNKNOWN = -1


class Status(enum.IntEnum):
    """Three-way labeling verdict for a target sample."""

    KNOWN = 0
    UNKNOWN = 1
    UNCERTAIN = 2


class UniadaptError(Exception):
    """Base class for errors raised by this package."""


class ShapeError(UniadaptError):
    """An array argument has the wrong rank or an inconsistent dimension."""


class ZeroNormError(UniadaptError):
    """A vector that must be normalized has (near-)zero L2 norm."""


class ConfigError(UniadaptError):
    """A configuration value is outside its documented domain."""


class FormatError(UniadaptError):
    """A serialized file is malformed. Carries the byte offset of the fault."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ConvergenceError(UniadaptError):
    """An iterative solver hit its iteration cap before reaching tolerance."""

    def __init__(self, message: str, residual: float | None = None):
        if residual is not None:
            message = f"{message} (residual {residual:.3e})"
        super().__init__(message)
        self.residual = residual


class NumericsError(UniadaptError):
    """A computation produced a non-finite value."""


class EvalError(UniadaptError):
    """Evaluation was requested on data that cannot support it."""


# Norms below this are treated as zero. Well under anything produced by
# unit-scale data but above f32 denormal noise.
_NORM_EPS = 1e-12


def l2_normalize(v: np.ndarray) -> np.ndarray:
    """Return v / ||v||_2 as float64. Raises ZeroNormError on zero input."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1:
        raise ShapeError(f"expected a 1-D vector, got shape {v.shape}")
    n = float(np.linalg.norm(v))
    if not np.isfinite(n):
        raise NumericsError("non-finite norm in l2_normalize")
    if n < _NORM_EPS:
        raise ZeroNormError(f"cannot normalize vector with norm {n:.3e}")
    return v / n


def l2_normalize_rows(x: np.ndarray) -> np.ndarray:
    """Row-wise l2_normalize for a 2-D array; reports the offending row."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"expected a 2-D array, got shape {x.shape}")
    norms = np.linalg.norm(x, axis=1)
    if not np.all(np.isfinite(norms)):
        raise NumericsError("non-finite norm in l2_normalize_rows")
    bad = np.flatnonzero(norms < _NORM_EPS)
    if bad.size:
        raise ZeroNormError(f"row {bad[0]} has norm {norms[bad[0]]:.3e}")
    return x / norms[:, None]


def cosine_sim(u: np.ndarray, v: np.ndarray) -> float:
    """Cosine similarity of two vectors, accumulated in float64."""
    a = l2_normalize(u)
    b = l2_normalize(v)
    if a.shape != b.shape:
        raise ShapeError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return float(a @ b)


def stream_rng(seed: int, name: str) -> np.random.Generator:
    """Independent generator for a named stream under one run seed.

    The stream key is derived from a stable hash of the name so that
    adding a new stream never perturbs existing ones.
    """
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    key = int.from_bytes(digest[:8], "little")
    return np.random.default_rng(np.random.SeedSequence([seed, key]))


def check_features(x, *, dim: int | None = None, name: str = "features") -> np.ndarray:
    """Validate and return a 2-D float32 row-major feature matrix."""
    x = np.ascontiguousarray(x, dtype=np.float32)
    if x.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {x.shape}")
    if x.shape[1] < 1:
        raise ShapeError(f"{name} must have at least one column")
    if dim is not None and x.shape[1] != dim:
        raise ShapeError(f"{name} has dim {x.shape[1]}, expected {dim}")
    if not np.all(np.isfinite(x)):
        raise NumericsError(f"{name} contains non-finite entries")
    return x


def check_labels(y, n_rows: int, *, n_classes: int | None = None,
                 allow_unknown: bool = False) -> np.ndarray:
    """Validate an int64 label vector aligned with a feature matrix."""
    y = np.asarray(y, dtype=np.int64)
    if y.ndim != 1:
        raise ShapeError(f"labels must be 1-D, got shape {y.shape}")
    if y.shape[0] != n_rows:
        raise ShapeError(f"{y.shape[0]} labels for {n_rows} rows")
    lo = UNKNOWN if allow_unknown else 0
    if y.size and (y.min() < lo or (n_classes is not None and y.max() >= n_classes)):
        raise ValueError("label outside the valid class range")
    return y


@dataclass
class ClassSpace:
    """The source label set: class count and optional display names."""

    n_classes: int
    names: list[str] | None = None

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValueError("a class space needs at least two classes")
        if self.names is not None and len(self.names) != self.n_classes:
            raise ValueError(f"{len(self.names)} names for {self.n_classes} classes")


@dataclass
class SourceDataset:
    """Labeled source-domain features. Every class in [0, n_classes) occurs."""

    features: np.ndarray
    labels: np.ndarray
    n_classes: int = 0

    def __post_init__(self):
        self.features = check_features(self.features)
        self.labels = check_labels(self.labels, len(self.features))
        if self.n_classes == 0:
            self.n_classes = int(self.labels.max()) + 1 if self.labels.size else 0
        if self.n_classes < 1:
            raise ValueError("source dataset needs at least one class")
        check_labels(self.labels, len(self.features), n_classes=self.n_classes)
        present = np.unique(self.labels)
        if len(present) != self.n_classes:
            missing = sorted(set(range(self.n_classes)) - set(present.tolist()))
            raise ValueError(f"classes with no source samples: {missing}")

    def __len__(self):
        return len(self.features)

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@dataclass
class TargetDataset:
    """Unlabeled target-domain features, with optional ground truth.

    Truth labels use UNKNOWN (-1) for samples outside the source class
    space. They are never consumed by training updates, only by metrics.
    """

    features: np.ndarray
    truth: np.ndarray | None = None

    def __post_init__(self):
        self.features = check_features(self.features)
        if self.truth is not None:
            self.truth = check_labels(self.truth, len(self.features),
                                      allow_unknown=True)

    def __len__(self):
        return len(self.features)

    @property
    def dim(self) -> int:
        return self.features.shape[1]
