"""Momentum-smoothed per-domain feature memories with exact k-NN retrieval.

A bank holds one unit-norm slot per dataset sample; slot i belongs to
sample i for the bank's whole life. Retrieval is a brute-force cosine
scan, which at desk scale (n up to ~1e5) is both fast enough and exactly
reproducible. Callers must not interleave updates with queries inside one
labeling phase; the training loop serializes the two.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import (ConfigError, ShapeError, l2_normalize, l2_normalize_rows)


@dataclass
class NeighborSet:
    """Top-K retrieval result in canonical order: sim descending, then
    index ascending on exact ties."""

    indices: np.ndarray   # (K,) int64, distinct
    sims: np.ndarray      # (K,) float64, non-increasing
    feats: np.ndarray     # (K, d) float32 bank rows, same order

    def __len__(self):
        return len(self.indices)


class MemoryBank:
    """Fixed-size store of L2-normalized features with momentum updates."""

    def __init__(self, features: np.ndarray, alpha: float):
        if not 0.0 <= alpha < 1.0:
            raise ConfigError(f"alpha must be in [0, 1), got {alpha}")
        self.features = l2_normalize_rows(features).astype(np.float32)
        self.alpha = float(alpha)

    @classmethod
    def from_unit_rows(cls, features: np.ndarray, alpha: float) -> "MemoryBank":
        """Adopt rows that are already normalized, preserving their bits.
        Deserialization path: re-normalizing would perturb stored rows."""
        if not 0.0 <= alpha < 1.0:
            raise ConfigError(f"alpha must be in [0, 1), got {alpha}")
        feats = np.ascontiguousarray(features, dtype=np.float32)
        norms = np.linalg.norm(feats.astype(np.float64), axis=1)
        if feats.ndim != 2 or np.any(np.abs(norms - 1.0) > 1e-5):
            raise ShapeError("rows are not unit-norm")
        bank = cls.__new__(cls)
        bank.features = feats
        bank.alpha = float(alpha)
        return bank

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def update(self, index: int, new_feature: np.ndarray) -> None:
        """Slot <- l2_normalize(alpha*old + (1-alpha)*l2_normalize(new))."""
        if not 0 <= index < self.n:
            raise IndexError(f"slot {index} out of range for bank of {self.n}")
        f = l2_normalize(new_feature)
        if f.shape[0] != self.dim:
            raise ShapeError(f"feature dim {f.shape[0]} vs bank dim {self.dim}")
        z = self.features[index].astype(np.float64)
        self.features[index] = l2_normalize(self.alpha * z +
                                            (1.0 - self.alpha) * f).astype(np.float32)

    def query(self, query_vec: np.ndarray, k: int, *,
              exclude: int | None = None,
              include_mask: np.ndarray | None = None) -> NeighborSet:
        """Exact top-k rows by cosine similarity to the query.

        exclude drops one slot (the query's own, when it is a bank
        member). include_mask restricts the candidate rows. Ties break
        toward the lower row index.
        """
        q = l2_normalize(query_vec)
        if q.shape[0] != self.dim:
            raise ShapeError(f"query dim {q.shape[0]} vs bank dim {self.dim}")
        sims = self.features.astype(np.float64) @ q
        allowed = np.ones(self.n, dtype=bool)
        if include_mask is not None:
            include_mask = np.asarray(include_mask, dtype=bool)
            if include_mask.shape != (self.n,):
                raise ShapeError("include_mask must have one entry per slot")
            allowed &= include_mask
        if exclude is not None:
            if not 0 <= exclude < self.n:
                raise IndexError(f"exclude slot {exclude} out of range")
            allowed[exclude] = False
        n_allowed = int(allowed.sum())
        if not 1 <= k <= n_allowed:
            raise ConfigError(f"k={k} with only {n_allowed} candidate rows")
        sims = np.where(allowed, sims, -np.inf)
        # lexsort's last key is primary: negated sims, index breaks ties
        order = np.lexsort((np.arange(self.n), -sims))[:k]
        idx = order.astype(np.int64)
        return NeighborSet(indices=idx, sims=sims[idx], feats=self.features[idx])


def init_bank(features: np.ndarray, alpha: float) -> MemoryBank:
    """Build a bank whose slots are the normalized input rows."""
    return MemoryBank(features, alpha)
