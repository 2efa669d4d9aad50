"""Per-sample open-set labeling: spectral neighborhood comparison plus
neighbor-vote credibility, gated by an automatic threshold.

A target sample gets one of three verdicts. First its knowability is
compared against a fixed threshold: each of its two neighborhoods (source
bank, target bank) is summarized by a dominant direction, the affinity
eigenvector-weighted combination of the neighbor rows, and knowability is
the cosine between the two directions. Samples whose source-side
neighborhood points somewhere else entirely are declared Unknown
outright. Survivors are scored by credibility, the best class-averaged
accept probability among their source neighbors, and land in Known /
Unknown / Uncertain depending on where the score falls relative to the
per-batch auto-threshold and its scaled lower band.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .core import (ConfigError, ConvergenceError, ShapeError, Status,
                   l2_normalize)
from .membank import MemoryBank
from .model import ClassifierParams, pair_probs


@dataclass
class LabelingConfig:
    """Knobs of the labeling scheme.

    The scheme is parameterized by a single neighbor count used against
    both banks; k_src and k_tgt are kept as two fields so a mismatch is
    an explicit validation error rather than a silent reinterpretation.
    """

    k_src: int = 10
    k_tgt: int = 10
    k_tau: float = 0.5
    cred_scale: float = 0.8
    power_iters: int = 200000
    power_tol: float = 1e-10

    def validate(self):
        if self.k_src != self.k_tgt:
            raise ConfigError("k_src and k_tgt must be equal")
        if self.k_src < 2:
            raise ConfigError("neighbor count must be at least 2")
        if not -1.0 < self.k_tau < 1.0:
            raise ConfigError("k_tau must lie in (-1, 1)")
        if not 0.0 < self.cred_scale < 1.0:
            raise ConfigError("cred_scale must lie in (0, 1)")
        if self.power_iters < 1:
            raise ConfigError("power_iters must be positive")
        if self.power_tol <= 0:
            raise ConfigError("power_tol must be positive")


@dataclass
class Verdict:
    """Labeling outcome for one target sample.

    pseudo_label is present only for Known; credibility is absent when
    the knowability gate already decided Unknown.
    """

    status: Status
    pseudo_label: int | None
    knowability: float
    credibility: float | None


def affinity_matrix(feats: np.ndarray) -> np.ndarray:
    """Rectified pairwise cosines of unit rows: entries max(0, cos),
    symmetric, unit diagonal. Input rows must already be normalized."""
    f = np.asarray(feats, dtype=np.float64)
    if f.ndim != 2 or f.shape[0] < 2:
        raise ShapeError(f"need at least two neighbor rows, got shape {f.shape}")
    a = f @ f.T
    a = 0.5 * (a + a.T)
    np.clip(a, 0.0, 1.0, out=a)
    np.fill_diagonal(a, 1.0)
    return a


def leading_eigenvector(a: np.ndarray, power_iters: int = 1000,
                        power_tol: float = 1e-10) -> np.ndarray:
    """Dominant eigenvector of a symmetric nonnegative matrix by power
    iteration from the normalized all-ones vector.

    The sign is canonical: component sum >= 0, first nonzero component
    positive when the sum is exactly zero. A matrix that acts as a scalar
    (every vector is an eigenvector, e.g. the identity) returns the first
    basis vector so the result is well defined.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"expected a square matrix, got shape {a.shape}")
    k = a.shape[0]
    x = np.full(k, 1.0 / np.sqrt(k))
    residual = np.inf
    converged_at = None
    for it in range(power_iters):
        y = a @ x
        ny = float(np.linalg.norm(y))
        if ny < 1e-300:
            raise ConvergenceError("iterate annihilated by the matrix",
                                   residual=residual)
        x_new = y / ny
        residual = 1.0 - float(x_new @ x)
        x = x_new
        if residual <= power_tol:
            converged_at = it
            break
    if converged_at is None:
        raise ConvergenceError(
            f"no convergence within {power_iters} iterations", residual=residual)

    eigval = float(x @ (a @ x))
    if converged_at == 0:
        # start vector was already an eigenvector; if e_1 shares its
        # eigenvalue the matrix is (locally) scalar and e_1 is the pin
        e1 = np.zeros(k)
        e1[0] = 1.0
        if np.allclose(a @ e1, eigval * e1, rtol=1e-9, atol=1e-12 * max(1.0, abs(eigval))):
            return e1

    s = float(x.sum())
    if s < 0:
        x = -x
    elif s == 0:
        nz = np.flatnonzero(x)
        if nz.size and x[nz[0]] < 0:
            x = -x
    return x


def neighborhood_direction(feats: np.ndarray, power_iters: int = 200000,
                           power_tol: float = 1e-10) -> np.ndarray:
    """Dominant direction of a set of unit rows: the affinity
    eigenvector scores each row's centrality, and the weighted sum of
    the rows is the neighborhood's representative direction (for a tight
    cluster this is its first right singular vector). Unit norm."""
    v = leading_eigenvector(affinity_matrix(feats), power_iters, power_tol)
    return l2_normalize(np.asarray(feats, dtype=np.float64).T @ v)


def knowability(x: np.ndarray, src_bank: MemoryBank, tgt_bank: MemoryBank,
                cfg: LabelingConfig, *, exclude_src: int | None = None,
                exclude_tgt: int | None = None) -> float:
    """Cosine between the dominant directions of the query's source-bank
    and target-bank neighborhoods. exclude_* drop the query's own slot
    from a bank it belongs to."""
    cfg.validate()
    nb_s = src_bank.query(x, cfg.k_src, exclude=exclude_src)
    nb_t = tgt_bank.query(x, cfg.k_tgt, exclude=exclude_tgt)
    d_s = neighborhood_direction(nb_s.feats, cfg.power_iters, cfg.power_tol)
    d_t = neighborhood_direction(nb_t.feats, cfg.power_iters, cfg.power_tol)
    return float(d_s @ d_t)


def credibility(x: np.ndarray, src_bank: MemoryBank, clf: ClassifierParams,
                cfg: LabelingConfig, *,
                exclude_src: int | None = None) -> tuple[float, int]:
    """Best class-averaged accept probability among the source neighbors.

    The classifier consumes the stored bank rows directly. Returns the
    score and its argmax class (ties to the lowest index); both derive
    from one averaging pass.
    """
    nb = src_bank.query(x, cfg.k_src, exclude=exclude_src)
    probs = pair_probs(nb.feats.astype(np.float64), clf)
    mean_accept = probs[:, 0, :].mean(axis=0)
    return float(mean_accept.max()), int(mean_accept.argmax())


def auto_threshold(source_probs: np.ndarray) -> float:
    """Mean over a source batch of each sample's best accept probability."""
    p = np.asarray(source_probs, dtype=np.float64)
    if p.ndim != 3 or p.shape[1] != 2:
        raise ShapeError(f"expected a (batch, 2, Y) array, got {p.shape}")
    if p.shape[0] == 0:
        raise ConfigError("auto threshold needs a non-empty source batch")
    return float(p[:, 0, :].max(axis=1).mean())


def label_sample(x: np.ndarray, src_bank: MemoryBank, tgt_bank: MemoryBank,
                 clf: ClassifierParams, c_tau: float, cfg: LabelingConfig, *,
                 exclude_src: int | None = None,
                 exclude_tgt: int | None = None) -> Verdict:
    """Two-stage verdict for one target sample.

    Below the knowability threshold the sample is Unknown and credibility
    is never computed. Otherwise credibility decides: strictly above
    c_tau is Known with the neighbor-vote pseudo-label, strictly below
    cred_scale*c_tau is Unknown, the band between (boundaries included)
    is Uncertain.
    """
    know = knowability(x, src_bank, tgt_bank, cfg,
                       exclude_src=exclude_src, exclude_tgt=exclude_tgt)
    if know < cfg.k_tau:
        return Verdict(Status.UNKNOWN, None, know, None)
    cred, pseudo = credibility(x, src_bank, clf, cfg, exclude_src=exclude_src)
    if cred > c_tau:
        return Verdict(Status.KNOWN, pseudo, know, cred)
    if cred < cfg.cred_scale * c_tau:
        return Verdict(Status.UNKNOWN, None, know, cred)
    return Verdict(Status.UNCERTAIN, None, know, cred)


def label_batch(xs: np.ndarray, src_bank: MemoryBank, tgt_bank: MemoryBank,
                clf: ClassifierParams, c_tau: float, cfg: LabelingConfig, *,
                tgt_slots: np.ndarray | None = None,
                n_threads: int = 1) -> list[Verdict]:
    """Label every row of xs. tgt_slots gives each row's own slot in the
    target bank, to be excluded from its neighborhood.

    Each sample's verdict is computed independently and written to its
    position, so the result is identical for any thread count.
    """
    xs = np.asarray(xs)
    slots = [None] * len(xs) if tgt_slots is None else [int(s) for s in tgt_slots]
    if len(slots) != len(xs):
        raise ShapeError("one target slot per row required")

    def work(i: int) -> Verdict:
        return label_sample(xs[i], src_bank, tgt_bank, clf, c_tau, cfg,
                            exclude_tgt=slots[i])

    if n_threads <= 1 or len(xs) <= 1:
        return [work(i) for i in range(len(xs))]
    with ThreadPoolExecutor(max_workers=n_threads) as pool:
        return list(pool.map(work, range(len(xs))))
