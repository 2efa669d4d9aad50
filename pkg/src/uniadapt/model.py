"""Trainable pipeline: optional feature adapter, per-class accept/reject
classifier head, the four losses, and hand-written analytic gradients.

Conventions shared by everything in this module:
  - parameters are stored float32, math runs in float64;
  - a probability table has shape (2, Y): row 0 accept, row 1 reject;
  - probabilities are clamped to [PROB_EPS, 1 - PROB_EPS] before any log;
  - natural logarithm throughout;
  - labeling outputs (verdicts, pseudo-labels, weight tables, thresholds)
    are constants with respect to differentiation: no gradient flows
    through neighbor selection or memory banks.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .core import (UNKNOWN, FormatError, NumericsError, ShapeError, Status,
                   ZeroNormError, l2_normalize_rows)

PROB_EPS = 1e-7


@dataclass
class AdapterParams:
    """Residual two-layer tanh perceptron: x + mlp(x).

    The identity path keeps the map close to the input geometry at
    initialization, which the neighborhood statistics feeding the
    labeling scheme depend on; training shapes only the correction
    branch. Requires d_out == d_in.
    """

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    @property
    def d_in(self) -> int:
        return self.w1.shape[1]

    @property
    def hidden(self) -> int:
        return self.w1.shape[0]

    @property
    def d_out(self) -> int:
        return self.w2.shape[0]

    def arrays(self):
        return [("w1", self.w1), ("b1", self.b1), ("w2", self.w2), ("b2", self.b2)]


@dataclass
class ClassifierParams:
    """Affine map to 2Y logits; rows 2j / 2j+1 are class j accept / reject."""

    weight: np.ndarray   # (2Y, d)
    bias: np.ndarray     # (2Y,)

    @property
    def n_classes(self) -> int:
        return self.bias.shape[0] // 2

    @property
    def dim(self) -> int:
        return self.weight.shape[1]

    def arrays(self):
        return [("weight", self.weight), ("bias", self.bias)]


def _uniform_init(rng, shape, fan_in) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def init_adapter(d_in: int, hidden: int, d_out: int, rng) -> AdapterParams:
    """Centered-uniform w1 scaled by 1/sqrt(fan_in); w2 and biases zero.

    Zero w2 opens the residual branch as an exact identity, so banks and
    verdicts start from the raw embedding geometry; random w1 keeps the
    hidden units distinct, and w2 unfreezes after the first update.
    """
    if min(d_in, hidden, d_out) < 1:
        raise ShapeError("adapter dimensions must be positive")
    if d_out != d_in:
        raise ShapeError("residual adapter needs d_out == d_in")
    return AdapterParams(
        w1=_uniform_init(rng, (hidden, d_in), d_in),
        b1=np.zeros(hidden, dtype=np.float32),
        w2=np.zeros((d_out, hidden), dtype=np.float32),
        b2=np.zeros(d_out, dtype=np.float32),
    )


def init_classifier(dim: int, n_classes: int, rng) -> ClassifierParams:
    """All-zero head: every accept/reject pair opens at exact indifference
    (C1 = C2 = 1/2), where the pair gradient is maximal. On unit-norm
    inputs, random init noise would otherwise exceed what early training
    can overwrite and hand argmax wins to arbitrary classes.
    """
    if n_classes < 2:
        raise ShapeError("classifier needs at least two classes")
    del rng  # kept for signature stability across init schemes
    return ClassifierParams(
        weight=np.zeros((2 * n_classes, dim), dtype=np.float32),
        bias=np.zeros(2 * n_classes, dtype=np.float32),
    )


def adapt(x: np.ndarray, adapter: AdapterParams | None) -> np.ndarray:
    """Apply the adapter (identity when None) to a batch; float64 out."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"expected a batch of rows, got shape {x.shape}")
    if adapter is None:
        return x
    h = np.tanh(x @ adapter.w1.T.astype(np.float64) + adapter.b1.astype(np.float64))
    return x + h @ adapter.w2.T.astype(np.float64) + adapter.b2.astype(np.float64)


def embed(x: np.ndarray, adapter: AdapterParams | None) -> np.ndarray:
    """Adapter output rows, L2-normalized. The bank/classifier feature space."""
    return l2_normalize_rows(adapt(x, adapter))


def _pair_probs_from_logits(logits: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(raw, clamped) accept/reject tables from interleaved 2Y logits."""
    if not np.all(np.isfinite(logits)):
        raise NumericsError("non-finite classifier logits")
    delta = logits[:, 0::2] - logits[:, 1::2]
    # sigmoid(delta), exp only ever sees non-positive arguments
    p1 = np.empty_like(delta)
    pos = delta >= 0
    p1[pos] = 1.0 / (1.0 + np.exp(-delta[pos]))
    e = np.exp(delta[~pos])
    p1[~pos] = e / (1.0 + e)
    raw = np.stack([p1, 1.0 - p1], axis=1)
    return raw, np.clip(raw, PROB_EPS, 1.0 - PROB_EPS)


def pair_probs(z: np.ndarray, clf: ClassifierParams) -> np.ndarray:
    """Per-class accept/reject probabilities for unit feature rows.

    Returns (n, 2, Y). Each (accept, reject) pair is a 2-way softmax over
    its logit pair, then clamped; pairs still sum to 1 after clamping.
    """
    z = np.asarray(z, dtype=np.float64)
    logits = z @ clf.weight.T.astype(np.float64) + clf.bias.astype(np.float64)
    return _pair_probs_from_logits(logits)[1]


def forward(feature: np.ndarray, adapter: AdapterParams | None,
            clf: ClassifierParams) -> np.ndarray:
    """Full pipeline for one sample: adapt, normalize, classify. (2, Y)."""
    z = embed(np.asarray(feature, dtype=np.float64)[None, :], adapter)
    return pair_probs(z, clf)[0]


def reject_score(p: np.ndarray) -> float:
    """Minimum reject probability across classes."""
    return float(np.min(p[1]))


def predict_from_probs(p: np.ndarray) -> int:
    """UNKNOWN when the reject score strictly exceeds 0.5, else the class
    with the highest accept probability (ties to the lowest index)."""
    if reject_score(p) > 0.5:
        return UNKNOWN
    return int(np.argmax(p[0]))


def loss_unk(p: np.ndarray) -> float:
    """Entropy of the reject probabilities, averaged over classes."""
    c2 = p[1]
    return float(-np.mean(c2 * np.log(c2)))


def loss_k(p: np.ndarray, pseudo_label: int) -> float:
    """Entropy term of the accept probability of the pseudo-labeled class."""
    c = p[0, pseudo_label]
    return float(-c * np.log(c))


def loss_unc(p: np.ndarray) -> float:
    """Mean entropy over all 2Y probability entries."""
    return float(-np.sum(p * np.log(p)) / p.size)


def loss_s(p: np.ndarray, w: np.ndarray) -> float:
    """Negative log of the Frobenius inner product <W, p>, floored at
    PROB_EPS. Can be negative: the inner product may exceed 1."""
    if p.shape != w.shape:
        raise ShapeError(f"shape mismatch {p.shape} vs {w.shape}")
    ip = float(np.sum(w * p))
    return float(-np.log(max(ip, PROB_EPS)))


def weight_matrix(z_src: np.ndarray, label: int, src_bank, src_labels: np.ndarray,
                  p: np.ndarray, k: int) -> np.ndarray:
    """Affinity weight table (2, Y) for one source sample.

    Row 0 is the one-hot of the true label. Row 1 spreads mass over the
    classes of the k nearest foreign-label bank rows, weighted by the
    sample's own accept probabilities, then L1-normalized. With no
    foreign-label rows at all, row 1 is all zeros. Fewer than k foreign
    rows: all of them are used (the retrieval-count factor cancels in the
    normalization).
    """
    n_classes = p.shape[1]
    src_labels = np.asarray(src_labels, dtype=np.int64)
    if src_labels.shape[0] != src_bank.n:
        raise ShapeError("one label per bank row required")
    w = np.zeros((2, n_classes), dtype=np.float64)
    w[0, label] = 1.0
    foreign = src_labels != label
    n_foreign = int(foreign.sum())
    if n_foreign == 0:
        return w
    k_eff = min(k, n_foreign)
    nb = src_bank.query(z_src, k_eff, include_mask=foreign)
    counts = np.bincount(src_labels[nb.indices], minlength=n_classes)
    c1 = p[0].astype(np.float64)
    denom = float(np.sum(c1 * c1) - c1[label] * c1[label])
    raw = (counts / k_eff) * c1 / denom
    raw[label] = 0.0
    total = raw.sum()
    if total > 0:
        w[1] = raw / total
    return w


@dataclass
class LossBatch:
    """One step's frozen training inputs.

    Weight tables, verdict statuses, and pseudo-labels were produced by
    the labeling phase and are treated as constants by backward().
    """

    src_x: np.ndarray        # (Bs, d_in) raw features
    src_w: np.ndarray        # (Bs, 2, Y)
    tgt_x: np.ndarray        # (Bt, d_in) raw features
    tgt_status: np.ndarray   # (Bt,) Status codes
    tgt_pseudo: np.ndarray   # (Bt,) class index, valid where status == KNOWN


@dataclass
class LossParts:
    loss_s: float
    loss_unk: float
    loss_k: float
    loss_unc: float
    loss_all: float


def _subset_mean(values: np.ndarray, mask: np.ndarray) -> float:
    return float(values[mask].mean()) if mask.any() else 0.0


def total_loss(batch: LossBatch, adapter: AdapterParams | None,
               clf: ClassifierParams, lam: float) -> LossParts:
    """Mean source loss plus lam times the three verdict-subset means.

    Empty subsets contribute zero, so a batch with no Known verdicts has
    no loss_k term, and lam=0 reduces the whole thing to source-only.
    """
    y = clf.n_classes
    parts_s = 0.0
    if len(batch.src_x):
        ps = pair_probs(embed(batch.src_x, adapter), clf)
        ips = np.maximum(np.einsum("nkj,nkj->n", batch.src_w, ps), PROB_EPS)
        parts_s = float(np.mean(-np.log(ips)))

    m_unk = m_k = m_unc = 0.0
    if len(batch.tgt_x):
        pt = pair_probs(embed(batch.tgt_x, adapter), clf)
        ent = -pt * np.log(pt)          # (Bt, 2, Y)
        status = batch.tgt_status
        unk_v = ent[:, 1, :].mean(axis=1)
        unc_v = ent.reshape(len(pt), -1).sum(axis=1) / (2 * y)
        rows = np.arange(len(pt))
        safe_pseudo = np.where(status == Status.KNOWN, batch.tgt_pseudo, 0)
        k_v = ent[rows, 0, safe_pseudo]
        m_unk = _subset_mean(unk_v, status == Status.UNKNOWN)
        m_k = _subset_mean(k_v, status == Status.KNOWN)
        m_unc = _subset_mean(unc_v, status == Status.UNCERTAIN)

    total = parts_s + lam * (m_unk + m_k + m_unc)
    return LossParts(parts_s, m_unk, m_k, m_unc, total)


@dataclass
class Grads:
    adapter: AdapterParams | None
    clf: ClassifierParams


def _forward_cache(x, adapter, clf):
    x64 = np.asarray(x, dtype=np.float64)
    if adapter is not None:
        h = np.tanh(x64 @ adapter.w1.T.astype(np.float64) + adapter.b1.astype(np.float64))
        u = x64 + h @ adapter.w2.T.astype(np.float64) + adapter.b2.astype(np.float64)
    else:
        h = None
        u = x64
    nu = np.linalg.norm(u, axis=1)
    if np.any(nu < 1e-12):
        raise ZeroNormError("zero-norm feature ahead of normalization")
    a = u / nu[:, None]
    logits = a @ clf.weight.T.astype(np.float64) + clf.bias.astype(np.float64)
    raw, probs = _pair_probs_from_logits(logits)
    return x64, h, a, nu, raw, probs


def backward(batch: LossBatch, adapter: AdapterParams | None,
             clf: ClassifierParams, lam: float) -> Grads:
    """Analytic gradients of the total loss for every parameter entry.

    Clamped probability entries get zero gradient (the loss is locally
    flat there). Accumulation order is fixed, so results are bitwise
    reproducible for a given batch.
    """
    y = clf.n_classes
    bs, bt = len(batch.src_x), len(batch.tgt_x)
    if bs == 0 and bt == 0:
        raise ShapeError("cannot differentiate an empty batch")
    if bs and bt:
        x_all = np.vstack([batch.src_x, batch.tgt_x])
    else:
        x_all = batch.src_x if bs else batch.tgt_x
    x64, h, a, nu, raw, probs = _forward_cache(x_all, adapter, clf)

    # upstream dL/d(clamped p), per sample, with its subset coefficient
    dp = np.zeros((bs + bt, 2, y), dtype=np.float64)
    if bs:
        w = np.asarray(batch.src_w, dtype=np.float64)
        ps = probs[:bs]
        ips = np.einsum("nkj,nkj->n", w, ps)
        live = ips > PROB_EPS
        coef = np.where(live, -1.0 / np.maximum(ips, PROB_EPS), 0.0) / bs
        dp[:bs] = coef[:, None, None] * w
    if bt:
        status = np.asarray(batch.tgt_status)
        pt = probs[bs:]
        logp = np.log(pt)
        n_unk = int((status == Status.UNKNOWN).sum())
        n_k = int((status == Status.KNOWN).sum())
        n_unc = int((status == Status.UNCERTAIN).sum())
        dpt = np.zeros_like(pt)
        for i in range(bt):
            st = status[i]
            if st == Status.UNKNOWN:
                dpt[i, 1, :] = -(logp[i, 1, :] + 1.0) / y * (lam / n_unk)
            elif st == Status.KNOWN:
                j = int(batch.tgt_pseudo[i])
                dpt[i, 0, j] = -(logp[i, 0, j] + 1.0) * (lam / n_k)
            else:
                dpt[i] = -(logp[i] + 1.0) / (2 * y) * (lam / n_unc)
        dp[bs:] = dpt

    clamped = (raw < PROB_EPS) | (raw > 1.0 - PROB_EPS)
    dp[clamped] = 0.0

    # through the per-class 2-softmax: d(delta_j) from the pair
    sig = raw[:, 0, :] * raw[:, 1, :]
    ddelta = (dp[:, 0, :] - dp[:, 1, :]) * sig
    dlogits = np.zeros((len(ddelta), 2 * y), dtype=np.float64)
    dlogits[:, 0::2] = ddelta
    dlogits[:, 1::2] = -ddelta

    g_weight = dlogits.T @ a
    g_bias = dlogits.sum(axis=0)
    clf_grads = ClassifierParams(weight=g_weight, bias=g_bias)

    adapter_grads = None
    if adapter is not None:
        da = dlogits @ clf.weight.astype(np.float64)
        du = (da - a * np.sum(a * da, axis=1, keepdims=True)) / nu[:, None]
        dh = du @ adapter.w2.astype(np.float64)
        g_w2 = du.T @ h
        g_b2 = du.sum(axis=0)
        dg = (1.0 - h * h) * dh
        g_w1 = dg.T @ x64
        g_b1 = dg.sum(axis=0)
        adapter_grads = AdapterParams(w1=g_w1, b1=g_b1, w2=g_w2, b2=g_b2)
        all_arrays = [g_w1, g_b1, g_w2, g_b2, g_weight, g_bias]
    else:
        all_arrays = [g_weight, g_bias]
    for arr in all_arrays:
        if not np.all(np.isfinite(arr)):
            raise NumericsError("non-finite gradient")
    return Grads(adapter=adapter_grads, clf=clf_grads)


# ---------------------------------------------------------------------------
# Checkpoint container: magic "UDAC", little-endian, no padding.
# Header: magic(4) version(u32) flags(u32, bit0 = adapter present)
#         d_in(u32) hidden(u32) d_out(u32) n_classes(u32)
# Arrays (f32, declared order): [w1 b1 w2 b2] weight bias

CKPT_MAGIC = b"UDAC"
CKPT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4sIIIIII")
_CKPT_FLAG_ADAPTER = 1


def save_checkpoint(path, adapter: AdapterParams | None, clf: ClassifierParams) -> None:
    if adapter is not None and adapter.d_out != clf.dim:
        raise ShapeError("adapter output dim does not match classifier dim")
    flags = _CKPT_FLAG_ADAPTER if adapter is not None else 0
    d_in = adapter.d_in if adapter is not None else clf.dim
    hidden = adapter.hidden if adapter is not None else 0
    with open(path, "wb") as fh:
        fh.write(_CKPT_HEADER.pack(CKPT_MAGIC, CKPT_VERSION, flags,
                                   d_in, hidden, clf.dim, clf.n_classes))
        if adapter is not None:
            for _, arr in adapter.arrays():
                fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        for _, arr in clf.arrays():
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path) -> tuple[AdapterParams | None, ClassifierParams]:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < _CKPT_HEADER.size:
        raise FormatError("file shorter than the checkpoint header", offset=len(data))
    magic, version, flags, d_in, hidden, d_out, n_classes = \
        _CKPT_HEADER.unpack_from(data, 0)
    if magic != CKPT_MAGIC:
        raise FormatError(f"bad magic {magic!r}", offset=0)
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)
    if flags & ~_CKPT_FLAG_ADAPTER:
        raise FormatError(f"unknown flag bits 0x{flags:x}", offset=8)
    if n_classes < 2 or d_out < 1:
        raise FormatError("impossible dimension header", offset=12)
    shapes = []
    if flags & _CKPT_FLAG_ADAPTER:
        if hidden < 1 or d_in < 1:
            raise FormatError("impossible adapter dimensions", offset=12)
        if d_in != d_out:
            raise FormatError("residual adapter needs d_in == d_out", offset=12)
        shapes += [(hidden, d_in), (hidden,), (d_out, hidden), (d_out,)]
    elif d_in != d_out or hidden != 0:
        raise FormatError("adapterless checkpoint with adapter dimensions", offset=12)
    shapes += [(2 * n_classes, d_out), (2 * n_classes,)]
    expected = _CKPT_HEADER.size + 4 * sum(int(np.prod(s)) for s in shapes)
    if len(data) < expected:
        raise FormatError(f"truncated: expected {expected} bytes", offset=len(data))
    if len(data) > expected:
        raise FormatError(f"{len(data) - expected} trailing bytes", offset=expected)
    arrays = []
    off = _CKPT_HEADER.size
    for shape in shapes:
        count = int(np.prod(shape))
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=off)
        if not np.all(np.isfinite(arr)):
            bad = int(np.flatnonzero(~np.isfinite(arr))[0])
            raise FormatError("non-finite parameter entry", offset=off + 4 * bad)
        arrays.append(arr.reshape(shape).astype(np.float32))
        off += 4 * count
    adapter = None
    if flags & _CKPT_FLAG_ADAPTER:
        adapter = AdapterParams(*arrays[:4])
        arrays = arrays[4:]
    return adapter, ClassifierParams(weight=arrays[0], bias=arrays[1])
