"""Training loop: per-domain epoch-shuffled batching, memory-bank
lifecycle, per-step labeling, loss assembly, and Nesterov-momentum SGD
with inverse learning-rate decay.

Everything an emitted number depends on is a pure function of (seed,
config, data): batch composition comes from named per-epoch permutation
streams, so training state never carries an RNG and a resumed run is
bitwise identical to an uninterrupted one.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .core import (ConfigError, FormatError, ShapeError, SourceDataset,
                   Status, TargetDataset, stream_rng)
from .evaluation import labeling_accuracy
from .labeling import LabelingConfig, auto_threshold, label_batch
from .membank import MemoryBank, init_bank
from .model import (AdapterParams, ClassifierParams, LossBatch, backward,
                    embed, init_adapter, init_classifier, pair_probs,
                    total_loss, weight_matrix)

LOG_COLUMNS = ("step", "lr", "loss_s", "loss_unk", "loss_k", "loss_unc",
               "loss_all", "c_tau", "n_known", "n_unknown", "n_uncertain",
               "kls_acc_known", "kls_acc_unknown")


@dataclass
class TrainConfig:
    lr: float = 0.01
    lr_backbone: float = 0.01    # adapter (feature-map) rate
    # The head consumes unit-norm features; published rates assume raw
    # backbone features whose squared norm scales the effective head
    # step. head_lr_scale restores that scale after normalization.
    head_lr_scale: float = 9.0
    # Adaptation terms stay off until source votes have locked in;
    # earlier, pseudo-labels feed on themselves and one class can eat
    # every neighborhood vote within a few steps.
    warmup_steps: int = 500
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch: int = 36
    alpha: float = 0.9
    n_neighbors: int = 10
    k_tau: float = 0.5
    cred_scale: float = 0.8
    lam: float = 0.1
    max_steps: int = 2000
    sched_gamma: float = 10.0
    sched_power: float = 0.75
    seed: int = 0
    hidden: int = 256
    use_adapter: bool = True
    power_iters: int = 200000
    power_tol: float = 1e-10
    n_threads: int = 1

    def validate(self):
        if self.lr <= 0 or self.lr_backbone <= 0:
            raise ConfigError("learning rates must be positive")
        if self.head_lr_scale <= 0:
            raise ConfigError("head_lr_scale must be positive")
        if self.warmup_steps < 0:
            raise ConfigError("warmup_steps must be non-negative")
        if self.momentum < 0 or self.momentum >= 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")
        if self.batch < 1:
            raise ConfigError("batch must be at least 1")
        if not 0.0 <= self.alpha < 1.0:
            raise ConfigError("alpha must lie in [0, 1)")
        if self.max_steps < 1:
            raise ConfigError("max_steps must be at least 1")
        if self.lam < 0:
            raise ConfigError("lam must be non-negative")
        if self.hidden < 1:
            raise ConfigError("hidden must be positive")
        if self.n_threads < 1:
            raise ConfigError("n_threads must be at least 1")
        self.labeling()  # validates the shared fields

    def labeling(self) -> LabelingConfig:
        cfg = LabelingConfig(k_src=self.n_neighbors, k_tgt=self.n_neighbors,
                             k_tau=self.k_tau, cred_scale=self.cred_scale,
                             power_iters=self.power_iters,
                             power_tol=self.power_tol)
        cfg.validate()
        return cfg


@dataclass
class StepReport:
    step: int
    lr: float
    loss_s: float
    loss_unk: float
    loss_k: float
    loss_unc: float
    loss_all: float
    c_tau: float
    n_known: int
    n_unknown: int
    n_uncertain: int
    kls_acc_known: float | None
    kls_acc_unknown: float | None

    def tsv_row(self) -> str:
        def num(v):
            if v is None:
                return ""
            if isinstance(v, int):
                return str(v)
            return format(v, ".10g")
        return "\t".join(num(getattr(self, c)) for c in LOG_COLUMNS)


@dataclass
class TrainState:
    step: int
    adapter: AdapterParams | None
    clf: ClassifierParams
    vel_adapter: AdapterParams | None
    vel_clf: ClassifierParams
    src_bank: MemoryBank
    tgt_bank: MemoryBank


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Inverse decay: lr * (1 + gamma * step/max_steps) ** -power."""
    progress = step / cfg.max_steps
    return cfg.lr * (1.0 + cfg.sched_gamma * progress) ** (-cfg.sched_power)


@lru_cache(maxsize=128)
def _epoch_perm(seed: int, domain: str, epoch: int, n: int) -> np.ndarray:
    return stream_rng(seed, f"shuffle/{domain}/{epoch}").permutation(n)


def batch_indices(n: int, batch: int, step: int, seed: int, domain: str) -> np.ndarray:
    """Indices for one step: position step*batch of the concatenated
    per-epoch permutation stream. Smaller datasets recycle across epochs."""
    out = np.empty(batch, dtype=np.int64)
    start = step * batch
    for j in range(batch):
        epoch, r = divmod(start + j, n)
        out[j] = _epoch_perm(seed, domain, epoch, n)[r]
    return out


def _zeros_like_params(p):
    if p is None:
        return None
    if isinstance(p, AdapterParams):
        return AdapterParams(*(np.zeros_like(a) for _, a in p.arrays()))
    return ClassifierParams(*(np.zeros_like(a) for _, a in p.arrays()))


def init_state(source: SourceDataset, target: TargetDataset,
               cfg: TrainConfig) -> TrainState:
    """Fresh parameters from the run seed plus banks over both full
    datasets, embedded with those initial parameters."""
    cfg.validate()
    if source.dim != target.dim:
        raise ShapeError(f"source dim {source.dim} vs target dim {target.dim}")
    if source.n_classes < 2:
        raise ConfigError("training needs at least two source classes")
    if cfg.n_neighbors > min(len(source), len(target) - 1):
        raise ConfigError("n_neighbors exceeds what the datasets can supply")
    rng = stream_rng(cfg.seed, "init")
    adapter = None
    if cfg.use_adapter:
        adapter = init_adapter(source.dim, cfg.hidden, source.dim, rng)
    clf = init_classifier(source.dim, source.n_classes, rng)
    src_bank = init_bank(embed(source.features, adapter), cfg.alpha)
    tgt_bank = init_bank(embed(target.features, adapter), cfg.alpha)
    return TrainState(step=0, adapter=adapter, clf=clf,
                      vel_adapter=_zeros_like_params(adapter),
                      vel_clf=_zeros_like_params(clf),
                      src_bank=src_bank, tgt_bank=tgt_bank)


def _sgd_apply(params, vels, grads, lr: float, momentum: float,
               weight_decay: float) -> None:
    """Nesterov update, in place. Decay applies to weights, never biases.
    Math in float64, storage back to float32."""
    for (name, p), (_, v), (_, g) in zip(params.arrays(), vels.arrays(),
                                         grads.arrays()):
        p64 = p.astype(np.float64)
        g64 = np.asarray(g, dtype=np.float64)
        if weight_decay and p64.ndim > 1:
            g64 = g64 + weight_decay * p64
        v64 = momentum * v.astype(np.float64) + g64
        p64 -= lr * (g64 + momentum * v64)
        p[...] = p64.astype(np.float32)
        v[...] = v64.astype(np.float32)


def train_step(state: TrainState, source: SourceDataset, target: TargetDataset,
               cfg: TrainConfig) -> StepReport:
    """One full step, mutating state.

    Phase order: embed both batches, momentum-update their bank slots
    (skipped at step 0, whose banks are freshly built), build the source
    weight tables, take the batch auto-threshold, label the target batch,
    then assemble losses and apply the SGD update.
    """
    step = state.step
    lr = lr_at(step, cfg)
    src_idx = batch_indices(len(source), cfg.batch, step, cfg.seed, "src")
    tgt_idx = batch_indices(len(target), cfg.batch, step, cfg.seed, "tgt")
    xs = source.features[src_idx]
    ys = source.labels[src_idx]
    xt = target.features[tgt_idx]

    zs = embed(xs, state.adapter)
    zt = embed(xt, state.adapter)
    if step > 0:
        for j in range(len(src_idx)):
            state.src_bank.update(int(src_idx[j]), zs[j])
        for j in range(len(tgt_idx)):
            state.tgt_bank.update(int(tgt_idx[j]), zt[j])

    probs_s = pair_probs(zs, state.clf)
    w = np.stack([
        weight_matrix(zs[j], int(ys[j]), state.src_bank, source.labels,
                      probs_s[j], cfg.n_neighbors)
        for j in range(len(src_idx))
    ])
    c_tau = auto_threshold(probs_s)
    verdicts = label_batch(zt, state.src_bank, state.tgt_bank, state.clf,
                           c_tau, cfg.labeling(), tgt_slots=tgt_idx,
                           n_threads=cfg.n_threads)

    status = np.array([v.status for v in verdicts], dtype=np.int64)
    pseudo = np.array([v.pseudo_label if v.pseudo_label is not None else 0
                       for v in verdicts], dtype=np.int64)
    batch = LossBatch(src_x=xs, src_w=w, tgt_x=xt,
                      tgt_status=status, tgt_pseudo=pseudo)
    lam = cfg.lam if step >= cfg.warmup_steps else 0.0
    parts = total_loss(batch, state.adapter, state.clf, lam)
    grads = backward(batch, state.adapter, state.clf, lam)
    if state.adapter is not None:
        lr_feat = lr * cfg.lr_backbone / cfg.lr
        _sgd_apply(state.adapter, state.vel_adapter, grads.adapter,
                   lr_feat, cfg.momentum, cfg.weight_decay)
    _sgd_apply(state.clf, state.vel_clf, grads.clf,
               lr * cfg.head_lr_scale, cfg.momentum, cfg.weight_decay)
    state.step = step + 1

    if target.truth is not None:
        acc_known, acc_unknown = labeling_accuracy(verdicts, target.truth[tgt_idx])
    else:
        acc_known = acc_unknown = None
    return StepReport(
        step=step, lr=lr,
        loss_s=parts.loss_s, loss_unk=parts.loss_unk, loss_k=parts.loss_k,
        loss_unc=parts.loss_unc, loss_all=parts.loss_all, c_tau=c_tau,
        n_known=int((status == Status.KNOWN).sum()),
        n_unknown=int((status == Status.UNKNOWN).sum()),
        n_uncertain=int((status == Status.UNCERTAIN).sum()),
        kls_acc_known=acc_known, kls_acc_unknown=acc_unknown,
    )


def fit(source: SourceDataset, target: TargetDataset, cfg: TrainConfig,
        state: TrainState | None = None) -> tuple[TrainState, list[StepReport]]:
    """Run (or, given a loaded state, continue) training to max_steps.

    Returns the final state and the reports for the steps executed here;
    a resumed run's reports pick up where the previous segment stopped.
    """
    cfg.validate()
    if state is None:
        state = init_state(source, target, cfg)
    if state.step > cfg.max_steps:
        raise ConfigError(f"state is at step {state.step}, past max_steps")
    reports = []
    while state.step < cfg.max_steps:
        reports.append(train_step(state, source, target, cfg))
    return state, reports


def write_log(path, reports: list[StepReport], *, append: bool = False) -> None:
    mode = "a" if append else "w"
    with open(path, mode, encoding="utf-8") as fh:
        if not append:
            fh.write("\t".join(LOG_COLUMNS) + "\n")
        for r in reports:
            fh.write(r.tsv_row() + "\n")


# ---------------------------------------------------------------------------
# Resumable training state, magic "UDAS". Checkpoints (UDAC) carry only
# the parameters; continuing a run bit-exactly additionally needs the
# step counter, SGD velocities, and both banks, stored here.
# Header: magic(4) version(u32) flags(u32, bit0 adapter) step(u32)
#         d_in(u32) hidden(u32) d_out(u32) n_classes(u32)
#         n_src(u32) n_tgt(u32) alpha(f64)
# Arrays (f32): params, velocities, src bank rows, tgt bank rows.

STATE_MAGIC = b"UDAS"
STATE_VERSION = 1
_STATE_HEADER = struct.Struct("<4sIIIIIIIIId")
_STATE_FLAG_ADAPTER = 1


def _param_arrays(state: TrainState):
    groups = []
    if state.adapter is not None:
        groups += [state.adapter, state.vel_adapter]
    groups += [state.clf, state.vel_clf]
    out = []
    for g in groups:
        out.extend(arr for _, arr in g.arrays())
    out.append(state.src_bank.features)
    out.append(state.tgt_bank.features)
    return out


def save_state(path, state: TrainState) -> None:
    adapter = state.adapter
    flags = _STATE_FLAG_ADAPTER if adapter is not None else 0
    d_in = adapter.d_in if adapter is not None else state.clf.dim
    hidden = adapter.hidden if adapter is not None else 0
    with open(path, "wb") as fh:
        fh.write(_STATE_HEADER.pack(
            STATE_MAGIC, STATE_VERSION, flags, state.step,
            d_in, hidden, state.clf.dim, state.clf.n_classes,
            state.src_bank.n, state.tgt_bank.n, state.src_bank.alpha))
        for arr in _param_arrays(state):
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_state(path) -> TrainState:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < _STATE_HEADER.size:
        raise FormatError("file shorter than the state header", offset=len(data))
    (magic, version, flags, step, d_in, hidden, d_out, n_classes,
     n_src, n_tgt, alpha) = _STATE_HEADER.unpack_from(data, 0)
    if magic != STATE_MAGIC:
        raise FormatError(f"bad magic {magic!r}", offset=0)
    if version != STATE_VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)
    has_adapter = bool(flags & _STATE_FLAG_ADAPTER)
    if flags & ~_STATE_FLAG_ADAPTER:
        raise FormatError(f"unknown flag bits 0x{flags:x}", offset=8)
    shapes = []
    if has_adapter:
        if d_in != d_out:
            raise FormatError("residual adapter needs d_in == d_out", offset=16)
        adapter_shapes = [(hidden, d_in), (hidden,), (d_out, hidden), (d_out,)]
        shapes += adapter_shapes * 2
    clf_shapes = [(2 * n_classes, d_out), (2 * n_classes,)]
    shapes += clf_shapes * 2
    shapes += [(n_src, d_out), (n_tgt, d_out)]
    expected = _STATE_HEADER.size + 4 * sum(int(np.prod(s)) for s in shapes)
    if len(data) != expected:
        raise FormatError(f"expected {expected} bytes, file has {len(data)}",
                          offset=min(len(data), expected))
    arrays = []
    off = _STATE_HEADER.size
    for shape in shapes:
        count = int(np.prod(shape))
        arrays.append(np.frombuffer(data, dtype="<f4", count=count,
                                    offset=off).reshape(shape).astype(np.float32))
        off += 4 * count
    i = 0
    adapter = vel_adapter = None
    if has_adapter:
        adapter = AdapterParams(*arrays[0:4])
        vel_adapter = AdapterParams(*arrays[4:8])
        i = 8
    clf = ClassifierParams(*arrays[i:i + 2])
    vel_clf = ClassifierParams(*arrays[i + 2:i + 4])
    src_bank = MemoryBank.from_unit_rows(arrays[i + 4], alpha)
    tgt_bank = MemoryBank.from_unit_rows(arrays[i + 5], alpha)
    return TrainState(step=step, adapter=adapter, clf=clf,
                      vel_adapter=vel_adapter, vel_clf=vel_clf,
                      src_bank=src_bank, tgt_bank=tgt_bank)
