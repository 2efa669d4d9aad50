"""Open-set evaluation: harmonic-mean score over common and unknown
accuracies, labeling-accuracy tallies, and histogram exports.

Class indices run 0..Y-1 with the open-set class mapped to index Y in
the confusion matrix. Accuracies that have an empty denominator (for
example a_unk on closed-set data) are reported as nan, not zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import (UNKNOWN, ClassSpace, EvalError, ShapeError, Status,
                   TargetDataset, check_labels)
from .labeling import Verdict
from .model import AdapterParams, ClassifierParams, embed, pair_probs


def h_score(a_com: float, a_unk: float) -> float:
    """Harmonic mean of the two accuracies; 0 when both are 0."""
    for v in (a_com, a_unk):
        if np.isnan(v):
            return float("nan")
        if not 0.0 <= v <= 1.0:
            raise ValueError(f"accuracy {v} outside [0, 1]")
    if a_com == 0.0 and a_unk == 0.0:
        return 0.0
    return 2.0 * a_com * a_unk / (a_com + a_unk)


@dataclass
class EvalReport:
    a_com: float
    a_unk: float
    h: float
    per_class: np.ndarray      # (Y,) accuracy per common class, nan if absent
    confusion: np.ndarray      # (Y+1, Y+1) counts, index Y = unknown
    n_samples: int


def predict_batch(features: np.ndarray, adapter: AdapterParams | None,
                  clf: ClassifierParams) -> tuple[np.ndarray, np.ndarray]:
    """Labels (UNKNOWN = -1) and reject scores for a feature batch."""
    probs = pair_probs(embed(features, adapter), clf)
    scores = probs[:, 1, :].min(axis=1)
    labels = np.where(scores > 0.5, UNKNOWN,
                      np.argmax(probs[:, 0, :], axis=1)).astype(np.int64)
    return labels, scores


def report_from_predictions(pred: np.ndarray, truth: np.ndarray,
                            n_classes: int, *, micro: bool = False) -> EvalReport:
    """Tally a report from already-computed predictions."""
    pred = check_labels(pred, len(pred), allow_unknown=True)
    truth = check_labels(truth, len(pred), allow_unknown=True)
    y = n_classes
    conf = np.zeros((y + 1, y + 1), dtype=np.int64)
    t_idx = np.where(truth == UNKNOWN, y, truth)
    p_idx = np.where(pred == UNKNOWN, y, pred)
    if t_idx.size and (t_idx.max() > y or p_idx.max() > y):
        raise ShapeError("label outside the class space")
    if t_idx.size:
        np.add.at(conf, (t_idx, p_idx), 1)

    counts = conf.sum(axis=1)
    per_class = np.full(y, np.nan)
    present = counts[:y] > 0
    per_class[present] = np.diag(conf)[:y][present] / counts[:y][present]
    if not present.any():
        a_com = float("nan")
    elif micro:
        a_com = float(np.diag(conf)[:y].sum() / counts[:y].sum())
    else:
        a_com = float(per_class[present].mean())
    a_unk = float(conf[y, y] / counts[y]) if counts[y] > 0 else float("nan")
    return EvalReport(a_com=a_com, a_unk=a_unk, h=h_score(a_com, a_unk),
                      per_class=per_class, confusion=conf,
                      n_samples=int(len(pred)))


def evaluate(target: TargetDataset, adapter: AdapterParams | None,
             clf: ClassifierParams, *, micro: bool = False) -> EvalReport:
    """Score the reject-rule predictions against ground truth.

    a_com averages per-class accuracies of the common classes present in
    the truth (unweighted by default, sample-weighted with micro=True);
    a_unk is the detection rate on truth-unknown rows.
    """
    if target.truth is None:
        raise EvalError("evaluation needs ground-truth labels")
    pred, _ = predict_batch(target.features, adapter, clf)
    return report_from_predictions(pred, target.truth, clf.n_classes, micro=micro)


def labeling_accuracy(verdicts: list[Verdict], truth: np.ndarray):
    """Fractions of truth-known samples correctly pseudo-labeled Known and
    of truth-unknown samples marked Unknown. Uncertain misses both ways.
    Returns None for a side whose truth subset is empty."""
    truth = np.asarray(truth, dtype=np.int64)
    if len(verdicts) != len(truth):
        raise ShapeError(f"{len(verdicts)} verdicts for {len(truth)} labels")
    n_known = n_known_hit = n_unk = n_unk_hit = 0
    for v, t in zip(verdicts, truth):
        if t == UNKNOWN:
            n_unk += 1
            n_unk_hit += v.status == Status.UNKNOWN
        else:
            n_known += 1
            n_known_hit += v.status == Status.KNOWN and v.pseudo_label == t
    acc_known = n_known_hit / n_known if n_known else None
    acc_unknown = n_unk_hit / n_unk if n_unk else None
    return acc_known, acc_unknown


def histogram(values: np.ndarray, n_bins: int, lo: float, hi: float) -> np.ndarray:
    """Fixed-width bin counts over [lo, hi]. A value on an interior
    boundary counts toward the higher bin; hi itself closes the last bin.
    Values outside the range are ignored."""
    if n_bins < 1:
        raise ValueError("need at least one bin")
    if not lo < hi:
        raise ValueError("empty histogram range")
    counts, _ = np.histogram(np.asarray(values, dtype=np.float64),
                             bins=n_bins, range=(lo, hi))
    return counts.astype(np.int64)


def format_report(report: EvalReport, classes: ClassSpace | None = None) -> str:
    """Flat key=value text block."""
    def fmt(v):
        return "nan" if np.isnan(v) else format(v, ".6f")
    lines = [
        f"n_samples={report.n_samples}",
        f"a_com={fmt(report.a_com)}",
        f"a_unk={fmt(report.a_unk)}",
        f"h_score={fmt(report.h)}",
    ]
    for j, acc in enumerate(report.per_class):
        name = classes.names[j] if classes and classes.names else str(j)
        lines.append(f"acc_class_{name}={fmt(acc)}")
    return "\n".join(lines) + "\n"


def confusion_tsv(report: EvalReport, classes: ClassSpace | None = None) -> str:
    """Confusion counts, truth rows by prediction columns, open-set last."""
    y = report.confusion.shape[0] - 1
    names = [classes.names[j] if classes and classes.names else str(j)
             for j in range(y)] + ["unknown"]
    lines = ["\t".join(["truth\\pred"] + names)]
    for i, row in enumerate(report.confusion):
        lines.append("\t".join([names[i]] + [str(int(c)) for c in row]))
    return "\n".join(lines) + "\n"


def histogram_tsv(counts: np.ndarray, lo: float, hi: float) -> str:
    """Columns bin_lo, bin_hi, count."""
    edges = np.linspace(lo, hi, len(counts) + 1)
    lines = ["bin_lo\tbin_hi\tcount"]
    for i, c in enumerate(counts):
        lines.append(f"{edges[i]:.6g}\t{edges[i + 1]:.6g}\t{int(c)}")
    return "\n".join(lines) + "\n"
