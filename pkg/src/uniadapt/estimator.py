"""scikit-learn style front door for the whole pipeline.

The estimator trains on a single (X, y) pair in which target-domain rows
are marked with y == -1; that matches the semi-supervised labeling
convention, so the class composes with clone/get_params tooling and can
sit inside ordinary model-selection code.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .core import UNKNOWN, SourceDataset, TargetDataset
from .evaluation import EvalReport, evaluate, predict_batch
from .labeling import auto_threshold, label_batch
from .model import embed, pair_probs
from .train import TrainConfig, fit


class UniversalDomainAdapter(BaseEstimator, ClassifierMixin):
    """Open-set domain adaptation classifier.

    Fit on labeled source rows stacked with unlabeled target rows
    (``y == -1`` marks the target domain). ``predict`` returns a source
    class index or ``-1`` for samples rejected as unknown.

    Parameters mirror the training configuration; ``random_state`` seeds
    every randomized choice, so equal inputs give bitwise-equal models.
    """

    def __init__(self, *, hidden_dim=256, use_adapter=True, lr=0.01,
                 adapter_lr=0.01, head_lr_scale=9.0, warmup_steps=500,
                 momentum=0.9, weight_decay=5e-4, batch_size=36,
                 bank_momentum=0.9, n_neighbors=10,
                 knowability_threshold=0.5, credibility_scale=0.8,
                 lam=0.1, max_steps=1000, sched_gamma=10.0,
                 sched_power=0.75, n_threads=1, random_state=0):
        self.hidden_dim = hidden_dim
        self.use_adapter = use_adapter
        self.lr = lr
        self.adapter_lr = adapter_lr
        self.head_lr_scale = head_lr_scale
        self.warmup_steps = warmup_steps
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.bank_momentum = bank_momentum
        self.n_neighbors = n_neighbors
        self.knowability_threshold = knowability_threshold
        self.credibility_scale = credibility_scale
        self.lam = lam
        self.max_steps = max_steps
        self.sched_gamma = sched_gamma
        self.sched_power = sched_power
        self.n_threads = n_threads
        self.random_state = random_state

    def _config(self) -> TrainConfig:
        return TrainConfig(
            lr=self.lr, lr_backbone=self.adapter_lr,
            head_lr_scale=self.head_lr_scale,
            warmup_steps=self.warmup_steps, momentum=self.momentum,
            weight_decay=self.weight_decay, batch=self.batch_size,
            alpha=self.bank_momentum, n_neighbors=self.n_neighbors,
            k_tau=self.knowability_threshold,
            cred_scale=self.credibility_scale, lam=self.lam,
            max_steps=self.max_steps, sched_gamma=self.sched_gamma,
            sched_power=self.sched_power, seed=self.random_state,
            hidden=self.hidden_dim, use_adapter=self.use_adapter,
            n_threads=self.n_threads,
        )

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float32, ensure_min_samples=2)
        y = y.astype(np.int64)
        tgt_mask = y == UNKNOWN
        if not tgt_mask.any():
            raise ValueError("no target rows: mark them with y == -1")
        if tgt_mask.all():
            raise ValueError("no labeled source rows")
        source = SourceDataset(X[~tgt_mask], y[~tgt_mask])
        target = TargetDataset(X[tgt_mask])
        cfg = self._config()
        state, reports = fit(source, target, cfg)
        self.adapter_ = state.adapter
        self.classifier_ = state.clf
        self.source_bank_ = state.src_bank
        self.target_bank_ = state.tgt_bank
        self.source_labels_ = source.labels
        self.history_ = reports
        self.classes_ = np.arange(source.n_classes, dtype=np.int64)
        self.n_features_in_ = X.shape[1]
        return self

    def _check_input(self, X) -> np.ndarray:
        check_is_fitted(self, "classifier_")
        X = check_array(X, dtype=np.float32)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, "
                             f"expected {self.n_features_in_}")
        return X

    def predict(self, X):
        """Class index per row, or -1 where the reject rule fires."""
        X = self._check_input(X)
        labels, _ = predict_batch(X, self.adapter_, self.classifier_)
        return labels

    def predict_proba(self, X):
        """Per-class accept probabilities, shape (n, Y).

        These come from independent per-class accept/reject pairs, so
        rows do not sum to 1; they are calibrated against rejection, not
        against each other.
        """
        X = self._check_input(X)
        probs = pair_probs(embed(X, self.adapter_), self.classifier_)
        return probs[:, 0, :]

    def reject_scores(self, X):
        """Minimum reject probability per row; above 0.5 means unknown."""
        X = self._check_input(X)
        _, scores = predict_batch(X, self.adapter_, self.classifier_)
        return scores

    def label_target(self, X):
        """Three-way verdicts for target rows using the trained banks.

        The credibility gate needs a threshold; it is recomputed here
        from the stored source bank through the trained classifier.
        """
        X = self._check_input(X)
        c_tau = auto_threshold(pair_probs(
            self.source_bank_.features.astype(np.float64), self.classifier_))
        return label_batch(embed(X, self.adapter_), self.source_bank_,
                           self.target_bank_, self.classifier_, c_tau,
                           self._config().labeling(),
                           n_threads=self.n_threads)

    def evaluate(self, X, y_true) -> EvalReport:
        """Open-set report (common accuracy, unknown accuracy, harmonic
        mean) against truth labels that may contain -1."""
        X = self._check_input(X)
        target = TargetDataset(X, np.asarray(y_true, dtype=np.int64))
        return evaluate(target, self.adapter_, self.classifier_)
