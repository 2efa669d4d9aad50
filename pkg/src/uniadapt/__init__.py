"""Universal domain adaptation on embedding-space features."""

from .core import (UNKNOWN, ClassSpace, ConfigError, ConvergenceError,
                   EvalError, FormatError, NumericsError, ShapeError,
                   SourceDataset, Status, TargetDataset, UniadaptError,
                   ZeroNormError)
from .datasets import SyntheticConfig, generate_synthetic, load_features, save_features
from .estimator import UniversalDomainAdapter
from .evaluation import EvalReport, evaluate, h_score, predict_batch
from .labeling import LabelingConfig, Verdict, knowability, label_batch
from .membank import MemoryBank, init_bank
from .model import (AdapterParams, ClassifierParams, embed, forward,
                    load_checkpoint, pair_probs, save_checkpoint)
from .train import TrainConfig, TrainState, fit, load_state, save_state

__version__ = "0.1.0"

__all__ = [
    "UNKNOWN",
    "AdapterParams",
    "ClassSpace",
    "ClassifierParams",
    "ConfigError",
    "ConvergenceError",
    "EvalError",
    "EvalReport",
    "FormatError",
    "LabelingConfig",
    "MemoryBank",
    "NumericsError",
    "ShapeError",
    "SourceDataset",
    "Status",
    "SyntheticConfig",
    "TargetDataset",
    "TrainConfig",
    "TrainState",
    "UniadaptError",
    "UniversalDomainAdapter",
    "Verdict",
    "ZeroNormError",
    "embed",
    "evaluate",
    "fit",
    "forward",
    "generate_synthetic",
    "h_score",
    "init_bank",
    "knowability",
    "label_batch",
    "load_checkpoint",
    "load_features",
    "load_state",
    "pair_probs",
    "predict_batch",
    "save_checkpoint",
    "save_features",
    "save_state",
    "__version__",
]
