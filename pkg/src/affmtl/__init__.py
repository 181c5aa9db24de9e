"""Progressive multi-task affect learning.

Frame features in; valence/arousal, expression class, and action-unit
activations out. Single-task models train first, their frozen encoders become
per-frame feature banks, and a joint model fuses those banks (optionally
through a temporal LSTM stack) under a weighted multi-task objective.
"""

from .autodiff import Tensor, backward, finite_diff_check, no_grad
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import (
    AnnotationRecord,
    SentinelRates,
    build_windows,
    dedup,
    filter_valid,
    load_corpus,
    parse_annotations,
    read_features,
    serialize_annotations,
    split_by_video,
    synth_corpus,
    synth_generate,
    write_features,
)
from .estimators import JointAffect, SingleTaskAffect
from .layers import AffectModel, ModelSpec, init_params
from .metrics import (
    EvalReport,
    au_macro_f1,
    binary_f1,
    build_report,
    ccc_value,
    composite_score,
    expr_macro_f1,
)
from .objectives import (
    ClassWeights,
    LossWeights,
    au_loss,
    ccc,
    compute_class_weights,
    expr_loss,
    overall_loss,
    va_loss,
)
from .search import SearchReport, StrategySpec, parse_grid, run_search
from .training import (
    Adam,
    FeatureBank,
    TrainConfig,
    TrainResult,
    evaluate,
    extract_bank,
    train_joint,
    train_single,
)

__version__ = "0.1.0"

__all__ = [
    "Tensor", "backward", "finite_diff_check", "no_grad",
    "Checkpoint", "load_checkpoint", "save_checkpoint",
    "AnnotationRecord", "SentinelRates", "build_windows", "dedup",
    "filter_valid", "load_corpus", "parse_annotations", "read_features",
    "serialize_annotations", "split_by_video", "synth_corpus", "synth_generate",
    "write_features",
    "JointAffect", "SingleTaskAffect",
    "AffectModel", "ModelSpec", "init_params",
    "EvalReport", "au_macro_f1", "binary_f1", "build_report", "ccc_value",
    "composite_score", "expr_macro_f1",
    "ClassWeights", "LossWeights", "au_loss", "ccc", "compute_class_weights",
    "expr_loss", "overall_loss", "va_loss",
    "SearchReport", "StrategySpec", "parse_grid", "run_search",
    "Adam", "FeatureBank", "TrainConfig", "TrainResult", "evaluate",
    "extract_bank", "train_joint", "train_single",
    "__version__",
]
