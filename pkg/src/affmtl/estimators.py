"""Scikit-learn-style estimators wrapping the training pipeline.

``SingleTaskAffect`` fits one encoder + head on (X, y) arrays;
``JointAffect`` runs the whole progressive recipe (single-task fits for the
fusion sources, bank extraction, joint training) behind one ``fit``. Both
follow the estimator contract: constructor params mirror attributes,
``get_params``/``set_params`` round-trip, fitted state lands in trailing-
underscore attributes, and ``fit`` returns self.

Rows are treated as consecutive frames of one sequence unless ``video_ids``
says otherwise; the validation split takes the tail fraction of each video.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from . import autodiff as ad
from .autodiff import Tensor
from .data import AnnotationRecord, TASKS, head_task
from .errors import ConfigError, DimensionError
from .layers import NUM_AUS
from .objectives import AU_SENTINEL, EXPR_SENTINEL, VA_SENTINEL
from .training import TrainConfig, evaluate, extract_bank, train_joint, train_single
from .validation import (
    check_au_labels,
    check_expr_labels,
    check_feature_matrix,
    check_label_block,
    check_va_labels,
)


def _rows_to_records(y_block: np.ndarray, video_ids) -> list[AnnotationRecord]:
    n = y_block.shape[0]
    if video_ids is None:
        video_ids = ["seq"] * n
    elif len(video_ids) != n:
        raise DimensionError(f"video_ids has {len(video_ids)} entries for {n} rows")
    counters: dict[str, int] = {}
    records = []
    for i in range(n):
        vid = str(video_ids[i])
        idx = counters.get(vid, 0)
        counters[vid] = idx + 1
        records.append(AnnotationRecord(
            video_id=vid,
            frame_index=idx,
            valence=float(y_block[i, 0]),
            arousal=float(y_block[i, 1]),
            expression=int(y_block[i, 2]),
            aus=tuple(int(a) for a in y_block[i, 3:]),
        ))
    return records


def _tail_split(records, val_fraction: float):
    """Per-video tail split so both halves keep consecutive frame runs."""
    by_video: dict[str, list] = {}
    for r in records:
        by_video.setdefault(r.video_id, []).append(r)
    train, val = [], []
    for vid in sorted(by_video):
        frames = by_video[vid]
        n_val = max(1, int(round(val_fraction * len(frames)))) if val_fraction > 0 else 0
        cut = len(frames) - n_val
        train.extend(frames[:cut])
        val.extend(frames[cut:])
    return train, val


def _features_dict(X: np.ndarray, records) -> dict:
    return {r.key: X[i] for i, r in enumerate(records)}


class _AffectBase(BaseEstimator):
    def _config(self, **overrides) -> TrainConfig:
        cfg = TrainConfig.from_dict({
            "feature_dim": self.feature_dim,
            "encoder_hidden": self.encoder_hidden,
            "learning_rate": self.learning_rate,
            "batch_size": self.batch_size,
            "max_epochs": self.max_epochs,
            "patience": self.patience,
            "seed": self.seed,
            "class_weight_mode": self.class_weight_mode,
            "val_fraction": self.val_fraction,
            **overrides,
        })
        return cfg


class SingleTaskAffect(_AffectBase):
    """One encoder + one task head, fit on frame features.

    ``task`` is one of AU / EXPR / V / A. ``y`` shapes per task:
    AU -> (n, 12) of 0/1 (or all -1 rows); EXPR -> (n,) classes 0..7 (or -1);
    V / A -> (n, 2) of [valence, arousal] in [-1, 1] (or -5).
    """

    def __init__(self, task: str = "EXPR", feature_dim: int = 16, encoder_hidden: int = 32,
                 learning_rate: float = 1e-3, batch_size: int = 32, max_epochs: int = 30,
                 patience: int = 5, seed: int = 0, class_weight_mode: str = "inverse",
                 val_fraction: float = 0.2):
        self.task = task
        self.feature_dim = feature_dim
        self.encoder_hidden = encoder_hidden
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.seed = seed
        self.class_weight_mode = class_weight_mode
        self.val_fraction = val_fraction

    def _label_block(self, X, y) -> np.ndarray:
        n = X.shape[0]
        block = np.full((n, 3 + NUM_AUS), np.nan)
        block[:, 0] = block[:, 1] = VA_SENTINEL
        block[:, 2] = EXPR_SENTINEL
        block[:, 3:] = AU_SENTINEL
        task = self.task
        if task not in TASKS:
            raise ConfigError(f"unknown task {task!r}; expected one of {TASKS}")
        if head_task(task) == "VA":
            block[:, :2] = check_va_labels(y, n)
        elif task == "EXPR":
            block[:, 2] = check_expr_labels(y, n)
        else:
            block[:, 3:] = check_au_labels(y, n)
        return block

    def fit(self, X, y, video_ids=None):
        X = check_feature_matrix(X)
        records = _rows_to_records(self._label_block(X, y), video_ids)
        features = _features_dict(X, records)
        train, val = _tail_split(records, self.val_fraction)
        result = train_single(self.task, self._config(tasks=[self.task]),
                              train, val, features)
        self.n_features_in_ = X.shape[1]
        self.checkpoint_ = result.checkpoint
        self.model_ = result.checkpoint.build_model()
        self.best_score_ = result.best_score
        self.log_ = result.log
        return self

    def _predict_raw(self, X) -> np.ndarray:
        if not hasattr(self, "model_"):
            raise ConfigError("estimator is not fitted")
        X = check_feature_matrix(X)
        if X.shape[1] != self.n_features_in_:
            raise DimensionError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        with ad.no_grad():
            f = self.model_.encoder(Tensor(X))
            return self.model_.heads(f, head_task(self.task)).data

    def predict_proba(self, X) -> np.ndarray:
        """AU: per-unit probabilities; EXPR: class distribution."""
        if head_task(self.task) == "VA":
            raise ConfigError("predict_proba is undefined for V/A regression")
        return self._predict_raw(X)

    def predict(self, X) -> np.ndarray:
        raw = self._predict_raw(X)
        if self.task == "AU":
            return (raw > 0.5).astype(np.int64)
        if self.task == "EXPR":
            return np.argmax(raw, axis=1)
        return raw  # (n, 2) [valence, arousal]

    def score(self, X, y) -> float:
        """The task's own validation metric (macro F1 or CCC)."""
        from .metrics import au_macro_f1, ccc_value, expr_macro_f1
        raw = self._predict_raw(X)
        n = raw.shape[0]
        if self.task == "AU":
            return au_macro_f1(raw, check_au_labels(y, n))[1]
        if self.task == "EXPR":
            return expr_macro_f1(raw, check_expr_labels(y, n))[1]
        va = check_va_labels(y, n)
        col = 0 if self.task == "V" else 1
        return ccc_value(raw[:, col], va[:, col])


class JointAffect(_AffectBase):
    """Progressive multi-task pipeline behind one estimator.

    ``fit(X, y)`` takes the (n, 15) label block [valence, arousal,
    expression, au1..au26]. Fusion-source banks are produced by internal
    single-task fits; the temporal block is on when ``seq_len`` > 1.
    """

    def __init__(self, tasks=("V", "A", "EXPR", "AU"), fusion_sources=(),
                 seq_len: int = 1, stride: int = 1, feature_dim: int = 16,
                 encoder_hidden: int = 32, learning_rate: float = 1e-3,
                 batch_size: int = 32, max_epochs: int = 30, patience: int = 5,
                 seed: int = 0, class_weight_mode: str = "inverse",
                 val_fraction: float = 0.2):
        self.tasks = tasks
        self.fusion_sources = fusion_sources
        self.seq_len = seq_len
        self.stride = stride
        self.feature_dim = feature_dim
        self.encoder_hidden = encoder_hidden
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.seed = seed
        self.class_weight_mode = class_weight_mode
        self.val_fraction = val_fraction

    def fit(self, X, y, video_ids=None):
        X = check_feature_matrix(X)
        y = check_label_block(y, X.shape[0])
        records = _rows_to_records(y, video_ids)
        features = _features_dict(X, records)
        train, val = _tail_split(records, self.val_fraction)

        banks = {}
        primary_ckpt = None
        primary = tuple(self.tasks)[0]
        needed = tuple(dict.fromkeys(tuple(self.fusion_sources) + (primary,)))
        for source in needed:
            result = train_single(source, self._config(tasks=[source]),
                                  train, val, features)
            if source == primary:
                primary_ckpt = result.checkpoint
            if source in self.fusion_sources:
                banks[source] = extract_bank(result.checkpoint, records, features)

        cfg = self._config(
            tasks=list(self.tasks),
            fusion_sources=list(self.fusion_sources),
            temporal=self.seq_len > 1,
            seq_len=self.seq_len,
            stride=self.stride,
        )
        result = train_joint(cfg, train, val, features, banks,
                             init_checkpoint=primary_ckpt)
        self.n_features_in_ = X.shape[1]
        self.banks_ = banks
        self.checkpoint_ = result.checkpoint
        self.model_ = result.checkpoint.build_model()
        self.config_ = cfg
        self.best_score_ = result.best_score
        return self

    def predict(self, X, video_ids=None) -> dict:
        """Per-task predictions for every row, keyed AU / EXPR / VA."""
        if not hasattr(self, "model_"):
            raise ConfigError("estimator is not fitted")
        X = check_feature_matrix(X)
        if X.shape[1] != self.n_features_in_:
            raise DimensionError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        block = np.zeros((X.shape[0], 3 + NUM_AUS))
        records = _rows_to_records(block, video_ids)
        features = _features_dict(X, records)
        from .training import predict_split
        preds, _ = predict_split(self.model_, records, features, self.config_, self.banks_)
        out = {}
        if "AU" in preds:
            out["AU"] = (preds["AU"] > 0.5).astype(np.int64)
        if "EXPR" in preds:
            out["EXPR"] = np.argmax(preds["EXPR"], axis=1)
        if "VA" in preds:
            out["VA"] = preds["VA"]
        return out

    def score(self, X, y, video_ids=None) -> float:
        """Validation metric of the primary (first) task."""
        y = check_label_block(y, np.asarray(X).shape[0])
        records = _rows_to_records(y, video_ids)
        features = _features_dict(check_feature_matrix(X), records)
        report = evaluate(self.model_, records, features, self.config_, self.banks_)
        primary = tuple(self.tasks)[0]
        value = {"AU": report.au_f1, "EXPR": report.expr_f1,
                 "V": report.ccc_valence, "A": report.ccc_arousal}[primary]
        if value is None:
            raise ConfigError(f"no score available for task {primary}")
        return value
