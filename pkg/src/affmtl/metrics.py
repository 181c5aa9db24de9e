"""Evaluation metrics and the per-run evaluation report.

Plain numpy throughout — nothing here touches the autodiff tape. Sentinel
filtering mirrors the objectives: drop invalid samples first, compute second,
so padded or unlabeled frames can never shift a score.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DegenerateInputError, DimensionError, ParseError
from .layers import NUM_AUS, NUM_EXPRESSIONS
from .objectives import AU_SENTINEL, CCC_DENOM_FLOOR, EXPR_SENTINEL, VA_SENTINEL

AU_THRESHOLD_DEFAULT = 0.5
VACUOUS_F1_DEFAULT = 1.0


def binary_f1(pred: np.ndarray, target: np.ndarray, vacuous_value: float = VACUOUS_F1_DEFAULT) -> float:
    """F1 = 2·TP / (2·TP + FP + FN) for one binary label.

    When the class is vacuous (no positives in either prediction or target)
    the score defaults to ``vacuous_value`` (1.0 by convention, 0.0 as the
    alternative convention).
    """
    pred = np.asarray(pred, dtype=bool).ravel()
    target = np.asarray(target, dtype=bool).ravel()
    if pred.shape != target.shape:
        raise DimensionError(f"binary_f1: {pred.shape} vs {target.shape}")
    tp = int(np.sum(pred & target))
    fp = int(np.sum(pred & ~target))
    fn = int(np.sum(~pred & target))
    denom = 2 * tp + fp + fn
    if denom == 0:
        return float(vacuous_value)
    return 2.0 * tp / denom


def au_macro_f1(probs: np.ndarray, targets: np.ndarray, threshold: float = AU_THRESHOLD_DEFAULT,
                vacuous_value: float = VACUOUS_F1_DEFAULT) -> tuple[np.ndarray, float]:
    """Per-unit and macro F1 over the 12 action units.

    ``probs`` are per-unit probabilities thresholded at ``threshold``
    (strictly greater counts as positive); rows with -1 targets are dropped.
    """
    probs = np.asarray(probs, dtype=np.float64)
    targets = np.asarray(targets)
    if probs.shape != targets.shape or probs.ndim != 2 or probs.shape[1] != NUM_AUS:
        raise DimensionError(f"au_macro_f1: {probs.shape} vs {targets.shape}")
    valid = targets[:, 0] != AU_SENTINEL
    if not valid.any():
        raise DegenerateInputError("no AU-labeled samples to score")
    pred = probs[valid] > threshold
    true = targets[valid] > 0
    per_unit = np.array([binary_f1(pred[:, j], true[:, j], vacuous_value) for j in range(NUM_AUS)])
    return per_unit, float(per_unit.mean())


def expr_macro_f1(dist: np.ndarray, targets: np.ndarray,
                  vacuous_value: float = VACUOUS_F1_DEFAULT) -> tuple[np.ndarray, float]:
    """Per-class and macro F1 over the 8 expression classes.

    The predicted class is the argmax of each distribution row (ties resolve
    to the lowest index); -1 targets are dropped.
    """
    dist = np.asarray(dist, dtype=np.float64)
    targets = np.asarray(targets).astype(np.int64).ravel()
    if dist.ndim != 2 or dist.shape[1] != NUM_EXPRESSIONS or dist.shape[0] != targets.shape[0]:
        raise DimensionError(f"expr_macro_f1: {dist.shape} vs {targets.shape}")
    valid = targets != EXPR_SENTINEL
    if not valid.any():
        raise DegenerateInputError("no expression-labeled samples to score")
    pred = np.argmax(dist[valid], axis=1)
    true = targets[valid]
    per_class = np.array([
        binary_f1(pred == j, true == j, vacuous_value) for j in range(NUM_EXPRESSIONS)
    ])
    return per_class, float(per_class.mean())


def ccc_value(pred: np.ndarray, target: np.ndarray) -> float:
    """Concordance correlation over valid (non-sentinel) entries.

    Same formula as the training objective: 2·cov / (var_p + var_t +
    (mean_p − mean_t)²) with population statistics and the denominator
    floored at 1e-8.
    """
    pred = np.asarray(pred, dtype=np.float64).ravel()
    target = np.asarray(target, dtype=np.float64).ravel()
    if pred.shape != target.shape:
        raise DimensionError(f"ccc_value: {pred.shape} vs {target.shape}")
    valid = target != VA_SENTINEL
    p, t = pred[valid], target[valid]
    if p.size < 2:
        raise DegenerateInputError("ccc needs at least 2 valid entries")
    mp, mt = p.mean(), t.mean()
    vp = ((p - mp) ** 2).mean()
    vt = ((t - mt) ** 2).mean()
    cov = ((p - mp) * (t - mt)).mean()
    return float(2.0 * cov / max(vp + vt + (mp - mt) ** 2, CCC_DENOM_FLOOR))


def composite_score(mean_ccc: float, expr_f1: float, au_f1: float) -> float:
    """Overall challenge score P = mean CCC + expression F1 + AU F1.

    ``mean_ccc`` is (CCC_valence + CCC_arousal) / 2. Perfect predictions on
    every task give P = 3.
    """
    for name, v in (("mean_ccc", mean_ccc), ("expr_f1", expr_f1), ("au_f1", au_f1)):
        if v is None:
            raise ConfigError(f"composite score needs {name}")
    return float(mean_ccc) + float(expr_f1) + float(au_f1)


_FLOAT_FIELDS = (
    "ccc_valence", "ccc_arousal", "mean_ccc", "expr_f1", "au_f1", "composite",
    "au_threshold", "vacuous_f1",
)
_INT_FIELDS = ("seed", "n_au", "n_expr", "n_valence", "n_arousal")


@dataclass
class EvalReport:
    """Scores of one model on one split, plus the conventions that made them.

    Task fields are None when the run did not train/evaluate that task;
    ``composite`` is present only when all three tasks are.
    """

    tasks: tuple[str, ...]
    seed: int
    config_hash: str
    au_threshold: float = AU_THRESHOLD_DEFAULT
    vacuous_f1: float = VACUOUS_F1_DEFAULT
    ccc_valence: float | None = None
    ccc_arousal: float | None = None
    mean_ccc: float | None = None
    expr_f1: float | None = None
    expr_f1_per_class: list | None = None
    au_f1: float | None = None
    au_f1_per_unit: list | None = None
    composite: float | None = None
    n_au: int = 0
    n_expr: int = 0
    n_valence: int = 0
    n_arousal: int = 0

    def to_json(self) -> str:
        d = dict(self.__dict__)
        d["tasks"] = list(self.tasks)
        return json.dumps(d, sort_keys=True, indent=2) + "\n"

    def to_text(self) -> str:
        """Flat key=value lines (floats via repr, exact round-trip)."""
        lines = [f"tasks={','.join(self.tasks)}", f"config_hash={self.config_hash}"]
        for name in _INT_FIELDS:
            lines.append(f"{name}={getattr(self, name)}")
        for name in _FLOAT_FIELDS:
            v = getattr(self, name)
            lines.append(f"{name}={'' if v is None else repr(float(v))}")
        for name in ("expr_f1_per_class", "au_f1_per_unit"):
            v = getattr(self, name)
            lines.append(f"{name}={'' if v is None else ','.join(repr(float(x)) for x in v)}")
        return "\n".join(lines) + "\n"

    @staticmethod
    def from_json(text: str) -> "EvalReport":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as e:
            raise ParseError(f"report is not valid JSON: {e}") from None
        d["tasks"] = tuple(d["tasks"])
        return EvalReport(**d)


def build_report(tasks: tuple[str, ...], seed: int, config_hash: str, *,
                 au_probs: np.ndarray | None = None, au_targets: np.ndarray | None = None,
                 expr_dist: np.ndarray | None = None, expr_targets: np.ndarray | None = None,
                 pred_valence: np.ndarray | None = None, target_valence: np.ndarray | None = None,
                 pred_arousal: np.ndarray | None = None, target_arousal: np.ndarray | None = None,
                 au_threshold: float = AU_THRESHOLD_DEFAULT,
                 vacuous_f1: float = VACUOUS_F1_DEFAULT) -> EvalReport:
    """Score whichever task predictions are supplied and assemble a report."""
    rep = EvalReport(tasks=tuple(tasks), seed=seed, config_hash=config_hash,
                     au_threshold=au_threshold, vacuous_f1=vacuous_f1)
    if au_probs is not None:
        per_unit, macro = au_macro_f1(au_probs, au_targets, au_threshold, vacuous_f1)
        rep.au_f1_per_unit = [float(x) for x in per_unit]
        rep.au_f1 = macro
        rep.n_au = int(np.sum(np.asarray(au_targets)[:, 0] != AU_SENTINEL))
    if expr_dist is not None:
        per_class, macro = expr_macro_f1(expr_dist, expr_targets, vacuous_f1)
        rep.expr_f1_per_class = [float(x) for x in per_class]
        rep.expr_f1 = macro
        rep.n_expr = int(np.sum(np.asarray(expr_targets).ravel() != EXPR_SENTINEL))
    if pred_valence is not None:
        rep.ccc_valence = ccc_value(pred_valence, target_valence)
        rep.n_valence = int(np.sum(np.asarray(target_valence).ravel() != VA_SENTINEL))
    if pred_arousal is not None:
        rep.ccc_arousal = ccc_value(pred_arousal, target_arousal)
        rep.n_arousal = int(np.sum(np.asarray(target_arousal).ravel() != VA_SENTINEL))
    if rep.ccc_valence is not None and rep.ccc_arousal is not None:
        rep.mean_ccc = (rep.ccc_valence + rep.ccc_arousal) / 2.0
    if rep.mean_ccc is not None and rep.expr_f1 is not None and rep.au_f1 is not None:
        rep.composite = composite_score(rep.mean_ccc, rep.expr_f1, rep.au_f1)
    return rep
