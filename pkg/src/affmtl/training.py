"""Training: configuration, Adam, the single-task and joint loops, feature
banks, and split-level evaluation.

The progressive recipe is three stages: train one model per task on its valid
subset; freeze each trained encoder into a per-frame feature bank; then train
jointly, fusing the current encoder's output with bank vectors from other
tasks and optionally running the temporal block over frame windows.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import Checkpoint
from .data import (
    Batch,
    DatasetSplit,
    batches,
    build_windows,
    filter_valid,
    head_task,
    TASKS,
)
from .errors import (
    ConfigError,
    DegenerateInputError,
    EmptyBatchError,
    MissingFrameError,
    TrainingError,
)
from .layers import AffectModel, ModelSpec
from .metrics import (
    AU_THRESHOLD_DEFAULT,
    VACUOUS_F1_DEFAULT,
    EvalReport,
    au_macro_f1,
    build_report,
    ccc_value,
    expr_macro_f1,
)
from .objectives import (
    AU_SENTINEL,
    EXPR_SENTINEL,
    VA_SENTINEL,
    LossWeights,
    au_loss,
    compute_class_weights,
    expr_loss,
    overall_loss,
    va_loss,
)

# Seed-stream salts (master seed, salt, ...) so shuffling, dropout, and model
# init never share a stream.
_SHUFFLE_SALT = 11
_DROPOUT_SALT = 7


@dataclass(frozen=True)
class TrainConfig:
    """Everything a training run needs beyond the data itself.

    ``tasks`` is the joint task set; the first entry is the primary task,
    whose validation metric drives checkpoint selection and early stopping.
    V and A are separate tasks sharing the 2-unit VA head; the VA loss sums
    the CCC terms of whichever of them are present.
    """

    tasks: tuple[str, ...] = ("EXPR",)
    fusion_sources: tuple[str, ...] = ()
    temporal: bool = False
    seq_len: int = 1
    stride: int = 1
    temporal_tasks: tuple[str, ...] | None = None  # None -> all tasks
    loss_weight_au: float | None = None  # None -> 1.0 if the task is present
    loss_weight_expr: float | None = None
    loss_weight_va: float | None = None
    batch_size: int = 32
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 5.0
    max_epochs: int = 30
    patience: int = 5
    seed: int = 0
    class_weight_mode: str = "inverse"
    feature_dim: int = 16
    encoder_hidden: int = 32
    dropout: float = 0.1
    leaky_alpha: float = 0.01
    init_from: str = "primary"  # joint only: "primary" | "scratch"
    fusion_passthrough: bool = False
    val_fraction: float = 0.25
    au_threshold: float = AU_THRESHOLD_DEFAULT
    vacuous_f1: float = VACUOUS_F1_DEFAULT
    shuffle: bool = True

    def validate(self) -> None:
        if not self.tasks:
            raise ConfigError("tasks must be non-empty")
        for t in self.tasks:
            if t not in TASKS:
                raise ConfigError(f"unknown task {t!r}; expected one of {TASKS}")
        if len(set(self.tasks)) != len(self.tasks):
            raise ConfigError("tasks contains duplicates")
        for s in self.fusion_sources:
            if s not in TASKS:
                raise ConfigError(f"unknown fusion source {s!r}")
        if self.temporal and self.seq_len < 2:
            raise ConfigError("temporal training requires seq_len >= 2")
        if not self.temporal and self.seq_len != 1:
            raise ConfigError("seq_len > 1 requires temporal=true")
        if self.seq_len < 1 or self.stride < 1:
            raise ConfigError("seq_len and stride must be >= 1")
        if self.temporal_tasks is not None:
            extra = set(self.temporal_tasks) - set(self.tasks)
            if extra:
                raise ConfigError(f"temporal_tasks not in tasks: {sorted(extra)}")
        for name in ("batch_size", "max_epochs", "patience"):
            if getattr(self, name) < 0 or (name == "batch_size" and self.batch_size < 1):
                raise ConfigError(f"{name} must be non-negative")
        if self.class_weight_mode not in ("inverse", "ones"):
            raise ConfigError(f"unknown class_weight_mode {self.class_weight_mode!r}")
        if self.init_from not in ("primary", "scratch"):
            raise ConfigError(f"unknown init_from {self.init_from!r}")
        if not (0.0 <= self.val_fraction < 1.0):
            raise ConfigError("val_fraction must be in [0, 1)")
        for name in ("learning_rate", "dropout", "leaky_alpha", "grad_clip"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        ws = self.loss_weights()
        for task, w in (("AU", ws.au), ("EXPR", ws.expr)):
            if (task in self.tasks) != (w != 0.0):
                raise ConfigError(f"loss weight for {task} inconsistent with task set")
        if (("V" in self.tasks) or ("A" in self.tasks)) != (ws.va != 0.0):
            raise ConfigError("loss weight for VA inconsistent with task set")

    def loss_weights(self) -> LossWeights:
        def derive(explicit, present):
            if explicit is not None:
                return float(explicit)
            return 1.0 if present else 0.0

        return LossWeights(
            au=derive(self.loss_weight_au, "AU" in self.tasks),
            expr=derive(self.loss_weight_expr, "EXPR" in self.tasks),
            va=derive(self.loss_weight_va, ("V" in self.tasks) or ("A" in self.tasks)),
        )

    def va_components(self) -> tuple[str, ...]:
        comps = []
        if "V" in self.tasks:
            comps.append("valence")
        if "A" in self.tasks:
            comps.append("arousal")
        return tuple(comps)

    def resolved_temporal_tasks(self) -> frozenset[str]:
        if not self.temporal:
            return frozenset()
        chosen = self.tasks if self.temporal_tasks is None else self.temporal_tasks
        return frozenset(head_task(t) for t in chosen)

    def to_dict(self) -> dict:
        d = {}
        for f in fields(self):
            v = getattr(self, f.name)
            d[f.name] = list(v) if isinstance(v, tuple) else v
        return d

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        known = {f.name for f in fields(TrainConfig)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config key(s): {sorted(unknown)}")
        kwargs = dict(d)
        for name in ("tasks", "fusion_sources", "temporal_tasks"):
            if name in kwargs and kwargs[name] is not None:
                if not isinstance(kwargs[name], (list, tuple)):
                    raise ConfigError(f"{name} must be a list")
                kwargs[name] = tuple(kwargs[name])
        try:
            cfg = TrainConfig(**kwargs)
        except TypeError as e:
            raise ConfigError(str(e)) from None
        cfg.validate()
        return cfg

    def hash(self) -> str:
        return hashlib.sha256(
            json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")
        ).hexdigest()[:16]


def config_defaults_help() -> str:
    """One line per config key with its default (used by the CLI --help)."""
    lines = []
    for f in fields(TrainConfig):
        default = f.default
        lines.append(f"  {f.name} (default: {default!r})")
    return "\n".join(lines)


class Adam:
    """Adam with bias correction and global-norm gradient clipping.

    Parameters whose ``grad`` is None are skipped entirely, so a task head
    excluded from the loss stays bitwise unchanged. Moment state is keyed by
    parameter name with a per-parameter step count.
    """

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, grad_clip: float = 5.0):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.grad_clip = grad_clip
        self.state: dict[str, tuple[np.ndarray, np.ndarray, int]] = {}

    def step(self) -> None:
        live = [(n, p) for n, p in self.params.items() if p.grad is not None]
        for name, p in live:
            if not np.all(np.isfinite(p.grad)):
                raise TrainingError(f"non-finite gradient in {name!r}")
        if self.grad_clip > 0 and live:
            total = np.sqrt(sum(float(np.sum(p.grad * p.grad)) for _, p in live))
            if total > self.grad_clip:
                scale = self.grad_clip / total
                for _, p in live:
                    p.grad *= scale
        for name, p in live:
            m, v, t = self.state.get(name, (np.zeros_like(p.data), np.zeros_like(p.data), 0))
            t += 1
            m = self.beta1 * m + (1.0 - self.beta1) * p.grad
            v = self.beta2 * v + (1.0 - self.beta2) * (p.grad * p.grad)
            m_hat = m / (1.0 - self.beta1 ** t)
            v_hat = v / (1.0 - self.beta2 ** t)
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
            self.state[name] = (m, v, t)
            p.grad = None


# ---------------------------------------------------------------------------
# Feature banks
# ---------------------------------------------------------------------------


@dataclass
class FeatureBank:
    """Frozen per-frame encoder outputs from one trained single-task model."""

    source_task: str
    stage: str
    checkpoint_hash: str
    feature_dim: int
    vectors: dict  # (video_id, frame_index) -> (feature_dim,) array

    def lookup_rows(self, keys) -> np.ndarray:
        missing = sorted({k for k in keys if k not in self.vectors})
        if missing:
            raise MissingFrameError(
                f"bank {self.source_task}: no vector for {missing[:5]}"
                + (f" (+{len(missing) - 5} more)" if len(missing) > 5 else "")
            )
        return np.stack([self.vectors[k] for k in keys])


def extract_bank(ckpt: Checkpoint, records, features: dict,
                 batch_size: int = 256) -> FeatureBank:
    """Run the checkpointed encoder over every record's features, frozen."""
    model = ckpt.build_model()
    recs = records.records if isinstance(records, DatasetSplit) else list(records)
    keys = sorted({r.key for r in recs})
    missing = [k for k in keys if k not in features]
    if missing:
        raise MissingFrameError(f"no feature vector for {missing[:5]}"
                                + (f" (+{len(missing) - 5} more)" if len(missing) > 5 else ""))
    vectors = {}
    for lo in range(0, len(keys), batch_size):
        chunk = keys[lo:lo + batch_size]
        feats = np.stack([np.asarray(features[k], dtype=np.float64) for k in chunk])
        out = model.encode(feats)
        for k, row in zip(chunk, out):
            vectors[k] = row.copy()
    task = ckpt.provenance.get("tasks", ["?"])[0]
    return FeatureBank(
        source_task=task,
        stage=ckpt.provenance.get("stage", "?"),
        checkpoint_hash=ckpt.content_hash(),
        feature_dim=ckpt.model_spec.feature_dim,
        vectors=vectors,
    )


# ---------------------------------------------------------------------------
# Shared loop machinery
# ---------------------------------------------------------------------------


@dataclass
class EpochLog:
    epoch: int  # 0 = initial evaluation, 1.. = training epochs
    loss_total: float | None
    loss_au: float | None
    loss_expr: float | None
    loss_va: float | None
    skipped_task_batches: int
    val_score: float


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: list[EpochLog]
    loss_history: list[float]  # mean total loss per training epoch
    best_score: float
    best_epoch: int


def _batch_f_other(batch: Batch, banks: dict, sources: tuple[str, ...], d: int):
    if not sources:
        return np.zeros((len(batch.keys), d))
    total = np.zeros((len(batch.keys), d))
    for s in sources:
        total += banks[s].lookup_rows(batch.keys)
    return total


def _mask_padding(batch: Batch):
    """Return label arrays with padded frames forced to sentinels so they
    never contribute to losses or metrics."""
    pad = ~batch.pad_mask
    valence = batch.valence.copy()
    arousal = batch.arousal.copy()
    expression = batch.expression.copy()
    aus = batch.aus.copy()
    valence[pad] = VA_SENTINEL
    arousal[pad] = VA_SENTINEL
    expression[pad] = EXPR_SENTINEL
    aus[pad] = AU_SENTINEL
    return valence, arousal, expression, aus


def _task_metric(task: str, preds: dict, labels, config: TrainConfig) -> float:
    valence, arousal, expression, aus = labels
    if task == "AU":
        return au_macro_f1(preds["AU"], aus, config.au_threshold, config.vacuous_f1)[1]
    if task == "EXPR":
        return expr_macro_f1(preds["EXPR"], expression, config.vacuous_f1)[1]
    if task == "V":
        return ccc_value(preds["VA"][:, 0], valence)
    if task == "A":
        return ccc_value(preds["VA"][:, 1], arousal)
    raise ConfigError(f"unknown task {task!r}")


def predict_split(model: AffectModel, records, features: dict, config: TrainConfig,
                  banks: dict | None = None):
    """Predict every real frame of a split exactly once.

    Evaluation tiles windows with stride = seq_len regardless of the training
    stride, drops padded tail frames, and returns stacked predictions plus
    the aligned label arrays.
    """
    recs = records.records if isinstance(records, DatasetSplit) else list(records)
    if not recs:
        raise DegenerateInputError("empty split")
    windows = build_windows(recs, config.seq_len, config.seq_len)
    head_tasks = tuple(dict.fromkeys(head_task(t) for t in config.tasks))
    temporal_heads = config.resolved_temporal_tasks()
    sources = config.fusion_sources
    outs = {t: [] for t in head_tasks}
    labels = {"valence": [], "arousal": [], "expression": [], "aus": []}
    with ad.no_grad():
        for batch in batches(windows, features, config.batch_size):
            f_other = None
            if model.fusion is not None:
                f_other = _batch_f_other(batch, banks or {}, sources, config.feature_dim)
            preds = model.forward(batch.features, f_other, batch.batch, batch.seq_len,
                                  head_tasks, training=False,
                                  temporal_heads=temporal_heads)
            real = batch.pad_mask
            for t in head_tasks:
                outs[t].append(preds[t].data[real])
            labels["valence"].append(batch.valence[real])
            labels["arousal"].append(batch.arousal[real])
            labels["expression"].append(batch.expression[real])
            labels["aus"].append(batch.aus[real])
    preds = {t: np.concatenate(v) for t, v in outs.items()}
    label_arrays = (
        np.concatenate(labels["valence"]),
        np.concatenate(labels["arousal"]),
        np.concatenate(labels["expression"]),
        np.concatenate(labels["aus"]),
    )
    return preds, label_arrays


def evaluate(model: AffectModel, records, features: dict, config: TrainConfig,
             banks: dict | None = None) -> EvalReport:
    """Score a model on a split over its configured tasks."""
    preds, (valence, arousal, expression, aus) = predict_split(
        model, records, features, config, banks)
    kwargs = {}
    if "AU" in preds:
        kwargs.update(au_probs=preds["AU"], au_targets=aus)
    if "EXPR" in preds:
        kwargs.update(expr_dist=preds["EXPR"], expr_targets=expression)
    if "VA" in preds:
        if "V" in config.tasks:
            kwargs.update(pred_valence=preds["VA"][:, 0], target_valence=valence)
        if "A" in config.tasks:
            kwargs.update(pred_arousal=preds["VA"][:, 1], target_arousal=arousal)
    return build_report(config.tasks, config.seed, config.hash(),
                        au_threshold=config.au_threshold, vacuous_f1=config.vacuous_f1,
                        **kwargs)


def _train_loop(model: AffectModel, config: TrainConfig,
                train_records, val_records, features: dict,
                banks: dict | None, provenance: dict) -> TrainResult:
    config.validate()
    recs = train_records.records if isinstance(train_records, DatasetSplit) else list(train_records)
    if not recs:
        raise DegenerateInputError("empty training split")
    train_split = DatasetSplit.from_records(recs)
    weights = compute_class_weights(
        train_split.au_positive_counts, train_split.valid_counts["AU"],
        train_split.expr_class_counts, train_split.valid_counts["EXPR"],
        mode=config.class_weight_mode,
    )
    loss_weights = config.loss_weights()
    head_tasks = tuple(dict.fromkeys(head_task(t) for t in config.tasks))
    temporal_heads = config.resolved_temporal_tasks()
    va_components = config.va_components()
    windows = build_windows(recs, config.seq_len, config.stride)
    optimizer = Adam(model.trainable_parameters(), lr=config.learning_rate,
                     beta1=config.beta1, beta2=config.beta2, eps=config.adam_eps,
                     grad_clip=config.grad_clip)
    dropout_rng = np.random.default_rng([config.seed, _DROPOUT_SALT])

    primary = config.tasks[0]

    def validation_score() -> float:
        preds, labels = predict_split(model, val_records, features, config, banks)
        return _task_metric(primary, preds, labels, config)

    log: list[EpochLog] = []
    loss_history: list[float] = []
    best_score = validation_score()
    best_epoch = 0
    best_state = model.state_dict()
    log.append(EpochLog(0, None, None, None, None, 0, best_score))

    stale = 0
    for epoch in range(1, config.max_epochs + 1):
        sums = {"AU": 0.0, "EXPR": 0.0, "VA": 0.0, "total": 0.0}
        counts = {"AU": 0, "EXPR": 0, "VA": 0, "total": 0}
        skipped = 0
        stream = batches(windows, features, config.batch_size,
                         seed=[config.seed, _SHUFFLE_SALT, epoch],
                         shuffle=config.shuffle)
        for batch in stream:
            f_other = None
            if model.fusion is not None:
                f_other = _batch_f_other(batch, banks or {}, config.fusion_sources,
                                         config.feature_dim)
            preds = model.forward(batch.features, f_other, batch.batch, batch.seq_len,
                                  head_tasks, training=True, rng=dropout_rng,
                                  temporal_heads=temporal_heads)
            valence, arousal, expression, aus = _mask_padding(batch)
            task_losses = {}
            if loss_weights.au != 0.0:
                try:
                    task_losses["AU"] = au_loss(preds["AU"], aus, weights.au)
                except EmptyBatchError:
                    skipped += 1
            if loss_weights.expr != 0.0:
                try:
                    task_losses["EXPR"] = expr_loss(preds["EXPR"], expression, weights.expr)
                except EmptyBatchError:
                    skipped += 1
            if loss_weights.va != 0.0:
                try:
                    task_losses["VA"] = va_loss(_column(preds["VA"], 0),
                                                _column(preds["VA"], 1),
                                                valence, arousal,
                                                components=va_components)
                except EmptyBatchError:
                    skipped += 1
            try:
                total = overall_loss(task_losses, loss_weights)
            except EmptyBatchError:
                ad.active_tape().reset()
                continue
            for t, l in task_losses.items():
                sums[t] += l.item()
                counts[t] += 1
            sums["total"] += total.item()
            counts["total"] += 1
            ad.backward(total)
            optimizer.step()

        def avg(t):
            return sums[t] / counts[t] if counts[t] else None

        score = validation_score()
        log.append(EpochLog(epoch, avg("total"), avg("AU"), avg("EXPR"), avg("VA"),
                            skipped, score))
        loss_history.append(avg("total") if counts["total"] else float("nan"))
        if score > best_score:
            best_score = score
            best_epoch = epoch
            best_state = model.state_dict()
            stale = 0
        else:
            stale += 1
            if config.patience and stale >= config.patience:
                break

    ckpt = Checkpoint(
        params=best_state,
        model_spec=model.spec,
        config=config.to_dict(),
        seed=config.seed,
        provenance=dict(provenance),
        best_score=best_score,
        best_epoch=best_epoch,
    )
    return TrainResult(ckpt, log, loss_history, best_score, best_epoch)


def _column(pred: Tensor, col: int) -> Tensor:
    """(N, 2) prediction -> 1-D column view, staying on the tape."""
    n = pred.shape[0]
    return ad.reshape(ad.narrow(pred, 1, col, 1), (n,))


def train_single(task: str, config: TrainConfig, train_records, val_records,
                 features: dict) -> TrainResult:
    """Stage 1: one encoder + its task head on the task's valid subset."""
    if task not in TASKS:
        raise ConfigError(f"unknown task {task!r}")
    config = replace(config, tasks=(task,), fusion_sources=(), temporal=False,
                     seq_len=1, stride=1, temporal_tasks=None,
                     fusion_passthrough=False, init_from="scratch")
    train_f = filter_valid(train_records, task)
    val_f = filter_valid(val_records, task)
    if not len(train_f):
        raise DegenerateInputError(f"no {task}-labeled training records")
    if not len(val_f):
        raise DegenerateInputError(f"no {task}-labeled validation records")
    input_dim = len(next(iter(features.values())))
    spec = ModelSpec(input_dim=input_dim, feature_dim=config.feature_dim,
                     encoder_hidden=config.encoder_hidden, with_fusion=False,
                     with_temporal=False, dropout=config.dropout,
                     leaky_alpha=config.leaky_alpha)
    model = AffectModel(spec, config.seed)
    return _train_loop(model, config, train_f, val_f, features, None,
                       {"stage": "single", "tasks": [task]})


def train_joint(config: TrainConfig, train_records, val_records, features: dict,
                banks: dict, init_checkpoint: Checkpoint | None = None) -> TrainResult:
    """Stage 3: fusion (+ optional temporal) joint training over the task set.

    Every fusion source must come with a bank extracted from a single-task
    checkpoint. By default the encoder warm-starts from the primary task's
    single-task checkpoint; ``init_from="scratch"`` trains from fresh init.
    """
    config.validate()
    for s in config.fusion_sources:
        if s not in banks:
            raise ConfigError(f"fusion source {s!r} has no bank")
        bank = banks[s]
        if bank.stage != "single":
            raise ConfigError(
                f"bank for {s!r} was extracted from a {bank.stage!r} checkpoint; "
                "fusion sources need single-task provenance")
        if bank.feature_dim != config.feature_dim:
            raise ConfigError(
                f"bank {s!r} dim {bank.feature_dim} != feature_dim {config.feature_dim}")
    input_dim = len(next(iter(features.values())))
    spec = ModelSpec(input_dim=input_dim, feature_dim=config.feature_dim,
                     encoder_hidden=config.encoder_hidden, with_fusion=True,
                     with_temporal=config.temporal, dropout=config.dropout,
                     leaky_alpha=config.leaky_alpha,
                     fusion_passthrough=config.fusion_passthrough)
    model = AffectModel(spec, config.seed)
    if config.init_from == "primary":
        if init_checkpoint is None:
            raise ConfigError('init_from="primary" needs the primary task\'s '
                              'single-task checkpoint')
        if init_checkpoint.provenance.get("stage") != "single":
            raise ConfigError("init checkpoint must come from single-task training")
        encoder_state = {n: a for n, a in init_checkpoint.params.items()
                         if n.startswith("encoder.")}
        model.load_state(encoder_state, subset=True)
    provenance = {
        "stage": "joint",
        "tasks": list(config.tasks),
        "fusion_sources": list(config.fusion_sources),
        "temporal": config.temporal,
        "temporal_tasks": sorted(config.resolved_temporal_tasks()),
        "bank_hashes": {s: banks[s].checkpoint_hash for s in config.fusion_sources},
        "init_from": config.init_from,
    }
    return _train_loop(model, config, train_records, val_records, features,
                       banks, provenance)
