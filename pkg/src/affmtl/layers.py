"""Model building blocks: encoder, feature fusion, temporal LSTM stack, heads.

All weights initialize uniform in ±sqrt(6 / (fan_in + fan_out)) with zero
biases; LSTM forget-gate biases start at 1. Each block draws from its own
seeded generator so adding or removing sibling blocks never shifts another
block's initial values.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DegenerateInputError, DimensionError

HEAD_TASKS = ("AU", "EXPR", "VA")
NUM_AUS = 12
NUM_EXPRESSIONS = 8


def _uniform_init(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


class Linear:
    """Affine map x @ weight + bias for row-batched inputs."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator):
        self.d_in = d_in
        self.d_out = d_out
        self.weight = Tensor(_uniform_init(rng, d_in, d_out, (d_in, d_out)), requires_grad=True)
        self.bias = Tensor(np.zeros(d_out), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.add(ad.matmul(x, self.weight), self.bias)

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.weight": self.weight, f"{prefix}.bias": self.bias}


class Encoder:
    """Two-layer MLP mapping raw frame features to d-dim embeddings."""

    def __init__(self, d_in: int, d_hidden: int, d_out: int, alpha: float, rng: np.random.Generator):
        self.alpha = alpha
        self.lin1 = Linear(d_in, d_hidden, rng)
        self.lin2 = Linear(d_hidden, d_out, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.lin2(ad.leaky_relu(self.lin1(x), self.alpha))

    def named_parameters(self, prefix: str = "encoder") -> dict[str, Tensor]:
        out = self.lin1.named_parameters(f"{prefix}.lin1")
        out.update(self.lin2.named_parameters(f"{prefix}.lin2"))
        return out


class FeatureFusion:
    """Blend current-task embeddings with frozen embeddings from other tasks.

    Computes linear2(dropout(act(linear1(f_other + f_current)))). ``f_other``
    never receives gradients: callers pass it as a constant tensor. With
    ``passthrough=True`` the block is hand-set to the identity (identity
    weights, zero bias, slope-1 activation, dropout 0) and its parameters are
    frozen — a diagnostic mode under which the block is an exact no-op.
    """

    def __init__(self, d: int, alpha: float, dropout: float, rng: np.random.Generator,
                 passthrough: bool = False):
        self.d = d
        self.lin1 = Linear(d, d, rng)
        self.lin2 = Linear(d, d, rng)
        self.passthrough = passthrough
        if passthrough:
            self.alpha = 1.0
            self.dropout = 0.0
            for lin in (self.lin1, self.lin2):
                lin.weight = Tensor(np.eye(d), requires_grad=False)
                lin.bias = Tensor(np.zeros(d), requires_grad=False)
        else:
            self.alpha = alpha
            self.dropout = dropout

    def __call__(self, f_current: Tensor, f_other: Tensor | None = None, *,
                 training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        s = f_current if f_other is None else ad.add(f_current, f_other)
        h = ad.leaky_relu(self.lin1(s), self.alpha)
        if training and self.dropout > 0.0:
            keep = rng.random(h.shape) >= self.dropout
            h = ad.mul(h, Tensor(keep / (1.0 - self.dropout)))
        return self.lin2(h)

    def named_parameters(self, prefix: str = "fusion") -> dict[str, Tensor]:
        out = self.lin1.named_parameters(f"{prefix}.lin1")
        out.update(self.lin2.named_parameters(f"{prefix}.lin2"))
        return out


class LSTMLayer:
    """Single LSTM layer with fused gate weights (input, forget, cell, output)."""

    def __init__(self, d_in: int, d_hidden: int, rng: np.random.Generator):
        self.d_in = d_in
        self.d_hidden = d_hidden
        # Fused (d_in, 4h) / (h, 4h) matrices; the init bound uses the
        # per-gate fan (d_in, h), not the fused width.
        self.w_x = Tensor(_uniform_init(rng, d_in, d_hidden, (d_in, 4 * d_hidden)), requires_grad=True)
        self.w_h = Tensor(_uniform_init(rng, d_hidden, d_hidden, (d_hidden, 4 * d_hidden)), requires_grad=True)
        bias = np.zeros(4 * d_hidden)
        bias[d_hidden:2 * d_hidden] = 1.0  # forget gate opens at init
        self.bias = Tensor(bias, requires_grad=True)

    def step(self, x: Tensor, h: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
        d = self.d_hidden
        z = ad.add(ad.add(ad.matmul(x, self.w_x), ad.matmul(h, self.w_h)), self.bias)
        i = ad.sigmoid(ad.narrow(z, 1, 0, d))
        f = ad.sigmoid(ad.narrow(z, 1, d, d))
        g = ad.tanh(ad.narrow(z, 1, 2 * d, d))
        o = ad.sigmoid(ad.narrow(z, 1, 3 * d, d))
        c_new = ad.add(ad.mul(f, c), ad.mul(i, g))
        h_new = ad.mul(o, ad.tanh(c_new))
        return h_new, c_new

    def forward_sequence(self, steps: list[Tensor], batch: int) -> list[Tensor]:
        h = Tensor(np.zeros((batch, self.d_hidden)))
        c = Tensor(np.zeros((batch, self.d_hidden)))
        outs = []
        for x in steps:
            h, c = self.step(x, h, c)
            outs.append(h)
        return outs

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.w_x": self.w_x, f"{prefix}.w_h": self.w_h, f"{prefix}.bias": self.bias}


class TemporalConvergence:
    """Two stacked LSTM layers over (batch, steps, dim), leaky-ReLU output.

    Strictly causal: the output at step t depends only on steps <= t.
    """

    def __init__(self, d: int, alpha: float, rng: np.random.Generator):
        self.alpha = alpha
        self.lstm1 = LSTMLayer(d, d, rng)
        self.lstm2 = LSTMLayer(d, d, rng)

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 3:
            raise DimensionError(f"temporal block expects (batch, steps, dim), got {x.shape}")
        b, s, _ = x.shape
        if s == 0:
            raise DegenerateInputError("temporal block over zero steps")
        steps = [ad.select_step(x, t) for t in range(s)]
        h1 = self.lstm1.forward_sequence(steps, b)
        h2 = self.lstm2.forward_sequence(h1, b)
        return ad.leaky_relu(ad.stack(h2, axis=1), self.alpha)

    def named_parameters(self, prefix: str = "temporal") -> dict[str, Tensor]:
        out = self.lstm1.named_parameters(f"{prefix}.lstm1")
        out.update(self.lstm2.named_parameters(f"{prefix}.lstm2"))
        return out


class TaskHeads:
    """Per-task output heads over shared d-dim features.

    AU: 12 sigmoid units; EXPR: 8-way softmax; VA: 2 tanh-bounded units
    (valence, arousal). One instance hosts all three simultaneously.
    """

    def __init__(self, d: int, rng: np.random.Generator):
        self.au = Linear(d, NUM_AUS, rng)
        self.expr = Linear(d, NUM_EXPRESSIONS, rng)
        self.va = Linear(d, 2, rng)

    def __call__(self, x: Tensor, task: str) -> Tensor:
        if task == "AU":
            return ad.sigmoid(self.au(x))
        if task == "EXPR":
            return ad.softmax(self.expr(x), axis=1)
        if task == "VA":
            return ad.tanh(self.va(x))
        raise DimensionError(f"unknown head task {task!r}")

    def named_parameters(self, prefix: str = "heads") -> dict[str, Tensor]:
        out = self.au.named_parameters(f"{prefix}.au")
        out.update(self.expr.named_parameters(f"{prefix}.expr"))
        out.update(self.va.named_parameters(f"{prefix}.va"))
        return out


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description; stored verbatim in checkpoints."""

    input_dim: int
    feature_dim: int = 16
    encoder_hidden: int = 32
    with_fusion: bool = False
    with_temporal: bool = False
    dropout: float = 0.1
    leaky_alpha: float = 0.01
    fusion_passthrough: bool = False

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "feature_dim": self.feature_dim,
            "encoder_hidden": self.encoder_hidden,
            "with_fusion": self.with_fusion,
            "with_temporal": self.with_temporal,
            "dropout": self.dropout,
            "leaky_alpha": self.leaky_alpha,
            "fusion_passthrough": self.fusion_passthrough,
        }

    @staticmethod
    def from_dict(d: dict) -> "ModelSpec":
        return ModelSpec(**d)


# Fixed per-block salts so each block owns an independent seed stream.
_ENCODER_SALT, _FUSION_SALT, _TEMPORAL_SALT, _HEADS_SALT = 1, 2, 3, 4


def component_rng(seed: int, salt: int) -> np.random.Generator:
    return np.random.default_rng([seed, salt])


class AffectModel:
    """Encoder [+ fusion] [+ temporal] + task heads."""

    def __init__(self, spec: ModelSpec, seed: int):
        self.spec = spec
        self.seed = seed
        d = spec.feature_dim
        self.encoder = Encoder(spec.input_dim, spec.encoder_hidden, d,
                               spec.leaky_alpha, component_rng(seed, _ENCODER_SALT))
        self.fusion = None
        if spec.with_fusion:
            self.fusion = FeatureFusion(d, spec.leaky_alpha, spec.dropout,
                                        component_rng(seed, _FUSION_SALT),
                                        passthrough=spec.fusion_passthrough)
        self.temporal = None
        if spec.with_temporal:
            self.temporal = TemporalConvergence(d, spec.leaky_alpha,
                                                component_rng(seed, _TEMPORAL_SALT))
        self.heads = TaskHeads(d, component_rng(seed, _HEADS_SALT))

    def forward(self, feats: np.ndarray, f_other: np.ndarray | None,
                batch: int, steps: int, head_tasks: tuple[str, ...],
                *, training: bool = False, rng: np.random.Generator | None = None,
                temporal_heads: frozenset[str] = frozenset()) -> dict[str, Tensor]:
        """Run (batch*steps, input_dim) frame features through the model.

        Returns one prediction tensor per requested head task, each shaped
        (batch*steps, head_width). ``temporal_heads`` names the heads that
        read the temporal output instead of the per-frame fused features.
        """
        x = Tensor(np.asarray(feats, dtype=np.float64))
        f = self.encoder(x)
        if self.fusion is not None:
            other = None if f_other is None else Tensor(np.asarray(f_other, dtype=np.float64))
            f = self.fusion(f, other, training=training, rng=rng)
        f_temporal = None
        if self.temporal is not None:
            d = self.spec.feature_dim
            seq = ad.reshape(f, (batch, steps, d))
            f_temporal = ad.reshape(self.temporal(seq), (batch * steps, d))
        preds = {}
        for task in head_tasks:
            use_temporal = f_temporal is not None and task in temporal_heads
            preds[task] = self.heads(f_temporal if use_temporal else f, task)
        return preds

    def encode(self, feats: np.ndarray) -> np.ndarray:
        """Encoder output only (used for feature-bank extraction)."""
        with ad.no_grad():
            return self.encoder(Tensor(np.asarray(feats, dtype=np.float64))).data

    def named_parameters(self) -> dict[str, Tensor]:
        out = self.encoder.named_parameters()
        if self.fusion is not None:
            out.update(self.fusion.named_parameters())
        if self.temporal is not None:
            out.update(self.temporal.named_parameters())
        out.update(self.heads.named_parameters())
        return out

    def trainable_parameters(self) -> dict[str, Tensor]:
        return {n: p for n, p in self.named_parameters().items() if p.requires_grad}

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.named_parameters().items()}

    def load_state(self, state: dict[str, np.ndarray], *, subset: bool = False) -> None:
        """Copy arrays into parameters by name; shapes must match.

        With ``subset=True`` only the names present in ``state`` are loaded
        (e.g. warm-starting just the encoder).
        """
        params = self.named_parameters()
        names = state.keys() if subset else params.keys()
        for name in names:
            if name not in params:
                raise DimensionError(f"checkpoint entry {name!r} not in model")
            if name not in state:
                raise DimensionError(f"model parameter {name!r} missing from state")
            src = np.asarray(state[name], dtype=np.float64)
            if src.shape != params[name].data.shape:
                raise DimensionError(
                    f"shape mismatch for {name!r}: {src.shape} vs {params[name].data.shape}"
                )
            params[name].data = src.copy()


def init_params(spec: ModelSpec, seed: int) -> AffectModel:
    """Build a model with freshly initialized parameters."""
    return AffectModel(spec, seed)
