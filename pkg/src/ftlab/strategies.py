"""Fine-tuning strategies: grouped learning rates, mixout, top-layer
re-initialisation, intermediate-layer pooling and class-weighted loss."""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint
from .errors import ConfigError, ContractError, DataError

# Group multipliers for the four-group setup: lower third, middle third,
# upper third of the encoder, then the classification head.
FOUR_GROUP_MULTIPLIERS = (1 / 2.6, 1.0, 2.6, 10.0)
HEAD_MULTIPLIER = 10.0
REINIT_STD = 0.02

_LAYER_RE = re.compile(r"^layer\.(\d+)\.")


class LLRDSetup(str, enum.Enum):
    UNIFORM = "uniform"
    TWO_GROUP = "2group"
    FOUR_GROUP = "4group"


class PoolingMode(str, enum.Enum):
    FINAL = "final"
    AVG_LAST4 = "avg4"
    CONCAT_LAST4 = "concat4"


@dataclass(frozen=True)
class ParamGroup:
    name: str
    param_names: frozenset
    lr_multiplier: float
    lr: float


@dataclass(frozen=True)
class MixoutConfig:
    p: float
    target: Mapping[str, np.ndarray]

    def __post_init__(self):
        if not 0.0 <= self.p < 1.0:
            raise ConfigError(f"mixout probability must lie in [0, 1), got {self.p}")


@dataclass(frozen=True)
class StrategyConfig:
    llrd: LLRDSetup = LLRDSetup.UNIFORM
    mixout_p: float | None = None
    reinit_n: int = 0
    pooling: PoolingMode = PoolingMode.FINAL
    # explicit per-class weights, or "auto" for inverse training-split frequency
    class_weights: tuple | str | None = None

    def __post_init__(self):
        object.__setattr__(self, "llrd", LLRDSetup(self.llrd))
        object.__setattr__(self, "pooling", PoolingMode(self.pooling))
        if self.class_weights is not None and self.class_weights != "auto":
            object.__setattr__(self, "class_weights", tuple(float(w) for w in self.class_weights))

    def validate(self, num_layers: int | None = None):
        if self.mixout_p is not None and not 0.0 <= self.mixout_p < 1.0:
            raise ConfigError(f"mixout probability must lie in [0, 1), got {self.mixout_p}")
        if self.reinit_n < 0:
            raise ConfigError(f"re-init depth must be non-negative, got {self.reinit_n}")
        if self.pooling is not PoolingMode.FINAL and self.reinit_n > 0:
            raise ConfigError(
                f"pooling mode {self.pooling.value!r} cannot be combined with re-initialising "
                f"{self.reinit_n} layer(s): intermediate-layer pooling is only run on "
                "encoders whose layers were not re-initialised"
            )
        if self.class_weights not in (None, "auto") and any(w <= 0 for w in self.class_weights):
            raise ConfigError("class weights must be positive")
        if num_layers is not None:
            if self.reinit_n > num_layers:
                raise ConfigError(f"cannot re-initialise {self.reinit_n} of {num_layers} layers")
            if self.pooling is not PoolingMode.FINAL and num_layers < 4:
                raise ConfigError(f"pooling {self.pooling.value!r} needs at least 4 layers")
        return self

    def label(self):
        """Row label in the style of the results tables."""
        parts = ["Encoder"]
        if self.llrd is LLRDSetup.UNIFORM:
            parts[0] += " Baseline"
        else:
            parts.append("LLRD(2-Groups)" if self.llrd is LLRDSetup.TWO_GROUP else "LLRD(4-Groups)")
        if self.reinit_n:
            parts.append(f"Re-init({self.reinit_n})")
        if self.pooling is PoolingMode.AVG_LAST4:
            parts.append("Avg Last 4 Layers")
        elif self.pooling is PoolingMode.CONCAT_LAST4:
            parts.append("Concat Last 4 Layers")
        if self.mixout_p:
            parts.append(f"Mixout({self.mixout_p:g})")
        if self.class_weights is not None:
            parts.append("Weighted CE")
        return " + ".join(parts)


# ---------------------------------------------------------------------------
# learning-rate groups


def _split_thirds(num_layers):
    """Layer counts for three contiguous groups, earlier ones never larger."""
    base, rem = divmod(num_layers, 3)
    sizes = [base + (1 if i >= 3 - rem else 0) for i in range(3)]
    bounds, start = [], 0
    for s in sizes:
        bounds.append(range(start, start + s))
        start += s
    return bounds


def _section(name):
    m = _LAYER_RE.match(name)
    if m:
        return "layer", int(m.group(1))
    head = name.split(".", 1)[0]
    if head in ("embed", "pooler", "head") and "." in name:
        return head, None
    raise ContractError(f"parameter name {name!r} does not follow the embed/layer/pooler/head scheme")


def build_param_groups(param_names: Sequence[str], num_layers: int, setup, base_lr: float):
    """Partition parameter names into learning-rate groups.

    uniform: one group at ``base_lr``.  2group: encoder at ``base_lr``, head at
    10x.  4group: embeddings plus the lowest third of layers at lr/2.6, the
    middle third at lr, the top third at lr*2.6 and the head at lr*10.  The
    pooler sits with the top third.
    """
    setup = LLRDSetup(setup)
    if base_lr <= 0:
        raise ContractError(f"base learning rate must be positive, got {base_lr}")
    sections = {name: _section(name) for name in param_names}
    for name, (kind, idx) in sections.items():
        if kind == "layer" and idx >= num_layers:
            raise ContractError(f"{name!r} refers to layer {idx} but the encoder has {num_layers}")

    if setup is LLRDSetup.UNIFORM:
        spec = [("all", 1.0, lambda k, i: True)]
    elif setup is LLRDSetup.TWO_GROUP:
        spec = [
            ("encoder", 1.0, lambda k, i: k != "head"),
            ("head", HEAD_MULTIPLIER, lambda k, i: k == "head"),
        ]
    else:
        low, mid, top = _split_thirds(num_layers)
        m1, m2, m3, m4 = FOUR_GROUP_MULTIPLIERS
        spec = [
            ("group1", m1, lambda k, i: k == "embed" or (k == "layer" and i in low)),
            ("group2", m2, lambda k, i: k == "layer" and i in mid),
            ("group3", m3, lambda k, i: k == "pooler" or (k == "layer" and i in top)),
            ("head", m4, lambda k, i: k == "head"),
        ]
    groups = []
    for gname, mult, member in spec:
        names = frozenset(n for n, (k, i) in sections.items() if member(k, i))
        groups.append(ParamGroup(gname, names, mult, base_lr * mult))
    return groups


# ---------------------------------------------------------------------------
# mixout


def is_fully_connected_weight(name: str) -> bool:
    """Weights that mixout (and its dropout counterpart) act on: the encoder
    feed-forward matrices and the head's hidden layers."""
    return name.endswith((".ff.in.weight", ".ff.out.weight")) or name in (
        "head.fc1.weight",
        "head.fc2.weight",
    )


def mixout_transform(w, w_pre, p: float, rng: np.random.Generator | None) -> T.Tensor:
    """Effective weight under mixout; ``rng=None`` means eval mode."""
    return T.mixout(T.as_tensor(w), w_pre, p, rng)


# ---------------------------------------------------------------------------
# re-initialisation


def reinit_top_layers(ckpt: Checkpoint, n: int, sigma: float = REINIT_STD, rng=None) -> Checkpoint:
    """Reset the top ``n`` encoder layers: weights to Normal(0, sigma^2),
    biases to 0, layer-norm gains to 1.  Everything else is copied as is."""
    num_layers = ckpt.num_layers()
    if not 0 <= n <= num_layers:
        raise ContractError(f"cannot re-initialise {n} layers of a {num_layers}-layer encoder")
    if n == 0:
        return ckpt.copy()
    rng = rng if rng is not None else np.random.default_rng()
    targets = set(range(num_layers - n, num_layers))
    out = {}
    for name, arr in ckpt.tensors.items():
        m = _LAYER_RE.match(name)
        if not m or int(m.group(1)) not in targets:
            out[name] = arr.copy()
        elif name.endswith(".bias"):
            out[name] = np.zeros_like(arr)
        elif name.endswith(".gain"):
            out[name] = np.ones_like(arr)
        else:
            out[name] = rng.normal(0.0, sigma, size=arr.shape)
    return Checkpoint(out, dict(ckpt.meta))


# ---------------------------------------------------------------------------
# pooling


def pool_states(states, pooled, mode) -> T.Tensor:
    """Sequence features for the head.

    ``final`` returns the pooler output; ``avg4``/``concat4`` use the
    start-token vectors of the last four layer outputs (concatenated oldest
    first).
    """
    mode = PoolingMode(mode)
    if mode is PoolingMode.FINAL:
        return pooled
    num_layers = len(states) - 1
    if num_layers < 4:
        raise ConfigError(f"pooling {mode.value!r} needs at least 4 layers, encoder has {num_layers}")
    pos_axis = states[-1].ndim - 2
    vecs = [T.take(s, 0, axis=pos_axis) for s in states[-4:]]
    if mode is PoolingMode.CONCAT_LAST4:
        return T.concat(vecs, axis=-1)
    total = vecs[0]
    for v in vecs[1:]:
        total = T.add(total, v)
    return T.scale(total, 0.25)


def head_input_dim(hidden: int, mode) -> int:
    return 4 * hidden if PoolingMode(mode) is PoolingMode.CONCAT_LAST4 else hidden


# ---------------------------------------------------------------------------
# loss


def weighted_cross_entropy(logits: T.Tensor, targets, weights=None, reduction="weighted_mean"):
    """Class-weighted cross-entropy over a ``[B, C]`` batch.

    Per sample the loss is ``-w[y] * log_softmax(x)[y]``.  The batch value is
    the sum divided by the sum of target weights (``"weighted_mean"``), the
    plain mean over samples (``"mean"``) or the plain sum (``"sum"``).
    """
    targets = np.asarray(targets, dtype=np.int64)
    b, c = logits.shape
    if targets.shape != (b,):
        raise DataError(f"expected {b} targets, got {targets.shape[0] if targets.ndim else 0}")
    bad = np.flatnonzero((targets < 0) | (targets >= c))
    if bad.size:
        i = int(bad[0])
        raise DataError(f"target {int(targets[i])} of sample {i} is outside [0, {c})")
    w = np.ones(c) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (c,):
        raise DataError(f"expected {c} class weights, got {w.size}")
    wt = w[targets]
    picked = T.pick(T.log_softmax(logits, axis=-1), targets)
    total = T.scale(T.dot(picked, T.Tensor(wt)), -1.0)
    if reduction == "weighted_mean":
        return T.scale(total, 1.0 / wt.sum())
    if reduction == "mean":
        return T.scale(total, 1.0 / b)
    if reduction == "sum":
        return total
    raise ContractError(f"unknown reduction {reduction!r}")


def class_weights_from_counts(counts) -> np.ndarray:
    """Inverse-frequency weights ``total / (C * count_c)``; they average to 1
    under the empirical class distribution."""
    counts = np.asarray(counts, dtype=np.float64)
    if counts.ndim != 1 or counts.size == 0:
        raise DataError("class counts must be a non-empty 1-d sequence")
    zero = np.flatnonzero(counts <= 0)
    if zero.size:
        raise DataError(f"class {int(zero[0])} has no examples; cannot weight it")
    return counts.sum() / (counts.size * counts)
