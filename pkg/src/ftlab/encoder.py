"""Small pre-norm transformer encoder, whitespace tokenizer and MLP head.

Parameters live in a flat ``{name: array}`` dict.  Names follow a fixed
hierarchy that the learning-rate grouping relies on:

    embed.tok, embed.pos, embed.norm.{gain,bias}
    layer.<i>.norm1.{gain,bias}, layer.<i>.attn.{q,k,v,o}.{weight,bias}
    layer.<i>.norm2.{gain,bias}, layer.<i>.ff.{in,out}.{weight,bias}
    pooler.norm.{gain,bias}, pooler.dense.{weight,bias}
    head.fc1.{weight,bias}, head.fc2.{weight,bias}, head.out.{weight,bias}

Weight matrices are stored ``[in, out]`` and applied as ``x @ W + b``.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass
from typing import Mapping

import numpy as np

from . import tensor as T
from .errors import CheckpointError, ConfigError, ContractError, ShapeError

PAD, UNK, BOS, EOS, MASK = 0, 1, 2, 3, 4
SPECIAL_TOKENS = ("<pad>", "<unk>", "<s>", "</s>", "<mask>")
HEAD_HIDDEN = (100, 100)
INIT_STD = 0.02
# additive attention bias for padded keys; exp() of it underflows to exactly 0
_MASK_BIAS = -1e9


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    num_layers: int = 4
    hidden: int = 32
    heads: int = 4
    ff_dim: int | None = None
    max_seq_len: int = 32
    dropout_p: float = 0.1
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.ff_dim is None:
            object.__setattr__(self, "ff_dim", 4 * self.hidden)
        for field in ("vocab_size", "num_layers", "hidden", "heads", "ff_dim", "max_seq_len"):
            if int(getattr(self, field)) <= 0:
                raise ConfigError(f"{field} must be positive, got {getattr(self, field)}")
        if self.hidden % self.heads:
            raise ConfigError(f"hidden size {self.hidden} is not divisible by {self.heads} heads")
        if self.max_seq_len < 3:
            raise ConfigError("max_seq_len must leave room for the start and end tokens")
        if self.vocab_size <= MASK:
            raise ConfigError("vocab_size must exceed the number of reserved specials")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"dropout_p must lie in [0, 1), got {self.dropout_p}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class Vocabulary:
    """Token <-> id map with the five reserved specials at ids 0..4."""

    def __init__(self, words=()):
        self.tokens = list(SPECIAL_TOKENS)
        self.index = {tok: i for i, tok in enumerate(self.tokens)}
        for w in words:
            w = w.lower()
            if w in self.index or w in SPECIAL_TOKENS:
                continue
            self.index[w] = len(self.tokens)
            self.tokens.append(w)

    @classmethod
    def from_texts(cls, texts):
        words = sorted({w for text in texts for w in text.lower().split()})
        return cls(words)

    def __len__(self):
        return len(self.tokens)

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def id_of(self, word):
        # corpus text can never produce a special id, even if it spells one
        i = self.index.get(word, UNK)
        return UNK if i <= MASK else i

    def digest(self):
        return hashlib.sha256("\n".join(self.tokens).encode("utf-8")).hexdigest()


def tokenize(text: str, vocab: Vocabulary, max_len: int):
    """Lowercase whitespace tokenization to ``(ids, mask)`` of length ``max_len``.

    Layout is ``<s> tokens </s> <pad>...``; overlong input is truncated so the
    end token always survives.
    """
    if max_len < 2:
        raise ContractError(f"max_len must be at least 2, got {max_len}")
    words = text.lower().split()[: max_len - 2]
    ids = np.full(max_len, PAD, dtype=np.int64)
    ids[0] = BOS
    ids[1 : 1 + len(words)] = [vocab.id_of(w) for w in words]
    ids[1 + len(words)] = EOS
    mask = (ids != PAD).astype(np.int64)
    return ids, mask


def tokenize_batch(texts, vocab, max_len):
    pairs = [tokenize(t, vocab, max_len) for t in texts]
    return np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs])


# ---------------------------------------------------------------------------
# parameters


def _layer_shapes(cfg: EncoderConfig):
    h, f = cfg.hidden, cfg.ff_dim
    shapes = {"norm1.gain": (h,), "norm1.bias": (h,)}
    for proj in "qkvo":
        shapes[f"attn.{proj}.weight"] = (h, h)
        # a key bias shifts every score of a query equally, which softmax
        # cancels; it would be a parameter with identically zero gradient
        if proj != "k":
            shapes[f"attn.{proj}.bias"] = (h,)
    shapes.update({
        "norm2.gain": (h,), "norm2.bias": (h,),
        "ff.in.weight": (h, f), "ff.in.bias": (f,),
        "ff.out.weight": (f, h), "ff.out.bias": (h,),
    })
    return shapes


def encoder_shapes(cfg: EncoderConfig):
    h = cfg.hidden
    shapes = {
        "embed.tok": (cfg.vocab_size, h),
        "embed.pos": (cfg.max_seq_len, h),
        "embed.norm.gain": (h,),
        "embed.norm.bias": (h,),
    }
    for i in range(cfg.num_layers):
        for name, shape in _layer_shapes(cfg).items():
            shapes[f"layer.{i}.{name}"] = shape
    shapes.update({
        "pooler.norm.gain": (h,), "pooler.norm.bias": (h,),
        "pooler.dense.weight": (h, h), "pooler.dense.bias": (h,),
    })
    return shapes


def head_shapes(in_dim: int, num_classes: int):
    if num_classes < 2:
        raise ConfigError(f"classification head needs at least 2 classes, got {num_classes}")
    h1, h2 = HEAD_HIDDEN
    return {
        "head.fc1.weight": (in_dim, h1), "head.fc1.bias": (h1,),
        "head.fc2.weight": (h1, h2), "head.fc2.bias": (h2,),
        "head.out.weight": (h2, num_classes), "head.out.bias": (num_classes,),
    }


def init_tensor(name: str, shape, rng, std=INIT_STD):
    """Gains start at 1, biases at 0, everything else at Normal(0, std^2)."""
    if name.endswith(".gain"):
        return np.ones(shape)
    if name.endswith(".bias"):
        return np.zeros(shape)
    return rng.normal(0.0, std, size=shape)


def init_encoder_params(cfg: EncoderConfig, rng: np.random.Generator):
    return {name: init_tensor(name, shape, rng) for name, shape in encoder_shapes(cfg).items()}


def init_head_params(in_dim: int, num_classes: int, rng: np.random.Generator):
    # fan-in scaling keeps the tanh units out of their flat region at start
    return {
        name: init_tensor(name, shape, rng, std=1.0 / math.sqrt(shape[0]))
        for name, shape in head_shapes(in_dim, num_classes).items()
    }


def param_count(cfg: EncoderConfig, head_in: int | None = None, num_classes: int | None = None):
    """Closed-form parameter count (head included when its sizes are given)."""
    v, t, h, f, n = cfg.vocab_size, cfg.max_seq_len, cfg.hidden, cfg.ff_dim, cfg.num_layers
    per_layer = 4 * h * h + 3 * h + 2 * h * f + f + h + 4 * h
    total = v * h + t * h + 2 * h + n * per_layer + 2 * h + h * h + h
    if num_classes is not None:
        h1, h2 = HEAD_HIDDEN
        d = h if head_in is None else head_in
        total += d * h1 + h1 + h1 * h2 + h2 + h2 * num_classes + num_classes
    return total


def _get(params: Mapping, name: str):
    try:
        p = params[name]
    except KeyError:
        raise CheckpointError(f"parameter {name!r} is missing") from None
    return p if isinstance(p, T.Tensor) else T.Tensor(p)


# ---------------------------------------------------------------------------
# forward


@dataclass
class Regularizers:
    """Stochastic train-time settings threaded through the forward pass.

    ``mixout_targets`` maps weight names to their frozen target arrays;
    only names present there are mixed.  ``rng`` is None in eval mode.
    """

    rng: np.random.Generator | None = None
    dropout_p: float = 0.0
    mixout_p: float = 0.0
    mixout_targets: Mapping | None = None

    def weight(self, params, name):
        w = _get(params, name)
        if self.rng is None or not self.mixout_p or not self.mixout_targets:
            return w
        target = self.mixout_targets.get(name)
        if target is None:
            return w
        return T.mixout(w, target, self.mixout_p, self.rng)

    def drop(self, x):
        return T.dropout(x, self.dropout_p, self.rng)


EVAL = Regularizers()


def _attention(x, mask_bias, params, prefix, cfg, reg):
    b, t, h = x.shape
    a = cfg.heads
    d = h // a

    def heads(name):
        bias = None if name == "k" else _get(params, f"{prefix}.{name}.bias")
        y = T.linear(x, _get(params, f"{prefix}.{name}.weight"), bias)
        return T.transpose(T.reshape(y, (b, t, a, d)), (0, 2, 1, 3))

    q, k, v = heads("q"), heads("k"), heads("v")
    scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(d))
    probs = T.softmax(T.add_constant(scores, mask_bias), axis=-1)
    ctx = T.reshape(T.transpose(T.matmul(probs, v), (0, 2, 1, 3)), (b, t, h))
    return T.linear(ctx, _get(params, f"{prefix}.o.weight"), _get(params, f"{prefix}.o.bias"))


def _block(x, mask_bias, params, i, cfg, reg):
    p = f"layer.{i}"
    y = T.layer_norm(x, _get(params, f"{p}.norm1.gain"), _get(params, f"{p}.norm1.bias"), cfg.ln_eps)
    x = T.add(x, reg.drop(_attention(y, mask_bias, params, f"{p}.attn", cfg, reg)))
    y = T.layer_norm(x, _get(params, f"{p}.norm2.gain"), _get(params, f"{p}.norm2.bias"), cfg.ln_eps)
    y = T.gelu(T.linear(y, reg.weight(params, f"{p}.ff.in.weight"), _get(params, f"{p}.ff.in.bias")))
    y = T.linear(y, reg.weight(params, f"{p}.ff.out.weight"), _get(params, f"{p}.ff.out.bias"))
    return T.add(x, reg.drop(y))


def final_norm(state, params, cfg):
    return T.layer_norm(state, _get(params, "pooler.norm.gain"), _get(params, "pooler.norm.bias"), cfg.ln_eps)


def encode(ids, mask, params: Mapping, cfg: EncoderConfig, reg: Regularizers = EVAL):
    """Run the encoder.

    ``ids``/``mask`` are ``[T]`` or ``[B, T]``.  Returns ``(states, pooled)``
    where ``states`` holds ``num_layers + 1`` tensors (index 0 is the
    embedding output) shaped ``[T, H]`` or ``[B, T, H]``, and ``pooled`` is
    tanh(dense(norm(final state at the start token))).
    """
    ids = np.asarray(ids, dtype=np.int64)
    mask = np.asarray(mask)
    single = ids.ndim == 1
    if single:
        ids, mask = ids[None, :], mask[None, :]
    b, t = ids.shape
    if t > cfg.max_seq_len:
        raise ShapeError(f"sequence length {t} exceeds max_seq_len {cfg.max_seq_len}")
    if mask.shape != ids.shape:
        raise ShapeError(f"mask dims {list(mask.shape)} differ from ids dims {list(ids.shape)}")

    pos = _get(params, "embed.pos")
    x = T.embedding(_get(params, "embed.tok"), ids)
    x = T.add(x, T.embedding(pos, np.broadcast_to(np.arange(t), (b, t))))
    x = T.layer_norm(x, _get(params, "embed.norm.gain"), _get(params, "embed.norm.bias"), cfg.ln_eps)
    x = reg.drop(x)
    mask_bias = np.where(mask[:, None, None, :] > 0, 0.0, _MASK_BIAS)

    states = [x]
    for i in range(cfg.num_layers):
        x = _block(x, mask_bias, params, i, cfg, reg)
        states.append(x)

    cls = T.take(final_norm(x, params, cfg), 0, axis=1)
    pooled = T.tanh(T.linear(cls, _get(params, "pooler.dense.weight"), _get(params, "pooler.dense.bias")))
    if single:
        states = [T.reshape(s, s.shape[1:]) for s in states]
        pooled = T.reshape(pooled, pooled.shape[1:])
    return states, pooled


def classify(features: T.Tensor, params: Mapping, reg: Regularizers = EVAL):
    """Two tanh hidden layers of 100 units, then a linear map to class logits.

    ``features`` is ``[D]`` or ``[B, D]``.
    """
    w1 = reg.weight(params, "head.fc1.weight")
    if features.shape[-1] != w1.shape[0]:
        raise ShapeError(f"head expects {w1.shape[0]} input features, got {features.shape[-1]}")
    single = features.ndim == 1
    x = T.reshape(features, (1, -1)) if single else features
    x = reg.drop(x)
    x = T.tanh(T.linear(x, w1, _get(params, "head.fc1.bias")))
    x = reg.drop(x)
    x = T.tanh(T.linear(x, reg.weight(params, "head.fc2.weight"), _get(params, "head.fc2.bias")))
    x = reg.drop(x)
    logits = T.linear(x, _get(params, "head.out.weight"), _get(params, "head.out.bias"))
    return T.reshape(logits, logits.shape[1:]) if single else logits


def mlm_logits(state: T.Tensor, params: Mapping, cfg: EncoderConfig):
    """Masked-token logits over the vocabulary, decoder tied to ``embed.tok``."""
    y = final_norm(state, params, cfg)
    return T.matmul(y, T.transpose(_get(params, "embed.tok"), (1, 0)))
