"""Training loops: toy masked-token pretraining and strategy-aware fine-tuning.

A run is a pure function of its inputs and seed.  The seed is expanded into
four independent named streams (``split``, ``init``, ``masks``, ``batch``)
so that strategies compared at one seed share data order and splits.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import encoder as E
from . import tensor as T
from .checkpoint import Checkpoint
from .data import LabeledExample, corpus_stats
from .errors import CheckpointError, ConfigError, ContractError, DataError
from .metrics import METRIC_NAMES, confusion, report
from .strategies import (
    REINIT_STD,
    LLRDSetup,
    PoolingMode,
    StrategyConfig,
    build_param_groups,
    class_weights_from_counts,
    head_input_dim,
    is_fully_connected_weight,
    pool_states,
    reinit_top_layers,
    weighted_cross_entropy,
)

log = logging.getLogger(__name__)

REFERENCE_LR_GRID = (1e-5, 3e-5, 5e-5)
# The reference learning rates assume a large pretrained encoder; the desk-scale
# model needs a larger step to move in 3 epochs.
DESK_LR = 1e-3
STREAM_TAGS = {"split": 1, "init": 2, "masks": 3, "batch": 4}


def streams(seed: int) -> dict:
    """Independent generators derived from ``seed`` by fixed tags."""
    return {
        name: np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(tag,)))
        for name, tag in STREAM_TAGS.items()
    }


# ---------------------------------------------------------------------------
# data splitting and scheduling


def split_dataset(examples, seed):
    """Stratified 60/20/20 split.

    Per class, validation and test each take round(n/5) examples and train
    keeps the rest, so every split is within one example of its share.
    """
    rng = seed if isinstance(seed, np.random.Generator) else streams(seed)["split"]
    by_class = {}
    for ex in examples:
        by_class.setdefault(ex.label, []).append(ex)
    train, val, test = [], [], []
    for label in sorted(by_class):
        items = by_class[label]
        if len(items) < 5:
            raise DataError(f"class {label} has {len(items)} examples; at least 5 are needed to split")
        order = rng.permutation(len(items))
        n = len(items)
        n_val = n_test = (2 * n + 5) // 10
        n_train = n - n_val - n_test
        shuffled = [items[i] for i in order]
        train += shuffled[:n_train]
        val += shuffled[n_train : n_train + n_val]
        test += shuffled[n_train + n_val :]
    return train, val, test


def warmup_steps(total_steps, warmup_frac):
    return math.ceil(warmup_frac * total_steps)


def lr_at_step(step: int, total_steps: int, peak_lr: float, warmup_frac: float = 0.1) -> float:
    """Linear warmup from 0 to ``peak_lr`` over ceil(frac * total) steps,
    then linear decay to 0 at ``total_steps``."""
    if not 0 <= step <= total_steps:
        raise ContractError(f"step {step} outside [0, {total_steps}]")
    w = warmup_steps(total_steps, warmup_frac)
    if step < w:
        return peak_lr * (step / w)
    if total_steps == w:
        return peak_lr
    return peak_lr * ((total_steps - step) / (total_steps - w))


# ---------------------------------------------------------------------------
# optimiser


def decays(name: str, arr: np.ndarray) -> bool:
    """Weight decay (like mixout) skips biases and layer-norm parameters."""
    return arr.ndim >= 2


class AdamW:
    """Adam with decoupled weight decay, per-parameter learning rates."""

    def __init__(self, params, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads, lrs):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for name, p in params.items():
            g = grads.get(name)
            lr = lrs[name]
            if g is None:
                g = np.zeros_like(p)
            m = self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            v = self.v[name] = b2 * self.v[name] + (1.0 - b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay and decays(name, p):
                update = update + self.weight_decay * p
            params[name] = p - lr * update


# ---------------------------------------------------------------------------
# model plumbing


def encoder_config(ckpt: Checkpoint) -> E.EncoderConfig:
    try:
        return E.EncoderConfig.from_dict(ckpt.meta["encoder"])
    except KeyError:
        raise CheckpointError("checkpoint metadata carries no encoder config") from None


def vocabulary(ckpt: Checkpoint) -> E.Vocabulary:
    try:
        tokens = ckpt.meta["vocab"]
    except KeyError:
        raise CheckpointError("checkpoint metadata carries no vocabulary") from None
    vocab = E.Vocabulary(tokens[len(E.SPECIAL_TOKENS) :])
    if vocab.tokens != tokens:
        raise CheckpointError("checkpoint vocabulary does not start with the reserved specials")
    if "vocab_hash" in ckpt.meta and ckpt.meta["vocab_hash"] != vocab.digest():
        raise CheckpointError("checkpoint vocabulary hash mismatch")
    return vocab


def forward_logits(params, cfg, ids, mask, pooling=PoolingMode.FINAL, reg=E.EVAL):
    states, pooled = E.encode(ids, mask, params, cfg, reg)
    return E.classify(pool_states(states, pooled, pooling), params, reg)


def predict(params, cfg, ids, mask, pooling=PoolingMode.FINAL, batch_size=128):
    out = []
    for i in range(0, len(ids), batch_size):
        logits = forward_logits(params, cfg, ids[i : i + batch_size], mask[i : i + batch_size], pooling)
        out.append(logits.data.argmax(axis=-1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def evaluate(params, cfg, batch, num_classes, pooling=PoolingMode.FINAL, positive_class=1):
    ids, mask, labels = batch
    cm = confusion(labels, predict(params, cfg, ids, mask, pooling), num_classes)
    return cm, report(cm, positive_class)


def _encode_split(examples, vocab, max_len):
    ids, mask = E.tokenize_batch([e.text for e in examples], vocab, max_len)
    return ids, mask, np.array([e.label for e in examples], dtype=np.int64)


def _as_tensors(params):
    return {k: T.Tensor(v, requires_grad=True) for k, v in params.items()}


# ---------------------------------------------------------------------------
# pretraining


@dataclass(frozen=True)
class PretrainConfig:
    steps: int = 400
    batch_size: int = 16
    lr: float = 2e-3
    mask_prob: float = 0.15
    warmup_frac: float = 0.1
    weight_decay: float = 0.01


def mask_tokens(ids, mask, prob, rng):
    """Choose masked-prediction positions among real (non-special) tokens.

    Returns ``(masked_ids, flat_positions, original_ids)``; at least one
    position is chosen whenever the batch has any real token.
    """
    eligible = (mask > 0) & (ids > E.MASK)
    chosen = eligible & (rng.random(ids.shape) < prob)
    if not chosen.any() and eligible.any():
        cand = np.flatnonzero(eligible)
        chosen.reshape(-1)[cand[rng.integers(len(cand))]] = True
    flat = np.flatnonzero(chosen)
    masked = ids.copy()
    masked[chosen] = E.MASK
    return masked, flat, ids.reshape(-1)[flat]


def _mlm_loss(params, cfg, ids, mask, positions, targets, reg):
    states, _ = E.encode(ids, mask, params, cfg, reg)
    last = states[-1]
    rows = T.embedding(T.reshape(last, (-1, cfg.hidden)), positions)
    logits = E.mlm_logits(rows, params, cfg)
    return weighted_cross_entropy(logits, targets, reduction="mean"), logits


def pretrain_toy(texts, vocab: E.Vocabulary, cfg: E.EncoderConfig, config=PretrainConfig(), seed=0) -> Checkpoint:
    """Masked-token pretraining of a fresh encoder on ``texts``."""
    texts = [t.text if isinstance(t, LabeledExample) else t for t in texts]
    if not texts:
        raise DataError("pretraining corpus is empty")
    if cfg.vocab_size != len(vocab):
        raise ConfigError(f"encoder vocab_size {cfg.vocab_size} != vocabulary size {len(vocab)}")
    rs = streams(seed)
    params = E.init_encoder_params(cfg, rs["init"])
    ids_all, mask_all = E.tokenize_batch(texts, vocab, cfg.max_seq_len)
    opt = AdamW(params, weight_decay=config.weight_decay)
    reg = E.Regularizers(rng=rs["masks"], dropout_p=cfg.dropout_p)
    order = np.zeros(0, dtype=np.int64)
    for step in range(config.steps):
        if len(order) < config.batch_size:
            order = np.concatenate([order, rs["batch"].permutation(len(texts))])
        idx, order = order[: config.batch_size], order[config.batch_size :]
        ids, mask = ids_all[idx], mask_all[idx]
        masked, pos, targets = mask_tokens(ids, mask, config.mask_prob, rs["masks"])
        if pos.size == 0:
            continue
        tensors = _as_tensors(params)
        with T.Tape() as tape:
            loss, _ = _mlm_loss(tensors, cfg, masked, mask, pos, targets, reg)
        grads = T.backward(loss, tape, wrt=tensors)
        lr = lr_at_step(step, config.steps, config.lr, config.warmup_frac)
        opt.step(params, grads, {k: lr for k in params})
        if step % 100 == 0:
            log.debug("pretrain step %d loss %.4f", step, loss.item())
    meta = {
        "kind": "pretrained",
        "encoder": cfg.to_dict(),
        "vocab": vocab.tokens,
        "vocab_hash": vocab.digest(),
        "seed": int(seed),
        "pretrain_steps": int(config.steps),
    }
    return Checkpoint(params, meta)


def mlm_accuracy(ckpt: Checkpoint, texts, mask_prob=0.15, seed=0, batch_size=64) -> float:
    """Masked-token prediction accuracy of a checkpoint on held-out text."""
    cfg, vocab = encoder_config(ckpt), vocabulary(ckpt)
    rng = np.random.default_rng(seed)
    ids_all, mask_all = E.tokenize_batch(list(texts), vocab, cfg.max_seq_len)
    hits = total = 0
    for i in range(0, len(ids_all), batch_size):
        ids, mask = ids_all[i : i + batch_size], mask_all[i : i + batch_size]
        masked, pos, targets = mask_tokens(ids, mask, mask_prob, rng)
        if pos.size == 0:
            continue
        _, logits = _mlm_loss(ckpt.tensors, cfg, masked, mask, pos, targets, E.EVAL)
        hits += int((logits.data.argmax(axis=-1) == targets).sum())
        total += pos.size
    return hits / total if total else 0.0


# ---------------------------------------------------------------------------
# fine-tuning


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = DESK_LR
    epochs: int = 3
    batch_size: int = 8
    warmup_frac: float = 0.1
    seed: int = 0
    strategy: StrategyConfig = field(default_factory=StrategyConfig)
    weight_decay: float = 0.01
    # None keeps the encoder's configured dropout rate
    dropout_p: float | None = None
    reinit_std: float = REINIT_STD
    loss_reduction: str = "weighted_mean"
    positive_class: int = 1

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {self.base_lr}")
        if self.epochs < 0 or self.batch_size <= 0:
            raise ConfigError("epochs must be >= 0 and batch_size > 0")
        if not 0.0 <= self.warmup_frac < 1.0:
            raise ConfigError(f"warmup_frac must lie in [0, 1), got {self.warmup_frac}")
        if self.dropout_p is not None and not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout_p}")


@dataclass
class FinetuneResult:
    checkpoint: Checkpoint
    history: list
    test: dict
    groups: list
    initial: Checkpoint
    test_confusion: np.ndarray = None

    def __iter__(self):
        # unpacks as (checkpoint, history)
        return iter((self.checkpoint, self.history))


def _metric_row(epoch, split, rep):
    row = {"epoch": epoch, "split": split}
    row.update(rep.as_dict())
    return row


def _check_pretrained(ckpt, cfg):
    expected = E.encoder_shapes(cfg)
    for name, shape in expected.items():
        if name not in ckpt.tensors:
            raise CheckpointError(f"pretrained checkpoint lacks {name!r}")
        if ckpt.tensors[name].shape != tuple(shape):
            raise CheckpointError(f"{name!r} has dims {list(ckpt.tensors[name].shape)}, config expects {list(shape)}")


def finetune(pretrained: Checkpoint, dataset, config: TrainConfig, num_classes: int | None = None) -> FinetuneResult:
    """Fine-tune ``pretrained`` on ``dataset`` with ``config.strategy``.

    ``dataset`` is a list of labelled examples (split 60/20/20 with the
    seed's split stream) or an explicit ``(train, val, test)`` triple.
    Order of operations: re-initialise top layers, initialise the head,
    snapshot the result as the mixout target, build learning-rate groups,
    train.  The returned checkpoint is the last epoch's.
    """
    cfg = encoder_config(pretrained)
    strategy = config.strategy.validate(cfg.num_layers)
    _check_pretrained(pretrained, cfg)
    vocab = vocabulary(pretrained)
    rs = streams(config.seed)

    if isinstance(dataset, tuple) and len(dataset) == 3:
        train, val, test = (list(s) for s in dataset)
    else:
        train, val, test = split_dataset(list(dataset), rs["split"])
    if not train:
        raise DataError("training split is empty")
    if num_classes is None:
        num_classes = max(e.label for e in (*train, *val, *test)) + 1

    weights = strategy.class_weights
    if weights == "auto":
        weights = tuple(class_weights_from_counts(corpus_stats(train, num_classes).counts))
    if weights is not None and len(weights) != num_classes:
        raise ConfigError(f"{len(weights)} class weights given for {num_classes} classes")

    base = reinit_top_layers(
        Checkpoint({k: pretrained.tensors[k] for k in E.encoder_shapes(cfg)}),
        strategy.reinit_n,
        config.reinit_std,
        rs["init"],
    )
    params = dict(base.tensors)
    params.update(E.init_head_params(head_input_dim(cfg.hidden, strategy.pooling), num_classes, rs["init"]))
    meta = {
        "kind": "finetuned",
        "encoder": cfg.to_dict(),
        "vocab": vocab.tokens,
        "vocab_hash": vocab.digest(),
        "seed": int(config.seed),
        "num_classes": int(num_classes),
        "strategy": {
            "llrd": strategy.llrd.value,
            "mixout_p": strategy.mixout_p,
            "reinit_n": strategy.reinit_n,
            "pooling": strategy.pooling.value,
            "class_weights": list(weights) if weights is not None else None,
        },
    }
    initial = Checkpoint({k: v.copy() for k, v in params.items()}, meta)
    mix_p = strategy.mixout_p or 0.0
    targets = {k: v.copy() for k, v in params.items() if is_fully_connected_weight(k)} if mix_p else None

    groups = build_param_groups(list(params), cfg.num_layers, strategy.llrd, config.base_lr)
    group_lr = {n: g.lr for g in groups for n in g.param_names}

    max_len = cfg.max_seq_len
    tr = _encode_split(train, vocab, max_len)
    va = _encode_split(val, vocab, max_len)
    te = _encode_split(test, vocab, max_len)

    steps_per_epoch = math.ceil(len(train) / config.batch_size)
    total = config.epochs * steps_per_epoch
    opt = AdamW(params, weight_decay=config.weight_decay)
    dropout_p = cfg.dropout_p if config.dropout_p is None else config.dropout_p
    reg = E.Regularizers(rng=rs["masks"], dropout_p=dropout_p, mixout_p=mix_p, mixout_targets=targets)

    history = []
    step = 0
    for epoch in range(1, config.epochs + 1):
        order = np.random.default_rng(rs["batch"].integers(2**63)).permutation(len(train))
        for b in range(steps_per_epoch):
            idx = order[b * config.batch_size : (b + 1) * config.batch_size]
            tensors = _as_tensors(params)
            with T.Tape() as tape:
                logits = forward_logits(tensors, cfg, tr[0][idx], tr[1][idx], strategy.pooling, reg)
                loss = weighted_cross_entropy(logits, tr[2][idx], weights, config.loss_reduction)
            grads = T.backward(loss, tape, wrt=tensors)
            scale = lr_at_step(step, total, 1.0, config.warmup_frac)
            opt.step(params, grads, {k: group_lr[k] * scale for k in params})
            step += 1
        if len(val):
            _, rep = evaluate(params, cfg, va, num_classes, strategy.pooling, config.positive_class)
            history.append(_metric_row(epoch, "val", rep))

    cm, rep = evaluate(params, cfg, te, num_classes, strategy.pooling, config.positive_class)
    test_row = _metric_row(config.epochs, "test", rep)
    return FinetuneResult(Checkpoint(params, meta), history, test_row, groups, initial, cm)


# ---------------------------------------------------------------------------
# variance across seeds


def sample_std(values):
    """Two-pass sample standard deviation (ddof=1)."""
    values = [float(v) for v in values]
    n = len(values)
    mean = sum(values) / n
    return math.sqrt(sum((v - mean) ** 2 for v in values) / (n - 1))


@dataclass
class VarianceReport:
    seeds: list
    runs: list
    mean: dict
    std: dict


def _run_seed(args):
    pretrained, dataset, config, num_classes = args
    return finetune(pretrained, dataset, config, num_classes).test


def variance_study(pretrained, dataset, config: TrainConfig, seeds, num_classes=None, jobs=1) -> VarianceReport:
    """Fine-tune once per seed and aggregate the final test metrics."""
    seeds = list(seeds)
    if len(seeds) < 2:
        raise ContractError("a variance study needs at least 2 seeds")
    tasks = [(pretrained, dataset, replace(config, seed=s), num_classes) for s in seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            runs = list(pool.map(_run_seed, tasks))
    else:
        runs = [_run_seed(t) for t in tasks]
    mean = {k: sum(r[k] for r in runs) / len(runs) for k in METRIC_NAMES}
    std = {k: sample_std([r[k] for r in runs]) for k in METRIC_NAMES}
    return VarianceReport(seeds, runs, mean, std)
