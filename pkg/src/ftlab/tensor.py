"""Float64 tensors with tape-based reverse-mode differentiation.

Operations executed while a :class:`Tape` is active are recorded on it when
at least one input requires a gradient.  :func:`backward` then walks the tape
once in reverse order.  Outside a tape everything is a plain numpy forward
pass, which is what evaluation uses.

The op set is deliberately small: it is what a pre-norm encoder, an MLP head
and a cross-entropy loss need.  Elementwise binary ops accept only
same-shape operands or a scalar on one side; bias addition has its own op.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.special import erf

from .errors import ContractError, ShapeError

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)

_active_tapes: list["Tape"] = []


class Tensor:
    """Dense float64 array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "is_leaf", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.array(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.is_leaf = True
        self.name = name

    @property
    def dims(self):
        return list(self.data.shape)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(dims={self.dims}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class TapeNode:
    inputs: tuple
    output: Tensor
    backward: Callable


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; nodes are appended in execution order, which is
    a valid topological order by construction.
    """

    def __init__(self):
        self.nodes: list[TapeNode] = []

    def __enter__(self):
        _active_tapes.append(self)
        return self

    def __exit__(self, *exc):
        _active_tapes.pop()
        return False

    def __len__(self):
        return len(self.nodes)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def record_op(data, inputs, backward) -> Tensor:
    """Wrap ``data`` as the output of an op over ``inputs``.

    ``backward`` maps the output gradient to a tuple with one entry per input
    (``None`` where no gradient flows).  The node is recorded only when a tape
    is active and some input requires a gradient.
    """
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.is_leaf = False
    out.name = None
    out.requires_grad = False
    if _active_tapes and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _active_tapes[-1].nodes.append(TapeNode(tuple(inputs), out, backward))
    return out


def backward(loss: Tensor, tape: Tape, wrt=None):
    """Reverse-mode sweep from a scalar ``loss``.

    Every leaf reached on the tape gets ``.grad`` set to d(loss)/d(leaf).
    If ``wrt`` is given (a mapping of name to tensor, or a sequence), the
    gradients are also returned in the same structure; leaves not connected
    to the loss receive zeros.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got dims {loss.dims}")
    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp.is_leaf:
                leaves[id(inp)] = inp
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    for key, leaf in leaves.items():
        leaf.grad = grads[key]
    if loss.is_leaf and loss.requires_grad:
        loss.grad = np.ones_like(loss.data)

    if wrt is None:
        return None

    def grad_of(t):
        if id(t) in leaves or (t is loss and t.is_leaf):
            return t.grad
        t.grad = np.zeros_like(t.data)
        return t.grad

    if isinstance(wrt, Mapping):
        return {name: grad_of(t) for name, t in wrt.items()}
    return [grad_of(t) for t in wrt]


# ---------------------------------------------------------------------------
# elementwise


def _binary_operands(a, b, opname):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape and a.data.ndim != 0 and b.data.ndim != 0:
        raise ShapeError(f"{opname}: incompatible dims {a.dims} and {b.dims}")
    return a, b


def _reduce_to(g, shape):
    return g if g.shape == shape else np.asarray(g.sum()).reshape(shape)


def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "add")
    sa, sb = a.shape, b.shape
    return record_op(a.data + b.data, (a, b), lambda g: (_reduce_to(g, sa), _reduce_to(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "sub")
    sa, sb = a.shape, b.shape
    return record_op(a.data - b.data, (a, b), lambda g: (_reduce_to(g, sa), _reduce_to(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "mul")
    ad, bd = a.data, b.data
    return record_op(
        ad * bd, (a, b), lambda g: (_reduce_to(g * bd, ad.shape), _reduce_to(g * ad, bd.shape))
    )


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return record_op(x.data * c, (x,), lambda g: (g * c,))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return record_op(y, (x,), lambda g: (g * (1.0 - y * y),))


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _INV_SQRT2))

    def grad(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * xd * xd)
        return (g * (cdf + xd * pdf),)

    return record_op(xd * cdf, (x,), grad)


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul, "tanh": tanh, "gelu": gelu}


def elementwise(op: str, *args) -> Tensor:
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ContractError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """x[..., H] + b[H]."""
    if b.data.ndim != 1 or x.shape[-1:] != b.shape:
        raise ShapeError(f"add_bias: bias dims {b.dims} do not match trailing dim of {x.dims}")
    h = b.shape[0]
    return record_op(x.data + b.data, (x, b), lambda g: (g, g.reshape(-1, h).sum(axis=0)))


def add_constant(x: Tensor, c: np.ndarray) -> Tensor:
    """Add a non-differentiable array that numpy-broadcasts onto ``x``."""
    out = x.data + c
    if out.shape != x.shape:
        raise ShapeError(f"add_constant: constant {np.shape(c)} does not broadcast onto {x.dims}")
    return record_op(out, (x,), lambda g: (g,))


# ---------------------------------------------------------------------------
# linear algebra and shape manipulation


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``a`` may carry leading batch axes; ``b`` is either a plain matrix shared
    across the batch or has the same batch axes as ``a``.
    """
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeError(f"matmul needs at least 2-d operands, got {a.dims} and {b.dims}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(
            f"matmul inner dims differ: {a.dims} (k={ad.shape[-1]}) vs {b.dims} (k={bd.shape[-2]})"
        )
    if bd.ndim > 2 and bd.shape[:-2] != ad.shape[:-2]:
        raise ShapeError(f"matmul batch dims differ: {a.dims} vs {b.dims}")
    shared = bd.ndim == 2

    def grad(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if shared:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return record_op(ad @ bd, (a, b), grad)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add_bias(y, b)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape {x.dims} -> {list(shape)}: {exc}") from None
    return record_op(out, (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return record_op(
        np.ascontiguousarray(np.transpose(x.data, axes)),
        (x,),
        lambda g: (np.transpose(g, inverse),),
    )


def take(x: Tensor, index: int, axis: int) -> Tensor:
    """Select one position along ``axis`` (that axis is dropped)."""
    shape = x.shape
    axis = axis % x.ndim

    def grad(g):
        full = np.zeros(shape)
        sl = [slice(None)] * len(shape)
        sl[axis] = index
        full[tuple(sl)] = g
        return (full,)

    return record_op(np.take(x.data, index, axis=axis), (x,), grad)


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = list(xs)
    sizes = [t.shape[axis] for t in xs]
    try:
        out = np.concatenate([t.data for t in xs], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    splits = np.cumsum(sizes)[:-1]
    return record_op(out, tuple(xs), lambda g: tuple(np.split(g, splits, axis=axis)))


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]``; ``ids`` is an integer array of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding: id out of range for table with {table.shape[0]} rows")
    shape = table.shape

    def grad(g):
        full = np.zeros(shape)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (full,)

    return record_op(table.data[ids], (table,), grad)


def pick(x: Tensor, index: np.ndarray) -> Tensor:
    """Row-wise gather from a 2-d tensor: out[n] = x[n, index[n]]."""
    index = np.asarray(index, dtype=np.int64)
    rows = np.arange(x.shape[0])
    shape = x.shape

    def grad(g):
        full = np.zeros(shape)
        full[rows, index] = g
        return (full,)

    return record_op(x.data[rows, index], (x,), grad)


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return record_op(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_all(x: Tensor) -> Tensor:
    return scale(sum_all(x), 1.0 / x.data.size)


def dot(a: Tensor, b: Tensor) -> Tensor:
    return sum_all(mul(a, b))


# ---------------------------------------------------------------------------
# normalisation


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def grad(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return record_op(s, (x,), grad)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def grad(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return record_op(out, (x,), grad)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    h = x.shape[-1]
    if gain.shape != (h,) or bias.shape != (h,):
        raise ShapeError(f"layer_norm: gain {gain.dims}/bias {bias.dims} vs hidden size {h}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gain.data

    def grad(g):
        dxhat = g * gd
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        g2 = g.reshape(-1, h)
        return dx, (g2 * xhat.reshape(-1, h)).sum(axis=0), g2.sum(axis=0)

    return record_op(xhat * gd + bias.data, (x, gain, bias), grad)


# ---------------------------------------------------------------------------
# stochastic masks


def dropout(x: Tensor, p: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout.  ``p == 0`` or ``rng is None`` is the identity and
    draws nothing from the generator."""
    if p <= 0.0 or rng is None:
        return x
    if p >= 1.0:
        raise ContractError(f"dropout probability must be < 1, got {p}")
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return record_op(x.data * keep, (x,), lambda g: (g * keep,))


def mixout(w: Tensor, w_pre: np.ndarray, p: float, rng: np.random.Generator | None) -> Tensor:
    """Stochastically swap entries of ``w`` for their values in ``w_pre``.

    Each entry keeps its current value with probability ``1 - p``; the
    result is rescaled so that its expectation over masks is ``w``:

        out = w_pre + mask * (w - w_pre) / (1 - p)

    which equals ``(mask*w + (1-mask)*w_pre - p*w_pre) / (1 - p)``.  Gradient
    reaches only kept entries, scaled by ``1 / (1 - p)``.  ``p == 0`` or no
    generator returns ``w`` itself.
    """
    w_pre = np.asarray(w_pre, dtype=np.float64)
    if w_pre.shape != w.shape:
        raise ContractError(f"mixout: target dims {list(w_pre.shape)} differ from weight dims {w.dims}")
    if not 0.0 <= p < 1.0:
        raise ContractError(f"mixout probability must lie in [0, 1), got {p}")
    if p == 0.0 or rng is None:
        return w
    keep = (rng.random(w.shape) >= p) / (1.0 - p)
    out = w_pre + keep * (w.data - w_pre)
    return record_op(out, (w,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(f, inputs: Sequence, eps: float = 1e-5, max_entries=None, rng=None) -> float:
    """Worst relative error between reverse-mode and central-difference
    gradients of scalar ``f(*inputs)``.

    The error per entry is ``|a - b| / max(|a|, |b|, 1e-8)``.  With
    ``max_entries`` set, at most that many randomly chosen coordinates per
    input are checked.
    """
    leaves = [Tensor(np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64),
                     requires_grad=True) for x in inputs]
    with Tape() as tape:
        out = f(*leaves)
    analytic = backward(out, tape, wrt=leaves)
    rng = rng if rng is not None else np.random.default_rng(0)

    worst = 0.0
    for i, leaf in enumerate(leaves):
        flat = leaf.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            coords = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        base = [t.data for t in leaves]
        for j in coords:
            plus = flat.copy()
            minus = flat.copy()
            plus[j] += eps
            minus[j] -= eps
            args_p = [Tensor(d) for d in base]
            args_m = [Tensor(d) for d in base]
            args_p[i] = Tensor(plus.reshape(leaf.shape))
            args_m[i] = Tensor(minus.reshape(leaf.shape))
            numeric = (f(*args_p).item() - f(*args_m).item()) / (2.0 * eps)
            a = float(analytic[i].reshape(-1)[j])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst
