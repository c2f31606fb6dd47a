"""Dense tensors with reverse-mode automatic differentiation.

Only the operations a small transformer needs are provided. Every op
records its parents and a closure computing the parents' gradients;
:func:`backward` walks the recorded graph once in reverse topological order
and returns the gradients in a separate store, leaving tensors untouched.
"""

from __future__ import annotations

import contextlib
import logging
import math
from typing import Callable, Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

DEFAULT_DTYPE = np.float32
NEG_INF_SURROGATE = -1e9

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


class GraphError(RuntimeError):
    """Raised on invalid use of the autodiff graph."""


class Tensor:
    """An n-d array of floats, optionally tracked for differentiation."""

    __slots__ = ("data", "requires_grad", "name", "_parents", "_backward", "_released")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data, dtype=dtype or getattr(data, "dtype", None) or DEFAULT_DTYPE)
        if arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._released = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self):
        return sum_all(self)


def as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else DEFAULT_DTYPE
    return Tensor(np.asarray(x, dtype=dtype))


def _make(out: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    if not np.isfinite(out).all():
        raise FloatingPointError(f"non-finite values produced by {op}")
    result = Tensor(out)
    if _grad_enabled and any(p.requires_grad or p._parents for p in parents):
        result.requires_grad = True
        result._parents = tuple(parents)
        result._backward = backward
    return result


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b, like=as_tensor(a))

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward, "add")


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _make(ad * bd, (a, b), backward, "mul")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    xd = x.data
    sq = xd * xd
    th = np.tanh(_GELU_C * xd * (1.0 + 0.044715 * sq))
    out = 0.5 * xd * (1.0 + th)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * sq)
        return (g * (0.5 * (1.0 + th) + 0.5 * xd * (1.0 - th * th) * dinner),)

    return _make(out.astype(xd.dtype, copy=False), (x,), backward, "gelu")


def rms_norm(x: Tensor, weight: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis by its root mean square, then scale."""
    xd, wd = x.data, weight.data
    inv = 1.0 / np.sqrt((xd * xd).mean(axis=-1, keepdims=True) + eps)
    normed = xd * inv
    out = normed * wd

    def backward(g):
        gw = _unbroadcast(g * normed, wd.shape)
        gn = g * wd
        d = xd.shape[-1]
        gx = inv * (gn - normed * (gn * normed).sum(axis=-1, keepdims=True) / d)
        return gx, gw

    return _make(out.astype(xd.dtype, copy=False), (x, weight), backward, "rms_norm")


# ---------------------------------------------------------------- linear algebra


def _swap(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul needs operands of rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g @ _swap(bd), ad.shape) if a.requires_grad or a._parents else None
        gb = _unbroadcast(_swap(ad) @ g, bd.shape) if b.requires_grad or b._parents else None
        return ga, gb

    return _make(ad @ bd, (a, b), backward, "matmul")


# ---------------------------------------------------------------- shape ops


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape

    def backward(g):
        return (g.reshape(old),)

    return _make(x.data.reshape(shape), (x,), backward, "reshape")


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(x.ndim)))
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (np.transpose(g, inverse),)

    return _make(np.transpose(x.data, axes), (x,), backward, "transpose")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            out.append(g[tuple(idx)])
        return tuple(out)

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


def getitem(x: Tensor, index) -> Tensor:
    xd = x.data
    out = xd[index]
    basic = not _is_advanced(index)

    def backward(g):
        full = np.zeros_like(xd)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make(np.array(out, copy=True), (x,), backward, "getitem")


def _is_advanced(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape

    def backward(g):
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(x.data.sum(), dtype=x.dtype), (x,), backward, "sum")


def embedding(table: Tensor, ids) -> Tensor:
    """Gather rows of ``table`` (vocab x dim) at integer ``ids`` (any shape)."""
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise TypeError("embedding ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"token id out of range [0, {table.shape[0]})")
    td = table.data

    def backward(g):
        full = np.zeros_like(td)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, td.shape[1]))
        return (full,)

    return _make(td[ids], (table,), backward, "embedding")


# ---------------------------------------------------------------- attention and loss


def masked_softmax(scores: Tensor, allow) -> Tensor:
    """Softmax over the last axis restricted to ``allow`` (broadcastable bools).

    Disallowed entries receive probability exactly 0. Every row must allow
    at least one key.
    """
    allow = np.asarray(allow, dtype=bool)
    sd = scores.data
    masked = np.where(allow, sd, np.asarray(NEG_INF_SURROGATE, dtype=sd.dtype))
    masked = masked - masked.max(axis=-1, keepdims=True)
    e = np.exp(masked)
    p = e / e.sum(axis=-1, keepdims=True)
    p = np.where(allow, p, np.asarray(0.0, dtype=sd.dtype))

    def backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _make(p, (scores,), backward, "masked_softmax")


def log_softmax_np(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def weighted_masked_ce(logits: Tensor, targets, weights, active) -> Tensor:
    """Weighted cross-entropy averaged over the active positions.

    ``logits`` is (L, V); ``targets`` (L,) ids; ``weights`` (L,) non-negative;
    ``active`` is a boolean vector or a collection of row indices. Inactive
    rows contribute nothing to either value or gradient.
    """
    L, V = logits.shape
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    weights = np.asarray(weights, dtype=logits.dtype).reshape(-1)
    if targets.shape[0] != L or weights.shape[0] != L:
        raise ValueError("targets and weights must have one entry per logit row")
    active_mask = _as_active_mask(active, L)
    if np.any(weights < 0):
        raise ValueError("weights must be non-negative")
    rows = np.flatnonzero(active_mask)
    if rows.size and (targets[rows].min() < 0 or targets[rows].max() >= V):
        raise IndexError(f"target id out of vocab range [0, {V})")
    if rows.size == 0:
        logger.warning("weighted_masked_ce called with no active positions")
        return _make(np.asarray(0.0, dtype=logits.dtype), (logits,), lambda g: (np.zeros_like(logits.data),), "ce")

    denom = float(max(1, rows.size))
    sub = logits.data[rows]
    logp = log_softmax_np(sub)
    w = weights[rows]
    nll = -logp[np.arange(rows.size), targets[rows]]
    value = np.asarray((w * nll).sum() / denom, dtype=logits.dtype)

    def backward(g):
        full = np.zeros_like(logits.data)
        probs = np.exp(logp)
        probs[np.arange(rows.size), targets[rows]] -= 1.0
        full[rows] = probs * (w / denom)[:, None] * g
        return (full,)

    return _make(value, (logits,), backward, "weighted_masked_ce")


def _as_active_mask(active, n: int) -> np.ndarray:
    arr = np.asarray(list(active) if isinstance(active, (set, frozenset)) else active)
    if arr.dtype == bool:
        if arr.shape != (n,):
            raise ValueError("boolean active mask must have one entry per row")
        return arr
    mask = np.zeros(n, dtype=bool)
    if arr.size:
        mask[arr.astype(np.int64)] = True
    return mask


# ---------------------------------------------------------------- backward


def _topological(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


class Gradients(dict):
    """Mapping from leaf tensors to gradient arrays (keyed by identity)."""

    def __init__(self):
        super().__init__()
        self._by_id: dict[int, tuple[Tensor, np.ndarray]] = {}

    def add(self, tensor: Tensor, grad: np.ndarray):
        key = id(tensor)
        if key in self._by_id:
            self._by_id[key] = (tensor, self._by_id[key][1] + grad)
        else:
            self._by_id[key] = (tensor, grad)

    def __getitem__(self, tensor: Tensor) -> np.ndarray:
        if id(tensor) in self._by_id:
            return self._by_id[id(tensor)][1]
        return np.zeros_like(tensor.data)

    def __contains__(self, tensor) -> bool:
        return id(tensor) in self._by_id

    def __len__(self):
        return len(self._by_id)

    def items(self):
        return list(self._by_id.values())


def backward(loss: Tensor) -> Gradients:
    """Gradients of scalar ``loss`` w.r.t. every leaf tensor with ``requires_grad``.

    The graph is consumed: saved activations are released, so a second call
    without a fresh forward raises :class:`GraphError`.
    """
    if loss.data.size != 1 or loss.ndim != 0:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._released:
        raise GraphError("graph already consumed by a previous backward; re-run the forward")
    grads = Gradients()
    order = _topological(loss)
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if node._backward is None:
            if node._released:
                raise GraphError("graph already consumed by a previous backward; re-run the forward")
            if node.requires_grad and g is not None:
                grads.add(node, g)
            continue
        if g is not None:
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not (parent.requires_grad or parent._parents):
                    continue
                key = id(parent)
                pending[key] = pending[key] + pg if key in pending else pg
        node._backward = None
        node._parents = ()
        node._released = True
    return grads


# ---------------------------------------------------------------- gradient check


def grad_check(f: Callable[[Sequence[Tensor]], Tensor], params: Sequence[Tensor], eps: float = 1e-3,
               n_coords: int | None = 64, rng=None) -> float:
    """Largest relative error between analytic and central-difference gradients.

    ``f`` maps a list of tensors to a scalar tensor. Coordinates are sampled
    uniformly over all parameter entries (all of them when ``n_coords`` is
    None). Evaluation happens in float64 so that the numeric side is not
    dominated by rounding.
    """
    if not 1e-4 <= eps <= 1e-2:
        raise ValueError("eps must lie in [1e-4, 1e-2]")
    rng = np.random.default_rng(rng)
    base = [p.data.astype(np.float64) for p in params]

    def evaluate(arrays, track):
        tensors = [Tensor(a.copy(), requires_grad=track, dtype=np.float64) for a in arrays]
        return tensors, f(tensors)

    tensors, loss = evaluate(base, True)
    grads = backward(loss)
    analytic = [grads[t] for t in tensors]

    coords = [(i, j) for i, a in enumerate(base) for j in range(a.size)]
    if n_coords is not None and n_coords < len(coords):
        picks = rng.choice(len(coords), size=n_coords, replace=False)
        coords = [coords[k] for k in sorted(picks)]

    worst = 0.0
    with no_grad():
        for i, j in coords:
            values = []
            for sign in (1.0, -1.0):
                arrays = [a.copy() for a in base]
                arrays[i].reshape(-1)[j] += sign * eps
                value = float(evaluate(arrays, False)[1].data)
                if not math.isfinite(value):
                    raise FloatingPointError(f"non-finite loss while perturbing coordinate {(i, j)}")
                values.append(value)
            numeric = (values[0] - values[1]) / (2 * eps)
            a = float(analytic[i].reshape(-1)[j])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst


def parameters_of(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad]
