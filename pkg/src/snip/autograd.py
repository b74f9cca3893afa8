"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations are recorded on the active :class:`Graph` (entered with ``with
Graph() as g:``). Outside a graph nothing is recorded, which doubles as a
no-grad mode for evaluation passes.
"""

from __future__ import annotations

import itertools
import math
import threading
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "Graph",
    "DimensionError",
    "ContractError",
    "ConfigurationError",
    "active_graph",
    "backward",
    "matmul",
    "softmax_rows",
    "layer_norm",
    "activation",
    "relu",
    "gelu",
    "tanh",
    "absolute",
    "amax",
    "embedding",
    "cross_entropy",
    "finite_diff_check",
]

_ids = itertools.count()
_local = threading.local()


class DimensionError(ValueError):
    pass


class ContractError(ValueError):
    pass


class ConfigurationError(ValueError):
    pass


def _stack() -> list:
    if not hasattr(_local, "graphs"):
        _local.graphs = []
    return _local.graphs


def active_graph() -> "Graph | None":
    stack = _stack()
    return stack[-1] if stack else None


class Graph:
    """Ordered record of operations; backward walks it in reverse insertion order."""

    def __init__(self) -> None:
        self.nodes: list[tuple["Tensor", tuple["Tensor", ...], Callable]] = []

    def __enter__(self) -> "Graph":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()

    def record(self, out: "Tensor", parents: tuple["Tensor", ...], fn: Callable) -> None:
        self.nodes.append((out, parents, fn))

    def backward(self, loss: "Tensor") -> None:
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        loss.grad = np.ones_like(loss.data)
        for out, parents, fn in reversed(self.nodes):
            if out.grad is None:
                continue
            grads = fn(out.grad)
            for parent, g in zip(parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = np.array(g, dtype=np.float64, copy=True)
                else:
                    parent.grad += g


def backward(graph: Graph, loss: "Tensor") -> None:
    graph.backward(loss)


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node_id", "name")
    # make numpy defer to the reflected Tensor operators
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node_id = next(_ids)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- arithmetic -------------------------------------------------------

    def __add__(self, other):
        other = _wrap(other)
        a, b = self, other
        return _make(a.data + b.data, (a, b),
                     lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))

    __radd__ = __add__

    def __sub__(self, other):
        other = _wrap(other)
        a, b = self, other
        return _make(a.data - b.data, (a, b),
                     lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))

    def __rsub__(self, other):
        return _wrap(other) - self

    def __mul__(self, other):
        other = _wrap(other)
        a, b = self, other
        return _make(a.data * b.data, (a, b),
                     lambda g: (_unbroadcast(g * b.data, a.shape),
                                _unbroadcast(g * a.data, b.shape)))

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _wrap(other)
        a, b = self, other
        return _make(a.data / b.data, (a, b),
                     lambda g: (_unbroadcast(g / b.data, a.shape),
                                _unbroadcast(-g * a.data / (b.data * b.data), b.shape)))

    def __rtruediv__(self, other):
        return _wrap(other) / self

    def __neg__(self):
        a = self
        return _make(-a.data, (a,), lambda g: (-g,))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        a = self

        def fn(g):
            full = np.zeros_like(a.data)
            np.add.at(full, index, g)
            return (full,)

        return _make(a.data[index], (a,), fn)

    # -- shape and reductions --------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        a = self

        def fn(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, a.shape).copy(),)

        return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), fn)

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else np.prod(
            [self.shape[i] for i in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        a = self
        return _make(a.data.reshape(*shape), (a,), lambda g: (g.reshape(a.shape),))

    def swap_last(self):
        a = self
        return _make(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),))

    @property
    def T(self):
        return self.swap_last()


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], fn: Callable) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs)
    graph = active_graph()
    if needs and graph is not None:
        graph.record(out, parents, fn)
    return out


# -- operations -------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}") from exc

    def fn(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), fn)


def softmax_rows(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis with per-row max subtraction.

    ``mask`` is a boolean array broadcastable to ``x``; False entries get
    probability exactly zero. Every row must keep at least one True entry.
    """
    x = _wrap(x)
    z = x.data
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)

    def fn(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _make(p, (x,), fn)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    x, gain, bias = _wrap(x), _wrap(gain), _wrap(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm width {d} vs gain {gain.shape}, bias {bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def fn(g):
        gxhat = g * gain.data
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        ggain = _unbroadcast(g * xhat, gain.shape)
        gbias = _unbroadcast(g, bias.shape)
        return gx, ggain, gbias

    return _make(out, (x, gain, bias), fn)


def relu(x: Tensor) -> Tensor:
    x = _wrap(x)
    on = x.data > 0
    return _make(np.where(on, x.data, 0.0), (x,), lambda g: (g * on,))


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    x = _wrap(x)
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    pdf = _INV_SQRT2PI * np.exp(-0.5 * x.data * x.data)
    return _make(x.data * cdf, (x,), lambda g: (g * (cdf + x.data * pdf),))


def tanh(x: Tensor) -> Tensor:
    x = _wrap(x)
    y = np.tanh(x.data)
    return _make(y, (x,), lambda g: (g * (1.0 - y * y),))


_ACTIVATIONS = {"relu": relu, "gelu": gelu}


def activation(x: Tensor, kind: str) -> Tensor:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ConfigurationError(f"unknown activation {kind!r}; expected one of {sorted(_ACTIVATIONS)}")
    return fn(x)


def absolute(x: Tensor) -> Tensor:
    x = _wrap(x)
    return _make(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def amax(x: Tensor, axis: Sequence[int]) -> Tensor:
    """Max over ``axis``; the gradient goes to the first arg-max coordinate only."""
    x = _wrap(x)
    axes = tuple(sorted(a % x.ndim for a in axis))
    keep = tuple(a for a in range(x.ndim) if a not in axes)
    moved = np.transpose(x.data, keep + axes)
    lead = moved.shape[: len(keep)]
    flat = moved.reshape(lead + (-1,))
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def fn(g):
        onehot = np.zeros_like(flat)
        np.put_along_axis(onehot, idx[..., None], g[..., None], axis=-1)
        back = onehot.reshape(moved.shape)
        return (np.transpose(back, np.argsort(keep + axes)),)

    return _make(out, (x,), fn)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)

    def fn(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        return (full,)

    return _make(table.data[ids], (table,), fn)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under row softmax."""
    labels = np.asarray(labels)
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    n = logits.shape[0]
    loss = -logp[np.arange(n), labels].mean()

    def fn(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        return (g * p / n,)

    return _make(np.asarray(loss), (logits,), fn)


def relative_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    """|a - n| / max(|a|, |n|, floor); the floor keeps true zeros from amplifying difference noise."""
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def finite_diff_check(f: Callable[[Tensor], Tensor], x: np.ndarray, h: float = 1e-5) -> float:
    """Max relative error between the taped gradient of ``f`` and central differences."""
    x = _as_array(x)
    leaf = Tensor(x.copy(), requires_grad=True)
    with Graph() as g:
        out = f(leaf)
    g.backward(out)
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(x)
    worst = 0.0
    flat = x.reshape(-1)
    for i in range(flat.size):
        plus, minus = flat.copy(), flat.copy()
        plus[i] += h
        minus[i] -= h
        fp = float(f(Tensor(plus.reshape(x.shape))).data)
        fm = float(f(Tensor(minus.reshape(x.shape))).data)
        numeric = (fp - fm) / (2 * h)
        a = analytic.reshape(-1)[i]
        worst = max(worst, relative_error(a, numeric))
    return worst
