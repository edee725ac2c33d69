"""A small tape-based reverse-mode autodiff over float64 numpy arrays.

Usage::

    x = Tensor(np.ones(3))
    with Tape() as tape:
        loss = ad.sum(ad.tanh(x) * x)
    grads = tape.backward(loss)
    grads[x]

Operations only record while a :class:`Tape` is active, so evaluation code can
run the same forward functions without building a graph.
"""
from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import sparse

from .errors import NotScalarLoss, NotTraced, ShapeMismatch

_TAPES: list["Tape"] = []
EXP_CLIP = 700.0


class Tensor:
    """Dense float64 tensor; ``data`` is a row-major numpy array."""

    __slots__ = ("data", "requires_grad", "_traced", "name", "__weakref__")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = True, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self._traced = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape})"

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

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def constant(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, requires_grad=False)


class _Node:
    __slots__ = ("out", "parents", "backward")

    def __init__(self, out, parents, backward):
        self.out = out
        self.parents = parents
        self.backward = backward


class Gradients(dict):
    """Gradient store keyed by leaf tensor (identity)."""

    def __missing__(self, key):
        return np.zeros_like(key.data)


class Tape:
    """Records operations executed inside its ``with`` block."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self._produced: dict[int, int] = {}

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def record(self, out: Tensor, parents: tuple, backward: Callable):
        self._produced[id(out)] = len(self.nodes)
        self.nodes.append(_Node(out, parents, backward))

    def backward(self, loss: Tensor, wrt: Iterable[Tensor] | None = None) -> Gradients:
        """Reverse sweep from a scalar ``loss``.

        Returns gradients for every leaf that requires them, or for exactly the
        tensors in ``wrt`` (zeros for those that did not take part).
        """
        if loss.data.size != 1:
            raise NotScalarLoss(f"loss must be scalar, got shape {loss.shape}")
        pos = self._produced.get(id(loss))
        if pos is None:
            raise NotTraced("loss was not produced under this tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes[: pos + 1]):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            need = tuple(p._traced for p in node.parents)
            pgrads = node.backward(g, need)
            for p, pg, nd in zip(node.parents, pgrads, need):
                if not nd or pg is None:
                    continue
                k = id(p)
                if k in grads:
                    grads[k] = grads[k] + pg
                else:
                    grads[k] = pg
                    if id(p) not in self._produced:
                        leaves[k] = p
        out = Gradients()
        if wrt is None:
            for k, t in leaves.items():
                if t.requires_grad:
                    out[t] = grads[k]
        else:
            for t in wrt:
                out[t] = grads.get(id(t), np.zeros_like(t.data))
        return out


def _active() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


def _make(data, parents: tuple, backward: Callable) -> Tensor:
    out = Tensor(data, requires_grad=False)
    tape = _active()
    if tape is not None and any(p._traced for p in parents):
        out._traced = True
        tape.record(out, parents, backward)
    else:
        out._traced = False
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(op: str, a: Tensor, b: Tensor):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# elementwise

def add(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g, need: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _check_broadcast("sub", a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g, need: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    """Hadamard product (with numpy broadcasting)."""
    a, b = constant(a), constant(b)
    _check_broadcast("mul", a, b)
    ad_, bd = a.data, b.data

    def back(g, need):
        return (_unbroadcast(g * bd, ad_.shape) if need[0] else None,
                _unbroadcast(g * ad_, bd.shape) if need[1] else None)

    return _make(ad_ * bd, (a, b), back)


def div(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _check_broadcast("div", a, b)
    ad_, bd = a.data, b.data
    out = ad_ / bd

    def back(g, need):
        return (_unbroadcast(g / bd, ad_.shape) if need[0] else None,
                _unbroadcast(-g * out / bd, bd.shape) if need[1] else None)

    return _make(out, (a, b), back)


def neg(a) -> Tensor:
    a = constant(a)
    return _make(-a.data, (a,), lambda g, need: (-g,))


def tanh(a) -> Tensor:
    a = constant(a)
    y = np.tanh(a.data)
    return _make(y, (a,), lambda g, need: (g * (1.0 - y * y),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign to avoid overflow in exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(a) -> Tensor:
    a = constant(a)
    y = _sigmoid(a.data)
    return _make(y, (a,), lambda g, need: (g * y * (1.0 - y),))


def exp(a) -> Tensor:
    a = constant(a)
    y = np.exp(np.minimum(a.data, EXP_CLIP))
    return _make(y, (a,), lambda g, need: (g * y,))


def softplus(a) -> Tensor:
    a = constant(a)
    x = a.data
    return _make(np.logaddexp(0.0, x), (a,), lambda g, need: (g * _sigmoid(x),))


# ---------------------------------------------------------------------------
# structural

def matmul(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: shapes {a.shape} and {b.shape} are incompatible")
    ad_, bd = a.data, b.data

    def back(g, need):
        return (g @ bd.T if need[0] else None, ad_.T @ g if need[1] else None)

    return _make(ad_ @ bd, (a, b), back)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = tuple(constant(t) for t in tensors)
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeMismatch(f"concat: shapes {[t.shape for t in ts]} along axis {axis}") from None
    ax = axis % out.ndim
    cuts = np.cumsum([t.shape[ax] for t in ts])[:-1]

    def back(g, need):
        return tuple(np.split(g, cuts, axis=ax))

    return _make(out, ts, back)


def reshape(a, shape) -> Tensor:
    a = constant(a)
    s = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g, need: (g.reshape(s),))


def sum(a, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = constant(a)
    s = a.shape

    def back(g, need):
        if axis is None:
            return (np.broadcast_to(g, s).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), s).copy(),)

    return _make(np.sum(a.data, axis=axis), (a,), back)


def mean(a) -> Tensor:
    a = constant(a)
    n = a.size
    s = a.shape
    return _make(np.mean(a.data), (a,), lambda g, need: (np.full(s, g / n),))


def mean_abs_error(pred, target) -> Tensor:
    """mean |pred - target|; the subgradient at a zero residual is 0."""
    pred, target = constant(pred), constant(target)
    if pred.shape != target.shape:
        raise ShapeMismatch(f"mean_abs_error: shapes {pred.shape} and {target.shape} differ")
    r = pred.data - target.data
    n = r.size

    def back(g, need):
        s = np.sign(r) * (g / n)
        return (s, -s)

    return _make(np.mean(np.abs(r)), (pred, target), back)


_SCATTER_CACHE: dict[bytes, sparse.csr_matrix] = {}


def _scatter_matrix(neighbors: np.ndarray) -> sparse.csr_matrix:
    """(N, N*K1) 0/1 matrix summing slot contributions back onto source nodes."""
    key = neighbors.shape[0].to_bytes(8, "little") + np.ascontiguousarray(neighbors, np.int64).tobytes()
    m = _SCATTER_CACHE.get(key)
    if m is None:
        n = neighbors.shape[0]
        cols = np.arange(neighbors.size)
        m = sparse.csr_matrix((np.ones(neighbors.size), (neighbors.reshape(-1), cols)),
                              shape=(n, neighbors.size))
        if len(_SCATTER_CACHE) > 32:
            _SCATTER_CACHE.clear()
        _SCATTER_CACHE[key] = m
    return m


def aggregate(h, weights, neighbors: np.ndarray) -> Tensor:
    """Neighbourhood aggregation with several kernel heads.

    h: (B*N, D) node features for B stacked graphs of N nodes.
    weights: (N, K1, E) weight of neighbour slot k of center n under head e.
    neighbors: (N, K1) node indices.

    Returns (B*N, E*D) where block e holds sum_k weights[n, k, e] * h[neighbors[n, k]].
    """
    h, weights = constant(h), constant(weights)
    n, k1 = neighbors.shape
    if weights.data.ndim != 3 or weights.shape[:2] != (n, k1):
        raise ShapeMismatch(f"aggregate: weights {weights.shape} vs neighbours {neighbors.shape}")
    if h.data.ndim != 2 or h.shape[0] % n:
        raise ShapeMismatch(f"aggregate: features {h.shape} not a multiple of {n} nodes")
    b = h.shape[0] // n
    d = h.shape[1]
    e = weights.shape[2]
    gathered = h.data.reshape(b, n, d)[:, neighbors]  # (B, N, K1, D)
    wt = np.swapaxes(weights.data, 1, 2)  # (N, E, K1)
    out = np.matmul(wt, gathered)  # (B, N, E, D)

    def back(g, need):
        g4 = g.reshape(b, n, e, d)
        gh = gw = None
        if need[0]:
            gg = np.matmul(weights.data, g4)  # (B, N, K1, D)
            flat = gg.transpose(1, 2, 0, 3).reshape(n * k1, b * d)
            acc = _scatter_matrix(neighbors) @ flat
            gh = acc.reshape(n, b, d).transpose(1, 0, 2).reshape(b * n, d)
        if need[1]:
            gw = np.matmul(gathered, np.swapaxes(g4, 2, 3)).sum(axis=0)  # (N, K1, E)
        return gh, gw

    return _make(out.reshape(b * n, e * d), (h, weights), back)


# ---------------------------------------------------------------------------
# checks and optimisation

def grad_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-5) -> float:
    """Max relative error between the tape gradient of scalar ``f`` at ``x`` and
    central finite differences: |analytic - numeric| / (|numeric| + 1e-8)."""
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    xt = Tensor(x0.copy())
    with Tape() as tape:
        loss = f(xt)
    analytic = tape.backward(loss, wrt=[xt])[xt]
    numeric = np.empty_like(x0)
    flat = x0.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(Tensor(x0.copy(), requires_grad=False)).item()
        flat[i] = old - h
        fm = f(Tensor(x0.copy(), requires_grad=False)).item()
        flat[i] = old
        numeric.reshape(-1)[i] = (fp - fm) / (2.0 * h)
    return float(np.max(np.abs(analytic - numeric) / (np.abs(numeric) + 1e-8)))


def clip_grad_norm(grads: dict, max_norm: float) -> float:
    """Scale ``grads`` in place so their global L2 norm is at most ``max_norm``.
    Returns the norm before clipping."""
    total = math.sqrt(float(np.sum([np.sum(g * g) for g in grads.values()])))
    if max_norm and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for k in grads:
            grads[k] = grads[k] * scale
    return total


class AdamState:
    def __init__(self):
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}


def adam_step(params: dict, grads: dict, state: AdamState, lr: float = 0.01,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update, applied in place.

    ``params`` maps name -> Tensor; ``grads`` maps name -> array.
    """
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ShapeMismatch(f"adam: gradient {g.shape} vs parameter {p.shape} for {name}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)
