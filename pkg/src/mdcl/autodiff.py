"""Define-by-run reverse-mode differentiation over dense float64 matrices.

Every op returns a new :class:`Tensor` that remembers its parents and a
closure pushing its gradient back to them. Node ids grow monotonically, so
creation order is a topological order and :func:`backward` simply walks the
reachable nodes by descending id.
"""
from __future__ import annotations

import itertools
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

from . import _kernels
from .errors import ContractError, ShapeError

_ids = itertools.count()

NORM_EPS = 1e-12


class Tensor:
    __slots__ = ("values", "grad", "requires_grad", "id", "_parents", "_backward", "name")

    def __init__(self, values, requires_grad=False, name=None, _parents=(), _backward=None):
        v = np.asarray(values, dtype=np.float64)
        if v.ndim == 0:
            v = v.reshape(1, 1)
        elif v.ndim == 1:
            v = v.reshape(1, -1)
        elif v.ndim != 2:
            raise ShapeError(f"Tensor must be 2-D, got shape {v.shape}")
        self.values = v
        self.grad = None
        self.requires_grad = requires_grad
        self.id = next(_ids)
        self._parents = _parents
        self._backward = _backward
        self.name = name

    @property
    def shape(self):
        return self.values.shape

    def item(self) -> float:
        if self.values.shape != (1, 1):
            raise ContractError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.values[0, 0])

    def detach(self) -> "Tensor":
        return Tensor(self.values, requires_grad=False)

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, id={self.id})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, c):
        return scale(self, c)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(values, parents, backward):
    # values are already 2-D float64 here, so skip the constructor checks
    t = Tensor.__new__(Tensor)
    t.values = values
    t.grad = None
    t.id = next(_ids)
    t.name = None
    for p in parents:
        if p.requires_grad:
            t.requires_grad = True
            t._parents = parents
            t._backward = backward
            return t
    t.requires_grad = False
    t._parents = ()
    t._backward = None
    return t


def constant(values) -> Tensor:
    return Tensor(values, requires_grad=False)


def parameter(values, name=None) -> Tensor:
    return Tensor(values, requires_grad=True, name=name)


# ---------------------------------------------------------------------------
# ops
# ---------------------------------------------------------------------------

def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """``x @ w + b`` with ``b`` a single broadcast row."""
    xv, wv, bv = x.values, w.values, b.values
    if xv.shape[1] != wv.shape[0]:
        raise ShapeError(f"affine: x has shape {xv.shape} but w has shape {wv.shape}")
    if bv.shape != (1, wv.shape[1]):
        raise ShapeError(f"affine: bias shape {bv.shape} does not match w shape {wv.shape}")
    out_v = xv @ wv + bv

    def back(g):
        if x.requires_grad:
            x.grad += g @ wv.T
        if w.requires_grad:
            w.grad += xv.T @ g
        if b.requires_grad:
            b.grad += g.sum(axis=0, keepdims=True)

    return _node(out_v, (x, w, b), back)


def sigmoid(x: Tensor) -> Tensor:
    out_v = expit(x.values)

    def back(g):
        x.grad += g * out_v * (1.0 - out_v)

    return _node(out_v, (x,), back)


def softmax_rows(x: Tensor) -> Tensor:
    v = x.values
    if v.size:
        e = np.exp(v - v.max(axis=1, keepdims=True))
        out_v = e / e.sum(axis=1, keepdims=True)
    else:
        out_v = v.copy()

    def back(g):
        x.grad += out_v * (g - (g * out_v).sum(axis=1, keepdims=True))

    return _node(out_v, (x,), back)


def log_softmax_rows(x: Tensor) -> Tensor:
    v = x.values
    if v.size:
        shifted = v - v.max(axis=1, keepdims=True)
        out_v = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    else:
        out_v = v.copy()

    def back(g):
        p = np.exp(out_v)
        x.grad += g - p * g.sum(axis=1, keepdims=True)

    return _node(out_v, (x,), back)


def l2_normalize_rows(x: Tensor, eps: float = NORM_EPS) -> Tensor:
    v = x.values
    norms = np.sqrt(np.einsum("ij,ij->i", v, v))[:, None]
    # rows under the floor are divided by eps instead
    denom = np.maximum(norms, eps)
    out_v = v / denom

    def back(g):
        proj = (g * out_v).sum(axis=1, keepdims=True)
        gx = (g - out_v * proj) / denom
        clipped = norms[:, 0] < eps
        if clipped.any():
            gx[clipped] = g[clipped] / eps
        x.grad += gx

    return _node(out_v, (x,), back)


def concat_cols(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[0] != b.shape[0]:
        raise ShapeError(f"concat_cols: row counts differ, {a.shape} vs {b.shape}")
    p = a.shape[1]
    out_v = np.concatenate([a.values, b.values], axis=1)

    def back(g):
        if a.requires_grad:
            a.grad += g[:, :p]
        if b.requires_grad:
            b.grad += g[:, p:]

    return _node(out_v, (a, b), back)


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes differ, {a.shape} vs {b.shape}")

    def back(g):
        if a.requires_grad:
            a.grad += g
        if b.requires_grad:
            b.grad += g

    return _node(a.values + b.values, (a, b), back)


def add_n(terms: Sequence[Tensor]) -> Tensor:
    if not terms:
        return constant(0.0)
    out = terms[0]
    for t in terms[1:]:
        out = add(out, t)
    return out


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)

    def back(g):
        x.grad += c * g

    return _node(c * x.values, (x,), back)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes differ, {a.shape} vs {b.shape}")

    def back(g):
        if a.requires_grad:
            a.grad += g * b.values
        if b.requires_grad:
            b.grad += g * a.values

    return _node(a.values * b.values, (a, b), back)


def sum_all(x: Tensor) -> Tensor:
    def back(g):
        x.grad += g[0, 0]

    return _node(np.array([[x.values.sum()]]), (x,), back)


def mean_all(x: Tensor) -> Tensor:
    n = x.values.size

    def back(g):
        x.grad += g[0, 0] / n

    return _node(np.array([[x.values.sum() / n]]), (x,), back)


def sum_rows(x: Tensor) -> Tensor:
    """Row sums as an n x 1 column."""
    def back(g):
        x.grad += g

    return _node(x.values.sum(axis=1, keepdims=True), (x,), back)


def pick(x: Tensor, idx) -> Tensor:
    """Gather ``x[i, idx[i]]`` into an n x 1 column."""
    idx = np.asarray(idx, dtype=np.int64).reshape(-1)
    n, c = x.values.shape
    if idx.shape[0] != n:
        raise ShapeError(f"pick: {idx.shape[0]} indices for {n} rows")
    if n and (idx.min() < 0 or idx.max() >= c):
        raise IndexError(f"pick: index out of range for {c} columns")
    rows = np.arange(n)

    def back(g):
        np.add.at(x.grad, (rows, idx), g[:, 0])

    return _node(x.values[rows, idx].reshape(n, 1), (x,), back)


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Fused mean of ``-log softmax(logits)[i, labels[i]]``.

    Same value as composing :func:`log_softmax_rows`, :func:`pick` and
    :func:`mean_all`, with a single node and gradient ``(p - onehot) / n``.
    ``labels`` must already be a validated int array.
    """
    v = logits.values
    n = v.shape[0]
    shifted = v - v.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    loss = float((lse - shifted[rows, labels]).sum() / n)

    def back(g):
        d = np.exp(shifted - lse[:, None])
        d[rows, labels] -= 1.0
        logits.grad += (g[0, 0] / n) * d

    return _node(np.array([[loss]]), (logits,), back)


def contrastive(u: Tensor, pos: np.ndarray, tau: float) -> Tensor:
    """Fused NT-Xent over rows of ``u`` (taken as already normalized).

    ``pos[i, a]`` marks ``a`` as a positive of anchor ``i``; the diagonal is
    ignored. Dispatches to the compiled kernel when available.
    """
    m = u.shape[0]
    pos = np.asarray(pos, dtype=bool)
    if pos.shape != (m, m):
        raise ShapeError(f"contrastive: mask shape {pos.shape} for {m} rows")
    loss, gu = _kernels.contrastive(u.values, pos, tau)

    def back(g):
        u.grad += g[0, 0] * gu

    return _node(np.array([[loss]]), (u,), back)


# ---------------------------------------------------------------------------
# backward pass and gradient checking
# ---------------------------------------------------------------------------

def topo_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` that need gradients, in creation order."""
    seen = {}
    stack = [root]
    while stack:
        t = stack.pop()
        if t.id in seen or not t.requires_grad:
            continue
        seen[t.id] = t
        stack.extend(t._parents)
    return [seen[k] for k in sorted(seen)]


def backward(loss: Tensor) -> list[Tensor]:
    """Fill ``.grad`` of every reachable tensor with d(loss)/d(tensor).

    Grads of the reachable nodes are reset first, so each call reports the
    gradient of this loss alone; unreachable tensors keep ``grad=None`` or
    their previous value. Returns the visited nodes.
    """
    if loss.shape != (1, 1):
        raise ContractError(f"backward needs a 1x1 loss, got shape {loss.shape}")
    nodes = topo_order(loss)
    for t in nodes:
        t.grad = np.zeros_like(t.values)
    loss.grad = np.ones((1, 1))
    for t in reversed(nodes):
        if t._backward is not None:
            t._backward(t.grad)
    return nodes


def finite_diff_check(f: Callable, x, h: float = 1e-5, order=2, h4: float = 1e-3,
                      switch: float = 1e-4) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``x`` is one tensor or a sequence of tensors; ``f`` is called with the
    same object and must return a 1x1 tensor. Values are perturbed in place
    and restored. ``order=2`` is the plain ``(f(x+h) - f(x-h)) / 2h`` stencil;
    ``order=4`` adds the points at ``x +- 2h`` for an O(h^4) estimate, which
    permits a larger step and so resolves gradients far below 1e-6 without
    drowning them in round-off. ``order="auto"`` uses the two-point stencil
    with step ``h`` and redoes a coordinate with the fourth-order stencil at
    step ``h4`` when that first estimate is smaller than ``switch`` in
    magnitude. The switch looks only at the numeric estimate, never at the
    analytic gradient under test.
    """
    if h <= 0 or h4 <= 0:
        raise ContractError("finite_diff_check: step must be positive")
    if order not in (2, 4, "auto"):
        raise ContractError(f"finite_diff_check: order must be 2, 4 or 'auto', got {order!r}")
    xs = [x] if isinstance(x, Tensor) else list(x)
    flags = [t.requires_grad for t in xs]
    for t in xs:
        t.requires_grad = True

    def at(flat, k, v):
        flat[k] = v
        return f(x).item()

    def two_point(flat, k, old, step):
        return (at(flat, k, old + step) - at(flat, k, old - step)) / (2.0 * step)

    def four_point(flat, k, old, step):
        d1 = at(flat, k, old + step) - at(flat, k, old - step)
        d2 = at(flat, k, old + 2 * step) - at(flat, k, old - 2 * step)
        return (8.0 * d1 - d2) / (12.0 * step)

    try:
        backward(f(x))
        analytic = [t.grad.copy() for t in xs]
        worst = 0.0
        for t, a in zip(xs, analytic):
            flat = t.values.reshape(-1)
            for k in range(flat.size):
                old = flat[k]
                if order == 4:
                    num = four_point(flat, k, old, h)
                else:
                    num = two_point(flat, k, old, h)
                    if order == "auto" and abs(num) < switch:
                        num = four_point(flat, k, old, h4)
                flat[k] = old
                ana = a.reshape(-1)[k]
                err = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
                worst = max(worst, err)
    finally:
        for t, fl in zip(xs, flags):
            t.requires_grad = fl
    return worst
