"""Small reverse-mode autodiff over dense numpy arrays.

Only the operations the HOPE head needs are provided.  Every op records a
node on creation; ``backward`` gathers the nodes reachable from the loss,
orders them by creation sequence (which is a topological order) and replays
them in reverse.
"""
from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

LAYER_NORM_EPS = 1e-5
COSINE_EPS = 1e-12

_PRECISIONS = {"f32": np.float32, "f64": np.float64}
_local = threading.local()
_seq = itertools.count()


class ShapeError(ValueError):
    pass


def get_dtype():
    return getattr(_local, "dtype", np.float32)


def set_precision(name: str) -> None:
    """Set the thread-local default dtype ('f32' or 'f64')."""
    _local.dtype = _PRECISIONS[name]


@contextmanager
def precision(name: str):
    old = get_dtype()
    set_precision(name)
    try:
        yield
    finally:
        _local.dtype = old


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, (np.ndarray, np.floating)) \
                and data.dtype.kind == "f" else get_dtype()
        arr = np.asarray(data, dtype=dtype)
        self.data = arr if arr.flags.c_contiguous else arr.copy()
        self.requires_grad = requires_grad
        self.grad = None
        self._node = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)


class Node:
    """One executed op: output, inputs and the rule mapping g_out to input grads."""

    __slots__ = ("seq", "op", "out", "inputs", "vjp")

    def __init__(self, op: str, out: Tensor, inputs: Sequence[Tensor], vjp: Callable):
        self.seq = next(_seq)
        self.op = op
        self.out = out
        self.inputs = tuple(inputs)
        self.vjp = vjp


class Tape:
    """Ordered record of the ops reachable from a loss, oldest first."""

    def __init__(self, nodes: list[Node]):
        self.nodes = nodes

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        seen = set()
        nodes = []
        stack = [out]
        while stack:
            t = stack.pop()
            node = t._node
            if node is None or id(node) in seen:
                continue
            seen.add(id(node))
            nodes.append(node)
            stack.extend(node.inputs)
        nodes.sort(key=lambda n: n.seq)
        return cls(nodes)

    def __len__(self):
        return len(self.nodes)

    def ops(self) -> list[str]:
        return [n.op for n in self.nodes]


# Fault injection hook for the gradient-check negative control.
_CORRUPT: set[str] = set()


@contextmanager
def corrupt_backward(*ops: str):
    """Scale the backward rule of the named ops by 1.5 (test hook)."""
    _CORRUPT.update(ops)
    try:
        yield
    finally:
        _CORRUPT.difference_update(ops)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(op: str, value: np.ndarray, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(value, requires_grad=needs, dtype=value.dtype)
    if needs:
        if op in _CORRUPT:
            inner = vjp
            vjp = lambda g: tuple(None if r is None else 1.5 * r for r in inner(g))  # noqa: E731
        out._node = Node(op, out, inputs, vjp)
    return out


def backward(loss: Tensor) -> None:
    if loss.data.size != 1 or loss.data.ndim > 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = Tape.from_output(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        in_grads = node.vjp(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if t._node is None:
                # leaf: accumulate into .grad
                t.grad = gi.copy() if t.grad is None else t.grad + gi
                grads.pop(key)
    # leaves that were also direct outputs (loss itself a leaf)
    if loss._node is None and loss.requires_grad:
        loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1


# ---------------------------------------------------------------- ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    A, B = a.data, b.data
    return _record("matmul", A @ B, (a, b), lambda g: (g @ B.T, A.T @ g))


def transpose(a: Tensor) -> Tensor:
    a = _wrap(a)
    if a.data.ndim != 2:
        raise ShapeError(f"transpose expects 2-D, got {a.shape}")
    return _record("transpose", a.data.T.copy(), (a,), lambda g: (g.T,))


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise add; ``b`` may also be a row vector added to every row of ``a``."""
    a, b = _wrap(a), _wrap(b)
    if a.shape == b.shape:
        return _record("add", a.data + b.data, (a, b), lambda g: (g, g))
    if a.data.ndim == 2 and b.data.ndim == 1 and b.shape[0] == a.shape[1]:
        return _record("add", a.data + b.data, (a, b), lambda g: (g, g.sum(axis=0)))
    raise ShapeError(f"add shape mismatch: {a.shape} + {b.shape}")


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.shape != b.shape:
        raise ShapeError(f"sub shape mismatch: {a.shape} - {b.shape}")
    return _record("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; either side may be a 0-d scalar tensor."""
    a, b = _wrap(a), _wrap(b)
    A, B = a.data, b.data
    if a.shape == b.shape:
        return _record("mul", A * B, (a, b), lambda g: (g * B, g * A))
    if B.ndim == 0:
        return _record("mul", A * B, (a, b), lambda g: (g * B, np.sum(g * A)))
    if A.ndim == 0:
        return _record("mul", A * B, (a, b), lambda g: (np.sum(g * B), g * A))
    raise ShapeError(f"mul shape mismatch: {a.shape} * {b.shape}")


def neg(a: Tensor) -> Tensor:
    a = _wrap(a)
    return _record("neg", -a.data, (a,), lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    a = _wrap(a)
    out = np.exp(a.data)
    return _record("exp", out, (a,), lambda g: (g * out,))


def square(a: Tensor) -> Tensor:
    a = _wrap(a)
    A = a.data
    return _record("square", A * A, (a,), lambda g: (2 * g * A,))


def sigmoid(a: Tensor) -> Tensor:
    a = _wrap(a)
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype)
    return _record("sigmoid", out, (a,), lambda g: (g * out * (1 - out),))


def relu(a: Tensor) -> Tensor:
    a = _wrap(a)
    pos = a.data > 0
    return _record("relu", np.where(pos, a.data, 0).astype(a.dtype), (a,),
                   lambda g: (g * pos,))


def sum(a: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    a = _wrap(a)
    shape = a.shape
    if axis is None:
        return _record("sum", np.asarray(a.data.sum(), dtype=a.dtype), (a,),
                       lambda g: (np.broadcast_to(g, shape).copy(),))
    if axis != 0 or a.data.ndim != 2:
        raise ShapeError("sum supports axis=None or axis=0 on 2-D tensors")
    return _record("sum", a.data.sum(axis=0), (a,),
                   lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    a = _wrap(a)
    n = a.data.size if axis is None else a.shape[0]
    s = sum(a, axis)
    return mul(s, Tensor(np.asarray(1.0 / n, dtype=a.dtype)))


def concat_cols(xs: Sequence[Tensor]) -> Tensor:
    xs = [_wrap(x) for x in xs]
    rows = {x.shape[0] for x in xs}
    if len(rows) != 1 or any(x.data.ndim != 2 for x in xs):
        raise ShapeError(f"concat_cols needs 2-D tensors with equal rows, got {[x.shape for x in xs]}")
    bounds = np.cumsum([0] + [x.shape[1] for x in xs])
    out = np.concatenate([x.data for x in xs], axis=1)
    return _record("concat_cols", out, xs,
                   lambda g: tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(xs))))


def stack_cols(xs: Sequence[Tensor]) -> Tensor:
    """Stack 1-D tensors of length b as the columns of a b x n tensor."""
    xs = [_wrap(x) for x in xs]
    if len({x.shape for x in xs}) != 1 or xs[0].data.ndim != 1:
        raise ShapeError(f"stack_cols needs equal 1-D tensors, got {[x.shape for x in xs]}")
    out = np.stack([x.data for x in xs], axis=1)
    return _record("stack_cols", out, xs, lambda g: tuple(g[:, i].copy() for i in range(len(xs))))


def col(x: Tensor, j: int) -> Tensor:
    x = _wrap(x)
    shape = x.shape

    def vjp(g):
        gx = np.zeros(shape, dtype=g.dtype)
        gx[:, j] = g
        return (gx,)

    return _record("col", x.data[:, j].copy(), (x,), vjp)


def row(x: Tensor, i: int) -> Tensor:
    x = _wrap(x)
    shape = x.shape

    def vjp(g):
        gx = np.zeros(shape, dtype=g.dtype)
        gx[i] = g
        return (gx,)

    return _record("row", x.data[i].copy(), (x,), vjp)


def take_rows(x: Tensor, idx) -> Tensor:
    x = _wrap(x)
    idx = np.asarray(idx, dtype=np.intp)
    shape = x.shape

    def vjp(g):
        gx = np.zeros(shape, dtype=g.dtype)
        np.add.at(gx, idx, g)
        return (gx,)

    return _record("take_rows", x.data[idx], (x,), vjp)


def scatter_rows(x: Tensor, idx, n: int) -> Tensor:
    """Place the rows of ``x`` at positions ``idx`` of an n-row zero tensor."""
    x = _wrap(x)
    idx = np.asarray(idx, dtype=np.intp)
    out = np.zeros((n,) + x.shape[1:], dtype=x.dtype)
    np.add.at(out, idx, x.data)
    return _record("scatter_rows", out, (x,), lambda g: (g[idx],))


def scale_rows(x: Tensor, w: Tensor) -> Tensor:
    x, w = _wrap(x), _wrap(w)
    if x.data.ndim != 2 or w.shape != (x.shape[0],):
        raise ShapeError(f"scale_rows shape mismatch: {x.shape} by {w.shape}")
    X, W = x.data, w.data
    return _record("scale_rows", X * W[:, None], (x, w),
                   lambda g: (g * W[:, None], (g * X).sum(axis=1)))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    x, gamma, beta = _wrap(x), _wrap(gamma), _wrap(beta)
    if x.data.ndim != 2 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(f"layer_norm shape mismatch: x {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    X = x.data
    mu = X.mean(axis=1, keepdims=True)
    xc = X - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    G = gamma.data

    def vjp(g):
        gxhat = g * G
        gx = rstd * (gxhat - gxhat.mean(axis=1, keepdims=True)
                     - xhat * (gxhat * xhat).mean(axis=1, keepdims=True))
        return gx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return _record("layer_norm", xhat * G + beta.data, (x, gamma, beta), vjp)


def cosine_rows(x: Tensor, p: Tensor, eps: float = COSINE_EPS) -> Tensor:
    """Cosine of every row of ``x`` with the vector ``p``."""
    x, p = _wrap(x), _wrap(p)
    if x.data.ndim != 2 or p.shape != (x.shape[1],):
        raise ShapeError(f"cosine_rows shape mismatch: {x.shape} vs {p.shape}")
    X, P = x.data, p.data
    xn = np.sqrt((X * X).sum(axis=1))
    pn = np.sqrt((P * P).sum())
    dot = X @ P
    denx = xn + eps
    denp = pn + eps
    out = dot / (denx * denp)

    def vjp(g):
        # d/dx of dot/(|x|+e) = p/(..) - dot * x/|x| / (|x|+e)^2, same for p
        safe_xn = np.where(xn > 0, xn, 1)
        gx = (g / (denx * denp))[:, None] * P[None, :] \
            - (g * dot / (denx ** 2 * denp) / safe_xn)[:, None] * X
        gs = g / (denx * denp)
        safe_pn = pn if pn > 0 else 1
        gp = X.T @ gs - (np.sum(g * dot / denx) / denp ** 2 / safe_pn) * P
        return gx, gp

    return _record("cosine_rows", out.astype(X.dtype), (x, p), vjp)


def softmax_rows(x: Tensor) -> Tensor:
    x = _wrap(x)
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)
    return _record("softmax_rows", s, (x,),
                   lambda g: (s * (g - (g * s).sum(axis=1, keepdims=True)),))


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer labels under softmax(logits)."""
    logits = _wrap(logits)
    labels = np.asarray(labels, dtype=np.intp)
    b, c = logits.shape
    if labels.shape != (b,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch {b}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise IndexError(f"label out of range [0, {c})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(b)
    loss = (lse - z[rows, labels]).mean()
    probs = np.exp(z - lse[:, None])

    def vjp(g):
        gl = probs.copy()
        gl[rows, labels] -= 1
        return (gl * (g / b),)

    return _record("cross_entropy", np.asarray(loss, dtype=logits.dtype), (logits,), vjp)


# ---------------------------------------------------------------- checking


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5) -> float:
    """Worst relative error between tape gradients and central differences.

    ``f`` recomputes the scalar loss from the current values of ``params``.
    Per parameter the error is max|analytic - numeric| / max(|analytic|, |numeric|)
    in the infinity norm; the worst over all parameters is returned.
    """
    for p in params:
        p.grad = None
    loss = f()
    backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    worst = 0.0
    for p, ga in zip(params, analytic):
        num = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        gflat = num.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            fp = float(f().data)
            flat[i] = old - h
            fm = float(f().data)
            flat[i] = old
            gflat[i] = (fp - fm) / (2 * h)
        scale = max(np.abs(ga).max(initial=0.0), np.abs(num).max(initial=0.0))
        if scale == 0:
            continue
        worst = max(worst, float(np.abs(ga - num).max() / scale))
    for p in params:
        p.grad = None
    return worst
