"""Finite-difference gradient suite: every differentiable op plus the composed head."""
from __future__ import annotations

import numpy as np

from . import diff_core as dc
from .diff_core import Tensor
from .head import HopeConfig, HopeHead, ViewBatch, elastic_select, alignment_scores, forward, total_loss

THRESHOLD = 1e-4

DIFFERENTIABLE_OPS = (
    "matmul", "transpose", "add", "sub", "mul", "neg", "exp", "square", "sigmoid", "relu",
    "sum", "mean", "concat_cols", "stack_cols", "col", "row", "take_rows", "scatter_rows",
    "scale_rows", "layer_norm", "cosine_rows", "softmax_rows", "cross_entropy",
)

# composed-head shape: B, M, d, L, out_dim
HEAD_SHAPE = (5, 3, 4, 2, 3)


def op_cases(rng, b: int, d: int) -> dict:
    """{op name: (loss closure, params)}; each closure exercises its op once.

    Scalar losses are formed by a fixed random projection so that every
    output element carries a distinct weight.
    """
    def leaf(*shape):
        return Tensor(rng.uniform(-2, 2, size=shape).astype(np.float64), requires_grad=True)

    x, y, v, r = leaf(b, d), leaf(b, d), leaf(d), leaf(b)
    s = leaf()
    idx = rng.integers(0, b, size=max(1, b - 1))
    labels = rng.integers(0, d, size=b)

    def proj(*shape):
        return Tensor(rng.standard_normal(shape))

    wbd, wdb, wb, wd, wbb = proj(b, d), proj(d, b), proj(b), proj(d), proj(b, b)
    wb2d, wb2, wid = proj(b, 2 * d), proj(b, 2), proj(len(idx), d)
    wsum = lambda t, w: dc.sum(dc.mul(t, w))  # noqa: E731
    return {
        "matmul": (lambda: wsum(dc.matmul(x, wdb), wbb), [x]),
        "transpose": (lambda: wsum(dc.transpose(x), wdb), [x]),
        "add": (lambda: wsum(dc.add(x, v), wbd), [x, v]),
        "sub": (lambda: wsum(dc.sub(x, y), wbd), [x, y]),
        "mul": (lambda: wsum(dc.mul(x, s), wbd), [x, s]),
        "neg": (lambda: wsum(dc.neg(x), wbd), [x]),
        "exp": (lambda: wsum(dc.exp(x), wbd), [x]),
        "square": (lambda: wsum(dc.square(x), wbd), [x]),
        "sigmoid": (lambda: wsum(dc.sigmoid(x), wbd), [x]),
        "relu": (lambda: wsum(dc.relu(x), wbd), [x]),
        "sum": (lambda: dc.sum(dc.mul(dc.sum(x, axis=0), wd)), [x]),
        "mean": (lambda: wsum(dc.mean(x, axis=0), wd), [x]),
        "concat_cols": (lambda: wsum(dc.concat_cols([x, y]), wb2d), [x, y]),
        "stack_cols": (lambda: wsum(dc.stack_cols([r, r]), wb2), [r]),
        "col": (lambda: wsum(dc.col(x, d - 1), wb), [x]),
        "row": (lambda: wsum(dc.row(x, b - 1), wd), [x]),
        "take_rows": (lambda: wsum(dc.take_rows(x, idx), wid), [x]),
        "scatter_rows": (lambda: wsum(dc.scatter_rows(y, np.arange(b)[::-1], b), wbd), [y]),
        "scale_rows": (lambda: wsum(dc.scale_rows(x, r), wbd), [x, r]),
        "layer_norm": (lambda: wsum(dc.layer_norm(x, v, dc.neg(v)), wbd), [x, v]),
        "cosine_rows": (lambda: wsum(dc.cosine_rows(x, v), wb), [x, v]),
        "softmax_rows": (lambda: wsum(dc.softmax_rows(x), wbd), [x]),
        "cross_entropy": (lambda: dc.cross_entropy(x, labels), [x]),
    }


def head_case(seed: int = 0, lam: float = 0.5):
    """Composed head loss (task + lam * ortho) with the routing mask held fixed.

    The mask is piecewise constant in the parameters; freezing it keeps
    central differences from straddling a selection boundary.
    """
    B, M, d, L, out_dim = HEAD_SHAPE
    cfg = HopeConfig(M=M, d=d, L=L, out_dim=out_dim, delta=0.0, k_frac=0.5, c_frac=1.0, seed=seed)
    head = HopeHead(cfg, precision="f64")
    rng = np.random.default_rng(seed)
    batch = ViewBatch.from_arrays([rng.standard_normal((B, d)) for _ in range(M)], dtype=np.float64)
    labels = rng.integers(0, out_dim, size=B)
    mask = elastic_select(alignment_scores(head, batch).data, cfg)

    def f():
        logits, _ = forward(head, batch, mask=mask)
        return total_loss(logits, labels, head, lam).total

    return f, head.parameters()


def run_suite(seed: int = 0, b: int = 4, d: int = 3) -> dict:
    """{name: worst relative error} for every op and the composed head, at 64-bit."""
    with dc.precision("f64"):
        cases = op_cases(np.random.default_rng(seed), b, d)
        missing = set(DIFFERENTIABLE_OPS) ^ set(cases)
        if missing:
            raise AssertionError(f"op coverage mismatch: {sorted(missing)}")
        out = {name: dc.grad_check(f, params) for name, (f, params) in cases.items()}
        f, params = head_case(seed)
        out["hope_forward"] = dc.grad_check(f, params)
    return out
