"""HOPE projection head: shared pathway, prototype routing, gated experts, fusion."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, asdict

import numpy as np

from . import diff_core as dc
from .diff_core import Tensor


# keeps head init independent of data generated from the same integer seed
HEAD_STREAM = 0x484F5045


class ConfigError(ValueError):
    pass


@dataclass
class HopeConfig:
    M: int = 4
    d: int = 32
    out_dim: int = 4
    L: int = 2
    delta: float = 0.6
    k_frac: float = 0.5
    c_frac: float = 3.0
    lam: float = 0.5
    tau_init: float = 1.0
    seed: int = 0

    def validate(self) -> "HopeConfig":
        if self.M < 1 or self.d < 1 or self.L < 1 or self.out_dim < 1:
            raise ConfigError(f"M, d, L, out_dim must be >= 1: {self}")
        if not -1 < self.delta < 1:
            raise ConfigError(f"delta must lie in (-1, 1), got {self.delta}")
        if not 0 < self.k_frac <= self.c_frac:
            raise ConfigError(f"need 0 < k_frac <= c_frac, got {self.k_frac}, {self.c_frac}")
        if self.lam < 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")
        if self.tau_init <= 0:
            raise ConfigError(f"tau_init must be > 0, got {self.tau_init}")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "HopeConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown HopeConfig keys: {sorted(unknown)}")
        return cls(**d).validate()

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ViewBatch:
    """Per-view embeddings (B x d each) and their column concatenation."""

    views: list[Tensor]
    all: Tensor

    @classmethod
    def from_arrays(cls, views, dtype=None) -> "ViewBatch":
        ts = [Tensor(np.asarray(v), dtype=dtype or dc.get_dtype()) for v in views]
        return cls(ts, Tensor(np.concatenate([t.data for t in ts], axis=1)))

    @property
    def B(self) -> int:
        return self.views[0].shape[0]

    @property
    def M(self) -> int:
        return len(self.views)


@dataclass
class RoutingState:
    scores: np.ndarray  # B x M
    mask: np.ndarray  # B x M bool
    gates: np.ndarray  # B x M
    k_count: int = 0
    c_count: int = 0
    qual: list = field(default_factory=list)
    stab: list = field(default_factory=list)
    omega: list = field(default_factory=list)


@dataclass
class LossTerms:
    task: Tensor
    ortho: Tensor
    total: Tensor


class MLP:
    """Stack of affine layers with ReLU between them and none at the end."""

    def __init__(self, sizes, rng, dtype):
        self.weights, self.biases = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            bound = 1 / math.sqrt(fan_in)
            w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
            self.weights.append(Tensor(w.astype(dtype), requires_grad=True))
            self.biases.append(Tensor(np.zeros(fan_out, dtype=dtype), requires_grad=True))

    def __call__(self, x: Tensor) -> Tensor:
        n = len(self.weights)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            x = dc.add(dc.matmul(x, dc.transpose(w)), b)
            if i < n - 1:
                x = dc.relu(x)
        return x

    def named_parameters(self, prefix):
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            yield f"{prefix}.{i}.weight", w
            yield f"{prefix}.{i}.bias", b


class Expert:
    """Layer norm (affine) followed by an MLP of width d."""

    def __init__(self, d, L, rng, dtype):
        self.gamma = Tensor(np.ones(d, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(d, dtype=dtype), requires_grad=True)
        self.mlp = MLP([d] * (L + 1), rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.mlp(dc.layer_norm(x, self.gamma, self.beta))

    def named_parameters(self, prefix):
        yield f"{prefix}.ln.gamma", self.gamma
        yield f"{prefix}.ln.beta", self.beta
        yield from self.mlp.named_parameters(f"{prefix}.mlp")


class HopeHead:
    def __init__(self, cfg: HopeConfig, precision: str = "f32", shared: bool = True):
        cfg.validate()
        self.cfg = cfg
        self.precision = precision
        dtype = dc._PRECISIONS[precision]
        rng = np.random.default_rng([cfg.seed, HEAD_STREAM])
        M, d, L = cfg.M, cfg.d, cfg.L
        p = rng.standard_normal((M, d))
        p /= np.linalg.norm(p, axis=1, keepdims=True)
        self.prototypes = Tensor(p.astype(dtype), requires_grad=True)
        self.shared = MLP([M * d] + [d] * L, rng, dtype) if shared else None
        self.experts = [Expert(d, L, rng, dtype) for _ in range(M)]
        self.theta_tau = Tensor(np.asarray(math.log(cfg.tau_init), dtype=dtype), requires_grad=True)
        bound = 1 / math.sqrt(2 * d)
        self.fusion_w = Tensor(rng.uniform(-bound, bound, (cfg.out_dim, 2 * d)).astype(dtype),
                               requires_grad=True)
        self.fusion_b = Tensor(np.zeros(cfg.out_dim, dtype=dtype), requires_grad=True)

    @property
    def tau(self) -> float:
        return float(np.exp(self.theta_tau.data))

    def named_parameters(self):
        yield "prototypes", self.prototypes
        if self.shared is not None:
            yield from self.shared.named_parameters("shared")
        for m, e in enumerate(self.experts):
            yield from e.named_parameters(f"dynamic.{m}")
        yield "theta_tau", self.theta_tau
        yield "fusion.weight", self.fusion_w
        yield "fusion.bias", self.fusion_b

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def zero_grad(self):
        for t in self.parameters():
            t.grad = None

    def forward(self, batch: ViewBatch, elastic: bool = True, dense: bool = False):
        return forward(self, batch, elastic=elastic, dense=dense)


def init_head(cfg: HopeConfig, precision: str = "f32", shared: bool = True) -> HopeHead:
    return HopeHead(cfg, precision=precision, shared=shared)


# ---------------------------------------------------------------- pathways


def _check_batch(head: HopeHead, batch: ViewBatch):
    cfg = head.cfg
    if batch.M != cfg.M or batch.all.shape[1] != cfg.M * cfg.d:
        raise dc.ShapeError(f"batch has {batch.M} views of width {batch.views[0].shape[1]}, "
                            f"head expects {cfg.M} x {cfg.d}")


def shared_forward(head: HopeHead, batch: ViewBatch) -> Tensor:
    _check_batch(head, batch)
    if head.shared is None:
        return Tensor(np.zeros((batch.B, head.cfg.d), dtype=batch.all.dtype))
    return head.shared(batch.all)


def alignment_scores(head: HopeHead, batch: ViewBatch) -> Tensor:
    _check_batch(head, batch)
    cols = [dc.cosine_rows(v, dc.row(head.prototypes, m)) for m, v in enumerate(batch.views)]
    return dc.stack_cols(cols)


def selection_counts(B: int, M: int, k_frac: float, c_frac: float) -> tuple[int, int]:
    """Integer stability floor and capacity ceiling for a batch of B nodes."""
    avg = B / M
    k = max(1, math.floor(k_frac * avg + 0.5))
    c = max(k, math.floor(c_frac * avg + 0.5))
    return min(k, B), min(c, B)


def _top(order_scores: np.ndarray, members: np.ndarray, n: int) -> np.ndarray:
    # score descending, then index ascending
    members = np.asarray(members, dtype=np.intp)
    order = np.lexsort((members, -order_scores[members]))
    return members[order[:n]]


def elastic_select_detailed(scores, delta: float, k_count: int, c_count: int):
    """Apply the quality, stability and capacity criteria column by column.

    Returns ``(mask, qual, stab, omega)`` where the last three are per-expert
    lists of sorted node-index arrays.
    """
    scores = np.asarray(scores)
    B, M = scores.shape
    mask = np.zeros((B, M), dtype=bool)
    qual, stab, omega = [], [], []
    everyone = np.arange(B)
    for m in range(M):
        s = scores[:, m]
        q = np.flatnonzero(s > delta)
        st = _top(s, everyone, k_count)
        om = np.union1d(q, st)
        mask[_top(s, om, c_count), m] = True
        qual.append(q)
        stab.append(np.sort(st))
        omega.append(om)
    return mask, qual, stab, omega


def elastic_select(scores, cfg: HopeConfig) -> np.ndarray:
    scores = np.asarray(scores)
    k, c = selection_counts(scores.shape[0], scores.shape[1], cfg.k_frac, cfg.c_frac)
    return elastic_select_detailed(scores, cfg.delta, k, c)[0]


def gate_weights(scores: Tensor, mask: np.ndarray, head: HopeHead) -> Tensor:
    inv_tau = dc.exp(dc.neg(head.theta_tau))
    g = dc.sigmoid(dc.mul(scores, inv_tau))
    return dc.mul(g, Tensor(np.asarray(mask, dtype=scores.dtype)))


def dynamic_forward(head: HopeHead, batch: ViewBatch, gates: Tensor, dense: bool = False) -> Tensor:
    """Gate-weighted sum of expert outputs.

    Sparse mode runs expert m only on rows whose gate for m is nonzero;
    dense mode runs every expert on every row.
    """
    B, d = batch.B, head.cfg.d
    out = None
    for m, (expert, view) in enumerate(zip(head.experts, batch.views)):
        g = dc.col(gates, m)
        if dense:
            term = dc.scale_rows(expert(view), g)
        else:
            idx = np.flatnonzero(gates.data[:, m] != 0)
            if idx.size == 0:
                continue
            y = expert(dc.take_rows(view, idx))
            term = dc.scatter_rows(dc.scale_rows(y, dc.take_rows(g, idx)), idx, B)
        out = term if out is None else dc.add(out, term)
    if out is None:
        return Tensor(np.zeros((B, d), dtype=batch.all.dtype))
    return out


def fuse(head: HopeHead, z_s: Tensor, z_d: Tensor) -> Tensor:
    d = head.cfg.d
    if z_s.shape[1:] != (d,) or z_d.shape != z_s.shape:
        raise dc.ShapeError(f"fuse expects two B x {d} inputs, got {z_s.shape} and {z_d.shape}")
    z = dc.concat_cols([z_s, z_d])
    return dc.add(dc.matmul(z, dc.transpose(head.fusion_w)), head.fusion_b)


def route(head: HopeHead, batch: ViewBatch, elastic: bool = True):
    """Scores, detached mask and gates for one batch."""
    cfg = head.cfg
    scores = alignment_scores(head, batch)
    k, c = selection_counts(batch.B, cfg.M, cfg.k_frac, cfg.c_frac)
    if elastic:
        mask, qual, stab, omega = elastic_select_detailed(scores.data, cfg.delta, k, c)
    else:
        mask = scores.data > cfg.delta
        qual = [np.flatnonzero(mask[:, m]) for m in range(cfg.M)]
        stab, omega = [np.array([], dtype=np.intp)] * cfg.M, qual
    gates = gate_weights(scores, mask, head)
    state = RoutingState(scores.data.copy(), mask, gates.data.copy(), k, c, qual, stab, omega)
    return gates, state


def forward(head: HopeHead, batch: ViewBatch, elastic: bool = True, dense: bool = False,
            mask: np.ndarray | None = None):
    """Logits and routing state.  ``mask`` overrides selection (held fixed in gradient checks)."""
    z_s = shared_forward(head, batch)
    if mask is None:
        gates, state = route(head, batch, elastic=elastic)
    else:
        scores = alignment_scores(head, batch)
        gates = gate_weights(scores, mask, head)
        state = RoutingState(scores.data.copy(), np.asarray(mask, bool), gates.data.copy())
    z_d = dynamic_forward(head, batch, gates, dense=dense)
    return fuse(head, z_s, z_d), state


def ortho_loss(head: HopeHead) -> Tensor:
    """Sum of squared cosines between distinct prototypes."""
    P = head.prototypes
    M = P.shape[0]
    total = None
    for i in range(M):
        cos_i = dc.cosine_rows(P, dc.row(P, i))
        off = np.ones(M, dtype=P.dtype)
        off[i] = 0
        t = dc.sum(dc.mul(dc.square(cos_i), Tensor(off)))
        total = t if total is None else dc.add(total, t)
    return total


def total_loss(logits: Tensor, labels, head: HopeHead, lam: float) -> LossTerms:
    task = dc.cross_entropy(logits, labels)
    ortho = ortho_loss(head)
    total = dc.add(task, dc.mul(ortho, Tensor(np.asarray(lam, dtype=task.dtype))))
    return LossTerms(task, ortho, total)


def max_offdiag_cosine(prototypes: np.ndarray) -> float:
    P = np.asarray(prototypes, dtype=np.float64)
    if P.shape[0] < 2:
        return 0.0
    Pn = P / np.linalg.norm(P, axis=1, keepdims=True)
    C = Pn @ Pn.T
    np.fill_diagonal(C, 0)
    return float(np.abs(C).max())
