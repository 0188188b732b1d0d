"""Training loop, baselines, ablation variants and routing diagnostics."""
from __future__ import annotations

import enum
import hashlib
import json
import math
import time
from dataclasses import dataclass, field, replace, asdict

import numpy as np

from . import diff_core as dc
from .diff_core import Tensor
from .head import (HEAD_STREAM, HopeConfig, HopeHead, MLP, RoutingState, ViewBatch, dynamic_forward, forward,
                   fuse, max_offdiag_cosine, ortho_loss, shared_forward)
from .synthetic import SyntheticDataset, make_view_batch, split

LOAD_BALANCE_WEIGHT = 0.5
ROUTER_TOP_K = 2


class Variant(str, enum.Enum):
    full = "full"
    no_shared_pathway = "no_shared_pathway"
    no_prototype_experts = "no_prototype_experts"
    no_elastic_capacity = "no_elastic_capacity"
    no_ortho_loss = "no_ortho_loss"


class DivergenceError(RuntimeError):
    def __init__(self, msg, record):
        super().__init__(msg)
        self.record = record


# ---------------------------------------------------------------- optimizer


@dataclass
class OptimState:
    m: list
    v: list
    step: int = 0
    lr: float = 1e-3
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(params, lr=1e-3, weight_decay=0.0, beta1=0.9, beta2=0.999, eps=1e-8) -> OptimState:
    return OptimState([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params],
                      0, lr, weight_decay, beta1, beta2, eps)


def adam_step(params, grads, state: OptimState) -> OptimState:
    """Bias-corrected Adam update, in place on ``params[i].data``."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimizer state have different lengths")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** t
    c2 = 1 - b2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.data.shape}")
        if state.weight_decay:
            g = g + state.weight_decay * p.data
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        upd = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data -= upd.astype(p.data.dtype)
    return state


# ---------------------------------------------------------------- models


class LinearBaselineHead:
    """Single affine map from the concatenated views to the logits."""

    def __init__(self, cfg: HopeConfig, precision="f32"):
        dtype = dc._PRECISIONS[precision]
        rng = np.random.default_rng([cfg.seed, HEAD_STREAM])
        fan_in = cfg.M * cfg.d
        bound = 1 / math.sqrt(fan_in)
        self.cfg = cfg
        self.weight = Tensor(rng.uniform(-bound, bound, (cfg.out_dim, fan_in)).astype(dtype),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(cfg.out_dim, dtype=dtype), requires_grad=True)

    def named_parameters(self):
        yield "linear.weight", self.weight
        yield "linear.bias", self.bias

    def parameters(self):
        return [self.weight, self.bias]

    def __call__(self, batch: ViewBatch):
        return dc.add(dc.matmul(batch.all, dc.transpose(self.weight)), self.bias)


class VanillaTopKRouter:
    """MLP router over the concatenated views choosing the top-2 experts per node."""

    def __init__(self, cfg: HopeConfig, rng, dtype, top_k=ROUTER_TOP_K):
        self.top_k = min(top_k, cfg.M)
        self.mlp = MLP([cfg.M * cfg.d, cfg.d, cfg.M], rng, dtype)

    def named_parameters(self):
        yield from self.mlp.named_parameters("router")

    def route(self, batch: ViewBatch):
        probs = dc.softmax_rows(self.mlp(batch.all))
        P = probs.data
        B, M = P.shape
        order = np.lexsort((np.broadcast_to(np.arange(M), (B, M)), -P), axis=1)
        mask = np.zeros((B, M), dtype=bool)
        np.put_along_axis(mask, order[:, :self.top_k], True, axis=1)
        gates = dc.mul(probs, Tensor(mask.astype(P.dtype)))
        # Switch-style balance loss: M * sum_m (dispatch share_m * mean prob_m)
        share = mask.sum(axis=0) / (B * self.top_k)
        aux = dc.mul(dc.sum(dc.mul(dc.mean(probs, axis=0), Tensor(share.astype(P.dtype)))),
                     Tensor(np.asarray(M, dtype=P.dtype)))
        state = RoutingState(P.copy(), mask, gates.data.copy(), self.top_k, self.top_k)
        return gates, state, aux


class HopeModel:
    """A HOPE head configured for one ablation variant."""

    def __init__(self, cfg: HopeConfig, variant: Variant = Variant.full, precision="f32"):
        self.cfg = cfg
        self.variant = Variant(variant)
        self.head = HopeHead(cfg, precision=precision,
                             shared=self.variant is not Variant.no_shared_pathway)
        self.router = None
        if self.variant is Variant.no_prototype_experts:
            rng = np.random.default_rng([cfg.seed, HEAD_STREAM, 1])
            self.router = VanillaTopKRouter(cfg, rng, dc._PRECISIONS[precision])

    @property
    def lam(self) -> float:
        if self.variant in (Variant.no_ortho_loss, Variant.no_prototype_experts):
            return 0.0
        return self.cfg.lam

    def named_parameters(self):
        for name, t in self.head.named_parameters():
            if name == "prototypes" and self.router is not None:
                continue
            yield name, t
        if self.router is not None:
            yield from self.router.named_parameters()

    def parameters(self):
        return [t for _, t in self.named_parameters()]

    def __call__(self, batch: ViewBatch):
        """Return (logits, routing, aux_loss or None)."""
        if self.router is None:
            logits, routing = forward(self.head, batch,
                                      elastic=self.variant is not Variant.no_elastic_capacity)
            return logits, routing, None
        gates, routing, aux = self.router.route(batch)
        z_s = shared_forward(self.head, batch)
        z_d = dynamic_forward(self.head, batch, gates)
        return fuse(self.head, z_s, z_d), routing, aux


class LinearModel:
    def __init__(self, cfg: HopeConfig, precision="f32"):
        self.cfg = cfg
        self.variant = None
        self.head = LinearBaselineHead(cfg, precision)
        self.lam = 0.0

    def named_parameters(self):
        return self.head.named_parameters()

    def parameters(self):
        return self.head.parameters()

    def __call__(self, batch):
        return self.head(batch), None, None


def build_model(head_kind: str, variant, cfg: HopeConfig, precision="f32"):
    if head_kind == "linear":
        return LinearModel(cfg, precision)
    if head_kind == "hope":
        return HopeModel(cfg, Variant(variant or "full"), precision)
    raise ValueError(f"unknown head kind {head_kind!r}")


def compute_loss(model, logits, labels, aux):
    """(total, task, ortho) tensors for one forward pass."""
    task = dc.cross_entropy(logits, labels)
    dtype = task.dtype
    if isinstance(model, HopeModel) and model.router is None:
        ortho = ortho_loss(model.head)
    else:
        ortho = Tensor(np.asarray(0.0, dtype=dtype))
    total = dc.add(task, dc.mul(ortho, Tensor(np.asarray(model.lam, dtype=dtype))))
    if aux is not None:
        total = dc.add(total, dc.mul(aux, Tensor(np.asarray(LOAD_BALANCE_WEIGHT, dtype=dtype))))
    return total, task, ortho


# ---------------------------------------------------------------- metrics


def classification_metrics(pred, labels, cluster_of=None, is_tail=None, num_classes=None) -> dict:
    pred = np.asarray(pred)
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("cannot evaluate an empty split")
    num_classes = num_classes or int(max(pred.max(), labels.max()) + 1)
    correct = pred == labels
    f1s = []
    for c in range(num_classes):
        tp = np.sum((pred == c) & (labels == c))
        fp = np.sum((pred == c) & (labels != c))
        fn = np.sum((pred != c) & (labels == c))
        if tp + fp + fn == 0:
            continue
        f1s.append(2 * tp / (2 * tp + fp + fn))
    out = {"accuracy": float(correct.mean()), "macro_f1": float(np.mean(f1s))}
    if cluster_of is not None:
        cluster_of = np.asarray(cluster_of)
        out["per_cluster_accuracy"] = {int(c): float(correct[cluster_of == c].mean())
                                       for c in np.unique(cluster_of)}
        out["per_cluster_count"] = {int(c): int(np.sum(cluster_of == c)) for c in np.unique(cluster_of)}
    if is_tail is not None:
        is_tail = np.asarray(is_tail, dtype=bool)
        head_acc = float(correct[~is_tail].mean()) if (~is_tail).any() else float("nan")
        tail_acc = float(correct[is_tail].mean()) if is_tail.any() else float("nan")
        out["head_accuracy"] = head_acc
        out["tail_accuracy"] = tail_acc
        out["tail_head_gap"] = head_acc - tail_acc
    return out


def predict(model, batch: ViewBatch):
    logits, routing, _ = model(batch)
    return logits.data.argmax(axis=1), routing


def evaluate(model, ds: SyntheticDataset, indices) -> dict:
    indices = np.asarray(indices)
    if indices.size == 0:
        raise ValueError("cannot evaluate an empty split")
    pred, routing = predict(model, make_view_batch(ds, indices, dtype=_model_dtype(model)))
    m = classification_metrics(pred, ds.labels[indices], ds.cluster_of[indices],
                               ds.is_tail[indices], ds.spec.num_classes)
    if routing is not None:
        m["routing"] = routing_diagnostics(routing)
    return m


def _model_dtype(model):
    return model.parameters()[0].dtype


def routing_diagnostics(routing: RoutingState) -> dict:
    mask = np.asarray(routing.mask, dtype=bool)
    B, M = mask.shape
    counts = mask.sum(axis=0)
    active = mask.sum(axis=1)
    return {
        "counts": [int(c) for c in counts],
        "load_fractions": [float(c / B) for c in counts],
        "mean_active_experts": float(active.mean()),
        "rho": float(active.mean() / M),
        "dead_nodes": [int(i) for i in np.flatnonzero(active == 0)],
        "dead_rate": float(np.mean(active == 0)),
        "k_count": int(routing.k_count),
        "c_count": int(routing.c_count),
    }


def parameter_checksum(model) -> str:
    h = hashlib.sha256()
    for name, t in model.named_parameters():
        h.update(name.encode())
        h.update(np.ascontiguousarray(t.data).tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------- training


@dataclass
class TrainConfig:
    epochs: int = 300
    lr: float = 1e-3
    weight_decay: float = 0.0
    train_frac: float = 0.6
    val_frac: float = 0.2
    split_seed: int = 0
    precision: str = "f32"


@dataclass
class TrainReport:
    head_kind: str
    variant: str | None
    seed: int
    lam: float
    epochs: list = field(default_factory=list)
    final: dict = field(default_factory=dict)

    def to_jsonl(self, path=None, with_timing=True) -> str:
        lines = []
        for rec in self.epochs:
            r = dict(rec) if with_timing else {k: v for k, v in rec.items() if k != "wall_clock"}
            lines.append(json.dumps({"type": "epoch", **r}, sort_keys=True))
        final = {"type": "final", "head_kind": self.head_kind, "variant": self.variant,
                 "seed": self.seed, "lambda": self.lam, **self.final}
        if not with_timing:
            final.pop("wall_clock_total", None)
        lines.append(json.dumps(final, sort_keys=True))
        text = "\n".join(lines) + "\n"
        if path is not None:
            with open(path, "w") as f:
                f.write(text)
        return text


def _epoch_record(epoch, model, total, task, ortho, logits, labels, routing, val_acc, secs):
    rec = {
        "epoch": epoch,
        "total_loss": float(total.data),
        "task_loss": float(task.data),
        "ortho_loss": float(ortho.data),
        "ortho_weighted": float(model.lam * ortho.data),
        "train_accuracy": float((logits.data.argmax(axis=1) == labels).mean()),
        "val_accuracy": val_acc,
        "wall_clock": secs,
    }
    if routing is not None:
        diag = routing_diagnostics(routing)
        rec["load_fractions"] = diag["load_fractions"]
        rec["rho"] = diag["rho"]
        rec["dead_rate"] = diag["dead_rate"]
    if isinstance(model, HopeModel):
        rec["max_proto_cosine"] = max_offdiag_cosine(model.head.prototypes.data)
        rec["tau"] = model.head.tau
    return rec


def train(head_kind: str, variant, ds: SyntheticDataset, cfg: HopeConfig,
          tcfg: TrainConfig | None = None, callback=None, model=None):
    """Full-batch training on the train split.  Returns (model, report).

    ``callback(epoch, routing)`` is invoked after every training forward pass.
    """
    tcfg = tcfg or TrainConfig()
    model = model or build_model(head_kind, variant, cfg, tcfg.precision)
    params = model.parameters()
    opt = adam_init(params, lr=tcfg.lr, weight_decay=tcfg.weight_decay)
    tr, va, te, _ = split(ds, tcfg.train_frac, tcfg.val_frac, tcfg.split_seed)
    dtype = _model_dtype(model)
    batch = make_view_batch(ds, tr, dtype=dtype)
    vbatch = make_view_batch(ds, va, dtype=dtype)
    labels = ds.labels[tr]
    report = TrainReport(head_kind, None if variant is None else Variant(variant).value,
                         cfg.seed, model.lam)

    def val_acc():
        return float((predict(model, vbatch)[0] == ds.labels[va]).mean())

    t_total = time.perf_counter()
    for epoch in range(tcfg.epochs + 1):
        t0 = time.perf_counter()
        logits, routing, aux = model(batch)
        if callback is not None and routing is not None:
            callback(epoch, routing)
        total, task, ortho = compute_loss(model, logits, labels, aux)
        if not np.isfinite(total.data):
            rec = {"epoch": epoch, "total_loss": float(total.data), "task_loss": float(task.data),
                   "ortho_loss": float(ortho.data)}
            raise DivergenceError(f"non-finite loss at epoch {epoch}", rec)
        if epoch > 0:
            for p in params:
                p.grad = None
            dc.backward(total)
            adam_step(params, [p.grad for p in params], opt)
        rec = _epoch_record(epoch, model, total, task, ortho, logits, labels, routing,
                            val_acc(), time.perf_counter() - t0)
        report.epochs.append(rec)

    final = {}
    for name, idx in (("train", tr), ("val", va), ("test", te)):
        if len(idx):
            m = evaluate(model, ds, idx)
            final[name] = m
    final["max_proto_cosine"] = report.epochs[-1].get("max_proto_cosine")
    final["wall_clock_total"] = time.perf_counter() - t_total
    final["epochs"] = tcfg.epochs
    report.final = final
    return model, report


# ---------------------------------------------------------------- sweeps & scaling

SWEEP_PARAMS = {"lambda": "lam", "delta": "delta", "k_frac": "k_frac", "c_frac": "c_frac"}


def sweep(param_name: str, values, ds: SyntheticDataset, base: HopeConfig,
          tcfg: TrainConfig | None = None, seeds=(None,)):
    """Train once per (value, seed).  Returns {value: [TrainReport, ...]}."""
    if param_name not in SWEEP_PARAMS:
        raise ValueError(f"cannot sweep {param_name!r}; choose from {sorted(SWEEP_PARAMS)}")
    values = list(values)
    if not values:
        raise ValueError("sweep needs at least one value")
    out = {}
    for v in values:
        reports = []
        for s in seeds:
            cfg = replace(base, **{SWEEP_PARAMS[param_name]: v})
            if s is not None:
                cfg = replace(cfg, seed=s)
            reports.append(train("hope", Variant.full, ds, cfg.validate(), tcfg)[1])
        out[v] = reports
    return out


def bench_scaling(cfg: HopeConfig, batch_sizes, reps: int = 20, warmup: int = 3, seed: int = 0):
    """Median forward+backward wall clock per batch size, on random views."""
    batch_sizes = list(batch_sizes)
    if batch_sizes != sorted(batch_sizes):
        raise ValueError("batch_sizes must be ascending")
    head = HopeHead(cfg)
    rng = np.random.default_rng(seed)
    labels_rng = np.random.default_rng(seed + 1)
    rows = []
    for B in batch_sizes:
        views = [rng.standard_normal((B, cfg.d)).astype(np.float32) for _ in range(cfg.M)]
        batch = ViewBatch.from_arrays(views, dtype=np.float32)
        labels = labels_rng.integers(0, cfg.out_dim, size=B)
        times = []
        for i in range(warmup + reps):
            t0 = time.perf_counter()
            logits, _ = forward(head, batch)
            loss = dc.cross_entropy(logits, labels)
            head.zero_grad()
            dc.backward(loss)
            dt = time.perf_counter() - t0
            if i >= warmup:
                times.append(dt)
        rows.append({"B": B, "median_seconds": float(np.median(times))})
    return rows


def report_summary(reports) -> dict:
    """Mean/std of final val/test accuracy over a list of reports."""
    out = {}
    for split_name in ("train", "val", "test"):
        accs = [r.final[split_name]["accuracy"] for r in reports if split_name in r.final]
        if accs:
            out[f"{split_name}_accuracy_mean"] = float(np.mean(accs))
            out[f"{split_name}_accuracy_std"] = float(np.std(accs))
    out["n_runs"] = len(reports)
    return out
