"""Seed-averaged experiments shared by the scripts and the acceptance suite."""
from __future__ import annotations

import time
from dataclasses import replace

import numpy as np

from .head import HopeConfig
from .synthetic import DatasetSpec, generate
from .train import SWEEP_PARAMS, TrainConfig, Variant, train

SEEDS = tuple(range(1, 11))
DELTA_GRID = (0.0, 0.2, 0.4, 0.6, 0.8, 0.95)
LAMBDA_GRID = (0.0, 0.25, 0.5, 1.0, 2.0)


def _dataset(spec: DatasetSpec, seed: int):
    return generate(replace(spec, seed=seed))


def run_ablation(seeds=SEEDS, spec: DatasetSpec | None = None, cfg: HopeConfig | None = None,
                 tcfg: TrainConfig | None = None, with_linear=True) -> dict:
    """{name: {"val": [acc per seed], "max_cos": [...], "load_var": [...]}} over all variants.

    Data and head share the run seed.  ``load_var`` is the variance of the
    final per-expert training load fractions (None for the linear head).
    """
    spec, cfg = spec or DatasetSpec(), cfg or HopeConfig()
    names = [v.value for v in Variant] + (["linear"] if with_linear else [])
    out = {n: {"val": [], "max_cos": [], "load_var": []} for n in names}
    t0 = time.perf_counter()
    for s in seeds:
        ds = _dataset(spec, s)
        c = replace(cfg, seed=s)
        for n in names:
            model, rep = train("linear", None, ds, c, tcfg) if n == "linear" else train("hope", n, ds, c, tcfg)
            out[n]["val"].append(rep.final["val"]["accuracy"])
            last = rep.epochs[-1]
            out[n]["max_cos"].append(last.get("max_proto_cosine"))
            lf = last.get("load_fractions")
            out[n]["load_var"].append(None if lf is None else float(np.var(lf)))
    out["_seconds"] = time.perf_counter() - t0
    return out


def run_sensitivity(param: str, values, seeds=SEEDS, spec: DatasetSpec | None = None,
                    cfg: HopeConfig | None = None, tcfg: TrainConfig | None = None) -> dict:
    """{"acc": array (n_seeds, n_values) of val accuracy, "interior": [bool per seed]}."""
    spec, cfg = spec or DatasetSpec(), cfg or HopeConfig()
    field = SWEEP_PARAMS[param]
    t0 = time.perf_counter()
    acc = np.zeros((len(seeds), len(values)))
    for i, s in enumerate(seeds):
        ds = _dataset(spec, s)
        for j, v in enumerate(values):
            c = replace(cfg, seed=s, **{field: v}).validate()
            acc[i, j] = train("hope", Variant.full, ds, c, tcfg)[1].final["val"]["accuracy"]
    best = acc.max(axis=1, keepdims=True)
    # interior maximum: the best value is attained strictly inside the grid, not at an endpoint
    at_end = (acc[:, 0] == best[:, 0]) | (acc[:, -1] == best[:, 0])
    return {"values": list(values), "acc": acc, "interior": (~at_end).tolist(),
            "_seconds": time.perf_counter() - t0}
