"""Acceptance criteria: each test prints one PASS/FAIL line, then asserts it."""
import time

import numpy as np
import pytest

from hope import diff_core as dc
from hope.checkpoint import load_checkpoint, save_checkpoint
from hope.gradcheck import DIFFERENTIABLE_OPS, run_suite
from hope.head import (HopeConfig, ViewBatch, elastic_select, elastic_select_detailed, forward, init_head,
                       max_offdiag_cosine, ortho_loss, selection_counts)
from hope.synthetic import load_dataset, save_dataset, split
from hope.train import adam_init, adam_step, bench_scaling, evaluate, train
from oracles import brute_force_select

VARIANTS = ("no_shared_pathway", "no_prototype_experts", "no_elastic_capacity", "no_ortho_loss")


def test_c01_gradient_correctness(acceptance):
    t0 = time.perf_counter()
    errs = run_suite(seed=0)
    secs = time.perf_counter() - t0
    worst = max(errs, key=errs.get)
    covered = set(errs) == set(DIFFERENTIABLE_OPS) | {"hope_forward"}
    ok = covered and all(e < 1e-4 for e in errs.values()) and secs < 60
    assert acceptance(1, ok, f"{len(errs)} checks, worst {worst}={errs[worst]:.2e} (< 1e-4), {secs:.1f}s (< 60s)")


def test_c02_routing_oracle(acceptance):
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    mismatches = 0
    for i in range(1000):
        B, M = int(rng.integers(1, 33)), int(rng.integers(1, 7))
        scores = rng.uniform(-1, 1, (B, M))
        if i % 2:  # coarse grid: many exact ties and exact-threshold scores
            scores = np.round(scores * 4) / 4
        k_frac = float(rng.uniform(0.05, 1.5))
        cfg = HopeConfig(M=M, delta=float(rng.choice([-0.5, 0.0, 0.25, 0.5, 0.75])), k_frac=k_frac,
                         c_frac=k_frac + float(rng.uniform(0, 3)))
        k, c = selection_counts(B, M, cfg.k_frac, cfg.c_frac)
        mismatches += not np.array_equal(elastic_select(scores, cfg), brute_force_select(scores, cfg.delta, k, c))
    secs = time.perf_counter() - t0
    assert acceptance(2, mismatches == 0 and secs < 60, f"1000 instances, {mismatches} mismatches, {secs:.1f}s")


def test_c03_noise_rejection(acceptance):
    cases = bad = 0
    offsets = np.array([-1e-6, 0.0, 1e-6])
    for delta in (-0.3, 0.0, 0.2, 0.6, 0.95):
        for B in range(1, 17):
            for M in (1, 2, 3, 4):
                for k_frac, c_frac in ((0.1, 1.0), (0.5, 3.0), (1.0, 1.0), (2.0, 4.0)):
                    rng = np.random.default_rng([B, M, int(delta * 100) + 100, int(k_frac * 10)])
                    k, c = selection_counts(B, M, k_frac, c_frac)
                    # straddle delta: columns alternate between all-below (-1e-6 or exactly delta,
                    # which fails the strict test) and mixed (+1e-6 entries present)
                    scores = delta + rng.choice(offsets, size=(B, M))
                    below_cols = np.arange(M) % 2 == 0
                    scores[:, below_cols] = np.minimum(scores[:, below_cols], delta)
                    mask = elastic_select_detailed(scores, delta, k, c)[0]
                    for m in np.flatnonzero((scores <= delta).all(axis=0)):
                        cases += 1
                        bad += int(mask[:, m].sum() != k)
    assert acceptance(3, bad == 0 and cases > 0, f"{cases} all-below-delta columns, {bad} with popcount != K_count")


def test_c04_floor_and_ceiling(acceptance, default_run):
    log = default_run["log"]
    ok = log["forwards"] == 301 and not log["violations"]
    assert acceptance(4, ok, f"{log['forwards']} training forwards checked, {len(log['violations'])} violations")


def test_c05_sparse_dense(acceptance):
    rng = np.random.default_rng(5)
    worst = 0.0
    for i in range(100):
        M, d, B = int(rng.integers(1, 6)), int(rng.integers(2, 17)), int(rng.integers(1, 65))
        cfg = HopeConfig(M=M, d=d, out_dim=int(rng.integers(2, 6)), delta=float(rng.uniform(-0.5, 0.8)),
                         seed=i)
        head = init_head(cfg)
        batch = ViewBatch.from_arrays([rng.standard_normal((B, d)) for _ in range(M)], dtype=np.float32)
        sparse, _ = forward(head, batch)
        dense, _ = forward(head, batch, dense=True)
        worst = max(worst, float(np.abs(sparse.data - dense.data).max()))
    assert acceptance(5, worst < 1e-6, f"100 instances, max |sparse - dense| = {worst:.2e} (< 1e-6)")


def test_c06_orthogonality(acceptance):
    finals = []
    for seed in range(1, 11):
        head = init_head(HopeConfig(M=4, d=16, seed=seed))
        st = adam_init([head.prototypes])
        for _ in range(500):
            head.prototypes.grad = None
            dc.backward(ortho_loss(head))
            adam_step([head.prototypes], [head.prototypes.grad], st)
        finals.append(max_offdiag_cosine(head.prototypes.data))
    ortho = init_head(HopeConfig(M=4, d=16), precision="f64")
    ortho.prototypes.data = np.linalg.qr(np.random.default_rng(0).standard_normal((16, 4)))[0].T.copy()
    lo = abs(float(ortho_loss(ortho).data))
    ok = max(finals) < 0.05 and lo < 1e-7
    assert acceptance(6, ok, f"worst max|cos| over seeds 1-10 = {max(finals):.4f} (< 0.05); "
                             f"L_o(orthonormal) = {lo:.1e} (< 1e-7)")


def test_c07_ablation_ordering(acceptance, ablation_runs):
    means = {k: float(np.mean(v["val"])) for k, v in ablation_runs.items() if not k.startswith("_")}
    secs = ablation_runs["_seconds"]
    beats = all(means["full"] > means[v] for v in VARIANTS)
    worst = min(VARIANTS, key=means.get)
    ok = beats and worst == "no_prototype_experts" and secs < 600
    detail = ", ".join(f"{v}={means[v]:.4f}" for v in ("full",) + VARIANTS)
    assert acceptance(7, ok, f"mean val acc seeds 1-10: {detail}; worst ablation {worst}; {secs:.0f}s (< 600s)")


def test_c08_linear_margin(acceptance, ablation_runs):
    full, lin = np.mean(ablation_runs["full"]["val"]), np.mean(ablation_runs["linear"]["val"])
    ok = full - lin >= 0.05
    assert acceptance(8, ok, f"full {full:.4f} - linear {lin:.4f} = {100 * (full - lin):.2f} points (>= 5)")


def test_no_ortho_prototypes_stay_more_correlated(ablation_runs):
    full = np.mean(ablation_runs["full"]["max_cos"])
    no_ortho = np.mean(ablation_runs["no_ortho_loss"]["max_cos"])
    print(f"\nmean final max|cos|: full {full:.4f}, no_ortho_loss {no_ortho:.4f}")
    assert no_ortho > full


def test_no_elastic_has_higher_load_variance(ablation_runs):
    # the default spec has a noise view; compared seed by seed
    full, flat = ablation_runs["full"]["load_var"], ablation_runs["no_elastic_capacity"]["load_var"]
    print(f"\nfinal load variance per seed: full {full}, no_elastic_capacity {flat}")
    assert all(b > a for a, b in zip(full, flat))


def test_c09_scaling(acceptance):
    t0 = time.perf_counter()
    rows = bench_scaling(HopeConfig(M=4, d=64), [256, 512, 1024, 2048], reps=20, warmup=3)
    secs = time.perf_counter() - t0
    ratios = [b["median_seconds"] / a["median_seconds"] for a, b in zip(rows, rows[1:])]
    ok = all(r <= 2.5 for r in ratios) and secs < 120
    assert acceptance(9, ok, "doubling ratios " + ", ".join(f"{r:.3f}" for r in ratios)
                      + f" (<= 2.5), {secs:.0f}s (< 120s)")


def test_c10_sensitivity_shape(acceptance, sensitivity_runs):
    parts, ok = [], True
    secs = sum(r["_seconds"] for r in sensitivity_runs.values())
    for name, r in sensitivity_runs.items():
        n = sum(r["interior"])
        ok &= n > len(r["interior"]) / 2
        mean = r["acc"].mean(axis=0)
        parts.append(f"{name}: interior max in {n}/10 seeds, mean acc "
                     + "/".join(f"{a:.3f}" for a in mean))
    ok &= secs < 900
    assert acceptance(10, ok, "; ".join(parts) + f"; {secs:.0f}s (< 900s)")


def test_c11_persistence(acceptance, default_run, tmp_path):
    ds, model, report = default_run["ds"], default_run["model"], default_run["report"]
    p, q = tmp_path / "a.hgsb", tmp_path / "b.hgsb"
    save_dataset(ds, p)
    save_dataset(load_dataset(p), q)
    data_ok = p.read_bytes() == q.read_bytes()
    c1, c2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(model, c1)
    back = load_checkpoint(c1)
    save_checkpoint(back, c2)
    ckpt_ok = c1.read_bytes() == c2.read_bytes()
    tr, va, te, _ = split(load_dataset(p), 0.6, 0.2, 0)
    diffs = []
    for name, idx in (("train", tr), ("val", va), ("test", te)):
        got = evaluate(back, load_dataset(p), idx)
        for key in ("accuracy", "macro_f1", "tail_accuracy", "head_accuracy"):
            diffs.append(abs(got[key] - report.final[name][key]))
    ok = data_ok and ckpt_ok and max(diffs) <= 1e-9
    assert acceptance(11, ok, f"dataset bit-exact={data_ok}, checkpoint bit-exact={ckpt_ok}, "
                              f"max reload metric diff {max(diffs):.1e} (<= 1e-9)")


def test_c12_determinism(acceptance, default_run):
    again = train("hope", "full", default_run["ds"], HopeConfig(seed=1))[1]
    a = default_run["report"].to_jsonl(with_timing=False)
    b = again.to_jsonl(with_timing=False)
    assert acceptance(12, a == b, f"two 300-epoch runs, {len(a.splitlines())} JSONL lines, identical={a == b}")
