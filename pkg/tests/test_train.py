import json
from dataclasses import replace

import numpy as np
import pytest

from hope import diff_core as dc
from hope.diff_core import Tensor
from hope.head import HopeConfig, RoutingState, elastic_select_detailed
from hope.synthetic import DatasetSpec, generate, make_view_batch
from hope.train import (LOAD_BALANCE_WEIGHT, DivergenceError, HopeModel, TrainConfig, Variant, adam_init,
                        adam_step, bench_scaling, build_model, classification_metrics, evaluate,
                        parameter_checksum, routing_diagnostics, sweep, train)

SHORT = TrainConfig(epochs=5)


@pytest.fixture(scope="module")
def small_ds():
    return generate(DatasetSpec(N=300, seed=1))


# ---------------------------------------------------------------- Adam


def test_adam_zero_gradient_leaves_params():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    st = adam_init([p])
    for _ in range(10):
        adam_step([p], [np.zeros(2)], st)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])
    assert st.step == 10


def test_adam_constant_gradient_unit_step():
    p = Tensor(np.zeros(3), requires_grad=True)
    st = adam_init([p], lr=1e-3)
    g = np.array([0.5, -3.0, 1e-2])
    prev = p.data.copy()
    for _ in range(200):
        adam_step([p], [g], st)
        step = p.data - prev
        prev = p.data.copy()
    np.testing.assert_allclose(np.abs(step), 1e-3, rtol=1e-4)
    assert (np.sign(step) == -np.sign(g)).all()


def test_adam_quadratic_bowl():
    x = Tensor(np.array([1.0, 1.0]), requires_grad=True)
    st = adam_init([x], lr=1e-2)
    for _ in range(2000):
        x.grad = None
        dc.backward(dc.sum(dc.square(x)))
        adam_step([x], [x.grad], st)
    assert np.linalg.norm(x.data) < 1e-3


def test_adam_shape_mismatch():
    p = Tensor(np.zeros(3), requires_grad=True)
    with pytest.raises(ValueError):
        adam_step([p], [np.zeros(2)], adam_init([p]))


def test_adam_moment_shapes_mirror_params():
    ps = [Tensor(np.zeros((2, 3))), Tensor(np.zeros(()))]
    st = adam_init(ps)
    assert [m.shape for m in st.m] == [(2, 3), ()] and [v.shape for v in st.v] == [(2, 3), ()]


# ---------------------------------------------------------------- metrics


def test_metrics_perfect_predictor():
    y = np.array([0, 1, 2, 1])
    m = classification_metrics(y, y, cluster_of=y, is_tail=[0, 0, 1, 0], num_classes=3)
    assert m["accuracy"] == 1.0 and m["macro_f1"] == 1.0 and m["tail_head_gap"] == 0.0


def test_metrics_majority_constant():
    y = np.array([0, 0, 0, 1, 2])
    assert classification_metrics(np.zeros(5, int), y)["accuracy"] == pytest.approx(0.6)


def test_metrics_per_cluster_recomposes_accuracy():
    rng = np.random.default_rng(0)
    y, pred, cl = rng.integers(0, 4, 500), rng.integers(0, 4, 500), rng.integers(0, 8, 500)
    m = classification_metrics(pred, y, cluster_of=cl)
    total = sum(m["per_cluster_accuracy"][c] * m["per_cluster_count"][c] for c in m["per_cluster_count"])
    assert total / 500 == pytest.approx(m["accuracy"], abs=1e-9)


def test_metrics_macro_f1_hand_example():
    # class 0: tp=1 fp=1 fn=0 -> 2/3; class 1: tp=0 fp=0 fn=1 -> 0
    assert classification_metrics(np.array([0, 0]), np.array([0, 1]))["macro_f1"] == pytest.approx(1 / 3)


def test_metrics_empty_split():
    with pytest.raises(ValueError):
        classification_metrics(np.array([], int), np.array([], int))


def test_evaluate_is_side_effect_free(small_ds):
    model = build_model("hope", "full", HopeConfig(seed=1))
    before = parameter_checksum(model)
    idx = np.arange(0, small_ds.N, 3)
    a = evaluate(model, small_ds, idx)
    b = evaluate(model, small_ds, idx)
    assert parameter_checksum(model) == before and a == b


def test_evaluate_rejects_empty(small_ds):
    with pytest.raises(ValueError):
        evaluate(build_model("linear", None, HopeConfig()), small_ds, [])


# ---------------------------------------------------------------- diagnostics


def test_diagnostics_recount():
    rng = np.random.default_rng(1)
    scores = rng.uniform(-1, 1, (30, 4))
    mask = elastic_select_detailed(scores, 0.4, 3, 10)[0]
    d = routing_diagnostics(RoutingState(scores, mask, scores * mask, 3, 10))
    assert d["counts"] == [int(mask[:, m].sum()) for m in range(4)]
    assert d["dead_nodes"] == [i for i in range(30) if not mask[i].any()]
    assert sum(d["load_fractions"]) == pytest.approx(d["mean_active_experts"])


def test_diagnostics_all_ones():
    m = np.ones((5, 3), bool)
    d = routing_diagnostics(RoutingState(np.zeros((5, 3)), m, m * 1.0, 1, 5))
    assert d["rho"] == 1.0 and d["dead_rate"] == 0.0


def test_diagnostics_all_below_delta_column_hits_floor():
    scores = np.full((12, 2), -0.5)
    scores[:, 1] = np.linspace(0.6, 0.9, 12)
    mask = elastic_select_detailed(scores, 0.5, 2, 6)[0]
    assert routing_diagnostics(RoutingState(scores, mask, mask * 1.0, 2, 6))["counts"][0] == 2


# ---------------------------------------------------------------- variants


def test_variant_lambdas():
    cfg = HopeConfig(lam=0.7)
    assert HopeModel(cfg, "full").lam == 0.7
    assert HopeModel(cfg, "no_ortho_loss").lam == 0.0


def test_no_shared_pathway_drops_shared_parameters():
    names = [n for n, _ in HopeModel(HopeConfig(), "no_shared_pathway").named_parameters()]
    assert not any(n.startswith("shared") for n in names)


def test_vanilla_router_selects_two_per_node(small_ds):
    model = HopeModel(HopeConfig(seed=2), "no_prototype_experts")
    _, routing, aux = model(make_view_batch(small_ds, np.arange(40)))
    assert (routing.mask.sum(axis=1) == 2).all()
    assert aux is not None and LOAD_BALANCE_WEIGHT == 0.5


def test_no_elastic_mask_is_threshold_only(small_ds):
    model = HopeModel(HopeConfig(seed=3, delta=0.1), "no_elastic_capacity")
    _, routing, _ = model(make_view_batch(small_ds, np.arange(60)))
    np.testing.assert_array_equal(routing.mask, routing.scores > 0.1)


# ---------------------------------------------------------------- train


def test_train_zero_epochs_reports_initialization_only(small_ds):
    _, rep = train("hope", "full", small_ds, HopeConfig(seed=1), TrainConfig(epochs=0))
    assert [r["epoch"] for r in rep.epochs] == [0]


def test_train_lambda_zero_contributes_nothing(small_ds):
    _, rep = train("hope", "full", small_ds, HopeConfig(seed=1, lam=0.0), SHORT)
    for r in rep.epochs:
        assert r["ortho_weighted"] == 0.0
        assert r["total_loss"] == r["task_loss"]


def test_train_report_fields(small_ds):
    _, rep = train("hope", "full", small_ds, HopeConfig(seed=1), SHORT)
    r = rep.epochs[-1]
    for k in ("total_loss", "task_loss", "ortho_loss", "train_accuracy", "val_accuracy", "load_fractions",
              "rho", "dead_rate", "max_proto_cosine", "wall_clock"):
        assert k in r
    assert sum(r["load_fractions"]) == pytest.approx(r["rho"] * 4)
    lines = rep.to_jsonl().splitlines()
    assert len(lines) == SHORT.epochs + 2
    assert json.loads(lines[-1])["type"] == "final"


def test_train_loss_decreases(small_ds):
    _, rep = train("hope", "full", small_ds, HopeConfig(seed=1), TrainConfig(epochs=30))
    assert rep.epochs[-1]["task_loss"] < rep.epochs[0]["task_loss"]


@pytest.mark.parametrize("kind,variant", [("hope", v.value) for v in Variant] + [("linear", None)])
def test_train_is_deterministic(small_ds, kind, variant):
    a = train(kind, variant, small_ds, HopeConfig(seed=4), SHORT)[1]
    b = train(kind, variant, small_ds, HopeConfig(seed=4), SHORT)[1]
    assert a.to_jsonl(with_timing=False) == b.to_jsonl(with_timing=False)


def test_train_divergence_raises_with_record(small_ds):
    views = [v.copy() for v in small_ds.views]
    views[0][:, 0] = np.nan
    bad = replace(small_ds, views=views)
    with pytest.raises(DivergenceError) as ei:
        train("linear", None, bad, HopeConfig(seed=1), SHORT)
    assert ei.value.record["epoch"] == 0 and not np.isfinite(ei.value.record["total_loss"])


def test_train_stability_floor_holds_every_epoch(small_ds):
    seen = []

    def check(epoch, routing):
        counts = routing.mask.sum(axis=0)
        assert (counts >= routing.k_count).all() and (counts <= routing.c_count).all()
        seen.append(epoch)

    train("hope", "full", small_ds, HopeConfig(seed=1), TrainConfig(epochs=10), callback=check)
    assert seen == list(range(11))


# ---------------------------------------------------------------- sweeps & bench


def test_sweep_single_value_equals_train(small_ds):
    base = HopeConfig(seed=5)
    out = sweep("delta", [0.3], small_ds, base, SHORT)
    plain = train("hope", "full", small_ds, replace(base, delta=0.3), SHORT)[1]
    assert out[0.3][0].to_jsonl(with_timing=False) == plain.to_jsonl(with_timing=False)


def test_sweep_lambda_zero_equals_no_ortho_variant(small_ds):
    base = HopeConfig(seed=5)
    swept = sweep("lambda", [0.0], small_ds, base, SHORT)[0.0][0]
    var = train("hope", "no_ortho_loss", small_ds, base, SHORT)[1]
    assert swept.final["val"] == var.final["val"]


def test_sweep_rejects_unknown_and_empty(small_ds):
    with pytest.raises(ValueError):
        sweep("tau", [1.0], small_ds, HopeConfig())
    with pytest.raises(ValueError):
        sweep("delta", [], small_ds, HopeConfig())


def test_bench_small_batches():
    rows = bench_scaling(HopeConfig(M=2, d=8), [1, 4, 64], reps=3, warmup=1)
    assert [r["B"] for r in rows] == [1, 4, 64]
    assert all(r["median_seconds"] > 0 for r in rows)


def test_bench_requires_ascending():
    with pytest.raises(ValueError):
        bench_scaling(HopeConfig(), [512, 256])
