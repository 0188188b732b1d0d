"""Command-line entry point: ``hope <command> [options]``.

Exit codes: 0 success, 1 test-suite failure, 2 input error, 3 divergence.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import diff_core as dc
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .gradcheck import THRESHOLD, run_suite
from .head import ConfigError, HopeConfig, route
from .synthetic import DatasetError, DatasetSpec, generate, load_dataset, make_view_batch, save_dataset, split
from .train import (SWEEP_PARAMS, DivergenceError, TrainConfig, Variant, bench_scaling, evaluate,
                    report_summary, routing_diagnostics, sweep, train)

EXIT_OK, EXIT_FAIL, EXIT_INPUT, EXIT_DIVERGED = 0, 1, 2, 3
DEFAULT_BATCHES = (256, 512, 1024, 2048)


class InputError(Exception):
    pass


def _strict(cls, d, what):
    if not isinstance(d, dict):
        raise ConfigError(f"{what} must be a JSON object")
    unknown = set(d) - {f.name for f in fields(cls)}
    if unknown:
        raise ConfigError(f"unknown {what} keys: {sorted(unknown)}")
    return d


@dataclass
class RunConfig:
    """One experiment: head, data, optimizer and run-level fields.

    ``head`` and ``data`` hold HopeConfig / DatasetSpec fields.  When
    ``dataset_path`` is empty the dataset is regenerated per seed with the
    data seed set to the run seed; otherwise the file is used for every seed.
    """
    head: dict = field(default_factory=dict)
    data: dict = field(default_factory=dict)
    dataset_path: str = ""
    head_kind: str = "hope"
    variant: str = "full"
    epochs: int = 300
    lr: float = 1e-3
    weight_decay: float = 0.0
    train_frac: float = 0.6
    val_frac: float = 0.2
    split_seed: int = 0
    precision: str = "f32"
    seeds: list = field(default_factory=lambda: [0])
    out_dir: str = "runs"

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        rc = cls(**_strict(cls, d, "RunConfig"))
        rc.hope_config()
        rc.dataset_spec()
        if rc.head_kind not in ("hope", "linear"):
            raise ConfigError(f"head_kind must be 'hope' or 'linear', got {rc.head_kind!r}")
        try:
            Variant(rc.variant)
        except ValueError:
            raise ConfigError(f"unknown variant {rc.variant!r}") from None
        if rc.precision not in dc._PRECISIONS:
            raise ConfigError(f"precision must be f32 or f64, got {rc.precision!r}")
        if rc.epochs < 0 or not rc.seeds:
            raise ConfigError("epochs must be >= 0 and seeds non-empty")
        return rc

    def to_dict(self) -> dict:
        return asdict(self)

    def hope_config(self, seed=None) -> HopeConfig:
        cfg = HopeConfig.from_dict(self.head)
        return cfg if seed is None else replace(cfg, seed=seed)

    def dataset_spec(self, seed=None) -> DatasetSpec:
        spec = DatasetSpec.from_dict(self.data)
        return spec if seed is None else replace(spec, seed=seed)

    def train_config(self) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, lr=self.lr, weight_decay=self.weight_decay,
                           train_frac=self.train_frac, val_frac=self.val_frac,
                           split_seed=self.split_seed, precision=self.precision)

    def dataset(self, seed):
        if self.dataset_path:
            if not os.path.exists(self.dataset_path):
                raise InputError(f"dataset not found: {self.dataset_path}")
            return load_dataset(self.dataset_path)
        return generate(self.dataset_spec(seed).validate())


def _read_json(path):
    if path is None:
        return {}
    try:
        with open(path) as f:
            return json.load(f)
    except FileNotFoundError:
        raise InputError(f"config not found: {path}") from None
    except json.JSONDecodeError as e:
        raise InputError(f"{path}: invalid JSON: {e}") from None


def _run_config(args) -> RunConfig:
    rc = RunConfig.from_dict(_read_json(args.config))
    if args.seed is not None:
        rc.seeds = [args.seed]
    if args.precision is not None:
        rc.precision = args.precision
    if args.out is not None:
        rc.out_dir = args.out
    return rc


def _dump(obj, path):
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


# ---------------------------------------------------------------- commands


def cmd_gen_data(args):
    spec = DatasetSpec.from_dict(_read_json(args.config))
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    ds = generate(spec.validate())
    out = args.out or "dataset.hgsb"
    save_dataset(ds, out)
    print(f"wrote {out}: N={ds.N} M={len(ds.views)} d={ds.views[0].shape[1]} "
          f"cluster_sizes={ds.cluster_sizes().tolist()}")
    return EXIT_OK


def _train_seeds(rc: RunConfig, variant: str, tag: str):
    """Train once per seed; write ``<tag>_seed<s>.jsonl`` and ``.ckpt`` to the output dir."""
    reports = []
    for s in rc.seeds:
        model, rep = train(rc.head_kind, variant, rc.dataset(s), rc.hope_config(s), rc.train_config())
        if rc.epochs == 0:
            rep.epochs = []  # summary-only report
        reports.append(rep)
        stem = os.path.join(rc.out_dir, f"{tag}_seed{s}")
        rep.to_jsonl(stem + ".jsonl")
        save_checkpoint(model, stem + ".ckpt")
    return reports


def cmd_train(args):
    rc = _run_config(args)
    os.makedirs(rc.out_dir, exist_ok=True)
    reports = _train_seeds(rc, rc.variant, "train")
    summary = {"config": rc.to_dict(), **report_summary(reports)}
    _dump(summary, os.path.join(rc.out_dir, "summary.json"))
    print(json.dumps({k: v for k, v in summary.items() if k != "config"}, sort_keys=True))
    return EXIT_OK


def cmd_eval(args):
    if not args.checkpoint or not args.dataset:
        raise InputError("eval needs --checkpoint and --dataset")
    rc = RunConfig.from_dict(_read_json(args.config))
    model = load_checkpoint(_existing(args.checkpoint), precision=args.precision or rc.precision)
    ds = load_dataset(_existing(args.dataset))
    tcfg = rc.train_config()
    tr, va, te, _ = split(ds, tcfg.train_frac, tcfg.val_frac, tcfg.split_seed)
    out = {name: evaluate(model, ds, idx) for name, idx in (("train", tr), ("val", va), ("test", te))
           if len(idx)}
    text = json.dumps(out, sort_keys=True)
    if args.out:
        with open(args.out, "w") as f:
            f.write(text + "\n")
    print(text)
    return EXIT_OK


def cmd_ablate(args):
    rc = _run_config(args)
    os.makedirs(rc.out_dir, exist_ok=True)
    rows = []
    for v in Variant:
        reps = _train_seeds(rc, v.value, f"ablate_{v.value}")
        s = report_summary(reps)
        rows.append({"variant": v.value, "lambda": reps[0].lam,
                     "val_accuracy_mean": s["val_accuracy_mean"], "val_accuracy_std": s["val_accuracy_std"],
                     "val_accuracy": [r.final["val"]["accuracy"] for r in reps]})
    _dump({"seeds": rc.seeds, "rows": rows}, os.path.join(rc.out_dir, "ablation.json"))
    print(f"{'variant':<24}{'lambda':>8}{'val_acc':>10}{'std':>8}")
    for r in rows:
        print(f"{r['variant']:<24}{r['lambda']:>8.3f}{r['val_accuracy_mean']:>10.4f}{r['val_accuracy_std']:>8.4f}")
    return EXIT_OK


def cmd_sweep(args):
    rc = _run_config(args)
    if args.param not in SWEEP_PARAMS:
        raise InputError(f"--param must be one of {sorted(SWEEP_PARAMS)}")
    if not args.values:
        raise InputError("--values needs at least one number")
    os.makedirs(rc.out_dir, exist_ok=True)
    rows = []
    for s in rc.seeds:
        res = sweep(args.param, args.values, rc.dataset(s), rc.hope_config(s), rc.train_config(), seeds=(s,))
        for v, reps in res.items():
            rows.append({"seed": s, args.param: v, "val_accuracy": reps[0].final["val"]["accuracy"]})
    _dump({"param": args.param, "values": args.values, "rows": rows},
          os.path.join(rc.out_dir, f"sweep_{args.param}.json"))
    for r in rows:
        print(f"seed={r['seed']} {args.param}={r[args.param]} val_accuracy={r['val_accuracy']:.4f}")
    return EXIT_OK


def cmd_grad_check(args):
    if args.inject_fault:
        with dc.corrupt_backward(*args.inject_fault):
            errs = run_suite(seed=args.seed or 0)
    else:
        errs = run_suite(seed=args.seed or 0)
    bad = [k for k, v in errs.items() if not v < THRESHOLD]
    for k, v in errs.items():
        print(f"{k:<16}{v:.3e}  {'FAIL' if k in bad else 'ok'}")
    if bad:
        print(f"gradient check failed: {', '.join(bad)}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def cmd_bench(args):
    conf = _read_json(args.config)
    unknown = set(conf) - {"M", "d", "batch_sizes", "reps", "warmup"}
    if unknown:
        raise ConfigError(f"unknown bench keys: {sorted(unknown)}")
    cfg = HopeConfig(M=conf.get("M", 4), d=conf.get("d", 64), seed=args.seed or 0).validate()
    rows = bench_scaling(cfg, conf.get("batch_sizes", DEFAULT_BATCHES),
                         reps=conf.get("reps", 20), warmup=conf.get("warmup", 3), seed=args.seed or 0)
    ratios = [round(b["median_seconds"] / a["median_seconds"], 3) for a, b in zip(rows, rows[1:])]
    result = {"M": cfg.M, "d": cfg.d, "rows": rows, "ratios": ratios}
    for r in rows:
        print(f"B={r['B']:<6} median={r['median_seconds']:.6f}s")
    for (a, b), q in zip(zip(rows, rows[1:]), ratios):
        print(f"ratio {b['B']}/{a['B']} = {q:.3f}")
    if args.out:
        _dump(result, args.out)
    return EXIT_OK


def inspect_routing(model, ds, bins: int = 10) -> dict:
    """Per-expert loads, sparsity, dead nodes and score histograms for the whole dataset."""
    head = model.head
    batch = make_view_batch(ds, np.arange(ds.N), dtype=head.prototypes.dtype)
    if getattr(model, "router", None) is not None:
        _, state, _ = model.router.route(batch)
    else:
        elastic = model.variant is not Variant.no_elastic_capacity
        _, state = route(head, batch, elastic=elastic)
    diag = routing_diagnostics(state)
    edges = np.linspace(-1.0, 1.0, bins + 1)
    hist = [np.histogram(np.clip(state.scores[:, m], -1, 1), bins=edges)[0].tolist()
            for m in range(state.scores.shape[1])]
    return {"loads": diag["counts"], "load_fractions": diag["load_fractions"], "rho": diag["rho"],
            "total_selected": int(state.mask.sum()), "dead_nodes": diag["dead_nodes"],
            "k_count": diag["k_count"], "c_count": diag["c_count"],
            "score_histograms": {"edges": edges.tolist(), "counts": hist}}


def cmd_inspect_routing(args):
    if not args.checkpoint or not args.dataset:
        raise InputError("inspect-routing needs --checkpoint and --dataset")
    model = load_checkpoint(_existing(args.checkpoint))
    if model.variant is None:
        raise InputError("linear checkpoints have no routing")
    dump = inspect_routing(model, load_dataset(_existing(args.dataset)))
    text = json.dumps(dump, sort_keys=True)
    if args.out:
        with open(args.out, "w") as f:
            f.write(text + "\n")
    print(text)
    return EXIT_OK


def _existing(path):
    if not os.path.exists(path):
        raise InputError(f"file not found: {path}")
    return path


COMMANDS = {
    "gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate,
    "sweep": cmd_sweep, "grad-check": cmd_grad_check, "bench": cmd_bench,
    "inspect-routing": cmd_inspect_routing,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hope", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--out", help="output path (directory for train/ablate/sweep)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--precision", choices=sorted(dc._PRECISIONS))
        if name in ("eval", "inspect-routing"):
            sp.add_argument("--checkpoint")
            sp.add_argument("--dataset")
        if name == "sweep":
            sp.add_argument("--param", required=True)
            sp.add_argument("--values", type=float, nargs="+")
        if name == "grad-check":
            sp.add_argument("--inject-fault", nargs="+", metavar="OP",
                            help="test hook: corrupt the backward rule of these ops")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (InputError, ConfigError, CheckpointError, DatasetError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except DivergenceError as e:
        print(f"error: {e}: {json.dumps(e.record)}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
