"""Sensitivity sweeps of val accuracy over delta, lambda, k_frac or c_frac.

    python3 scripts/run_sensitivity.py --param delta [--values 0 0.2 0.4] [--seeds 1 2 3]
"""
import argparse
import json

from hope.experiments import DELTA_GRID, LAMBDA_GRID, SEEDS, run_sensitivity
from hope.train import TrainConfig

DEFAULT_GRIDS = {"delta": DELTA_GRID, "lambda": LAMBDA_GRID,
                 "k_frac": (0.1, 0.3, 0.5, 0.7, 1.0), "c_frac": (1.0, 2.0, 3.0, 4.0, 6.0)}


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--param", choices=sorted(DEFAULT_GRIDS), required=True)
    p.add_argument("--values", type=float, nargs="+")
    p.add_argument("--seeds", type=int, nargs="+", default=list(SEEDS))
    p.add_argument("--epochs", type=int, default=300)
    p.add_argument("--out")
    a = p.parse_args()
    values = a.values or DEFAULT_GRIDS[a.param]
    res = run_sensitivity(a.param, values, a.seeds, tcfg=TrainConfig(epochs=a.epochs))
    print("seed  " + "  ".join(f"{v:>6}" for v in values) + "  interior")
    for s, row, inner in zip(a.seeds, res["acc"], res["interior"]):
        print(f"{s:<4}  " + "  ".join(f"{x:6.3f}" for x in row) + f"  {inner}")
    print("mean  " + "  ".join(f"{x:6.3f}" for x in res["acc"].mean(axis=0)))
    print(f"interior maximum in {sum(res['interior'])}/{len(a.seeds)} seeds, {res['_seconds']:.0f}s")
    if a.out:
        with open(a.out, "w") as f:
            json.dump({**res, "acc": res["acc"].tolist()}, f, indent=2)


if __name__ == "__main__":
    main()
