"""Five-variant ablation plus the linear head on the default synthetic spec.

    python3 scripts/run_ablation.py [--seeds 1 2 3] [--epochs 300] [--out ablation.json]
"""
import argparse
import json

import numpy as np

from hope.experiments import SEEDS, run_ablation
from hope.train import TrainConfig


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seeds", type=int, nargs="+", default=list(SEEDS))
    p.add_argument("--epochs", type=int, default=300)
    p.add_argument("--out")
    a = p.parse_args()
    res = run_ablation(a.seeds, tcfg=TrainConfig(epochs=a.epochs))
    print(f"{'head':<24}{'val_acc':>9}{'std':>8}{'max_cos':>9}")
    for name, r in res.items():
        if name.startswith("_"):
            continue
        cos = "-" if r["max_cos"][0] is None else f"{np.mean(r['max_cos']):.3f}"
        print(f"{name:<24}{np.mean(r['val']):>9.4f}{np.std(r['val']):>8.4f}{cos:>9}")
    print(f"{res['_seconds']:.0f}s")
    if a.out:
        with open(a.out, "w") as f:
            json.dump(res, f, indent=2)


if __name__ == "__main__":
    main()
