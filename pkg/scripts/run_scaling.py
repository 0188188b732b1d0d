"""Forward+backward wall clock against batch size at fixed M and d.

    python3 scripts/run_scaling.py [--batches 256 512 1024 2048] [--M 4] [--d 64]
"""
import argparse

from hope.head import HopeConfig
from hope.train import bench_scaling


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--batches", type=int, nargs="+", default=[256, 512, 1024, 2048])
    p.add_argument("--M", type=int, default=4)
    p.add_argument("--d", type=int, default=64)
    p.add_argument("--reps", type=int, default=20)
    a = p.parse_args()
    rows = bench_scaling(HopeConfig(M=a.M, d=a.d), a.batches, reps=a.reps)
    prev = None
    for r in rows:
        ratio = "" if prev is None else f"  x{r['median_seconds'] / prev:.3f}"
        print(f"B={r['B']:<6}{r['median_seconds'] * 1e3:9.3f} ms{ratio}")
        prev = r["median_seconds"]


if __name__ == "__main__":
    main()
