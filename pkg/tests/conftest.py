import time

import pytest

from hope.experiments import DELTA_GRID, LAMBDA_GRID, run_ablation, run_sensitivity
from hope.head import HopeConfig
from hope.synthetic import DatasetSpec, generate
from hope.train import train


def pytest_configure(config):
    config._acceptance_lines = []


@pytest.fixture
def acceptance(request, capsys):
    """Record one PASS/FAIL line per criterion; echo it and list all lines in the summary."""
    def report(number, ok, detail):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2}: {detail}"
        request.config._acceptance_lines.append(line)
        with capsys.disabled():
            print("\n" + line)
        return ok
    return report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda l: int(l.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def ablation_runs():
    """All five variants plus the linear head on the default spec, seeds 1-10."""
    return run_ablation()


@pytest.fixture(scope="session")
def sensitivity_runs():
    return {"delta": run_sensitivity("delta", DELTA_GRID), "lambda": run_sensitivity("lambda", LAMBDA_GRID)}


@pytest.fixture(scope="session")
def default_run():
    """One 300-epoch full-variant run on the default spec (seed 1), checking the
    selection bounds on every training forward pass."""
    ds = generate(DatasetSpec(seed=1))
    log = {"forwards": 0, "violations": []}

    def check(epoch, routing):
        log["forwards"] += 1
        counts = routing.mask.sum(axis=0)
        if not ((counts >= routing.k_count) & (counts <= routing.c_count)).all():
            log["violations"].append((epoch, counts.tolist(), routing.k_count, routing.c_count))

    t0 = time.perf_counter()
    model, report = train("hope", "full", ds, HopeConfig(seed=1), callback=check)
    return {"ds": ds, "model": model, "report": report, "log": log, "seconds": time.perf_counter() - t0}
