"""End-to-end acceptance checks, one test per criterion.

Each test prints a single PASS/FAIL line (visible even without ``-s``) and
then asserts, so a failing criterion is reported both ways.
"""

import time
from pathlib import Path

import numpy as np
import pytest

from bdtd.experiment import ExperimentConfig, load_matrix, run_experiment, run_matrix
from bdtd.verify import contraction_suite, hull_suite, impossibility_suite, oracle_suite, product_bound_suite

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def report(capsys, number, title, ok, detail):
    with capsys.disabled():
        print(f"\n[acceptance {number}] {'PASS' if ok else 'FAIL'} {title}: {detail}")
    assert ok, detail


def test_consensus_scalar_trimmed_mean(capsys):
    start = time.perf_counter()
    cfg = ExperimentConfig.from_yaml(CONFIGS / "consensus_scalar.yaml")
    assert cfg.horizon == 10_000 and len(cfg.seeds) == 10
    res = run_experiment(cfg, write=False)
    elapsed = time.perf_counter() - start
    final = np.array([s.ce[9_999] for s in res.seeds])  # CE after round 10^4
    early = np.array([s.ce[99] for s in res.seeds])  # CE after round 10^2
    ok = bool(np.all(final < 1e-4) and np.all(final < early) and elapsed < 30)
    report(capsys, 1, "consensus", ok, f"max CE(1e4)={final.max():.3g}, min CE(1e2)={early.min():.3g}, {elapsed:.1f}s of 30s")


def test_hull_containment(capsys):
    rep = hull_suite(100_000, seed=0)
    ok = rep.passed and rep.seconds < 10
    report(capsys, 2, "hull containment", ok, f"{rep.trials} trials, {len(rep.violations)} violations, {rep.seconds:.1f}s of 10s")


def test_projection_contraction(capsys):
    rep = contraction_suite(100_000, seed=0)
    report(capsys, 3, "projection contraction", rep.passed, f"{rep.trials} trials, {len(rep.violations)} violations, worst slack {rep.details['max(lhs - rhs)']:.3g}")


def test_product_bound(capsys):
    rep = product_bound_suite(10_000, seed=0)
    kinds = {v["check"] for v in rep.violations}
    report(capsys, 4, "product bound", rep.passed, f"{rep.trials} products, violations by check: {sorted(kinds) or 'none'}, min slack {rep.details['min product slack']:.3g}")


def test_two_execution_construction(capsys):
    rep = impossibility_suite(seed=0, triples=())
    t1 = {k: v for k, v in rep.details.items() if k.startswith("two-execution")}
    ok = rep.passed and len(t1) == 6 and all("identical=True" in v for v in t1.values())
    report(capsys, 5, "two-execution construction", ok, f"{len(t1)} cases, {len(rep.violations)} violations")


def test_weight_support_construction(capsys):
    rep = impossibility_suite(seed=0, sizes=())
    ok = rep.passed and len(rep.details) == 3
    report(capsys, 6, "weight-support construction", ok, "; ".join(f"{k.split()[-1]} {v.split(', lp')[0]}" for k, v in rep.details.items()))


def test_oracle_equivalence(capsys):
    rep = oracle_suite(seed=100, steps=100_000, runs=5, tol=1e-2)
    report(capsys, 7, "oracle equivalence", rep.passed, f"TD(0) error {rep.details['td0 error']:.3g} (<1e-2), tabular error {rep.details['tabular error']:.3g} (<1e-6)")


@pytest.mark.slow
def test_grid_matrix_trim_attack(capsys, tmp_path):
    start = time.perf_counter()
    spec = load_matrix(CONFIGS / "grid_matrix.yaml")
    assert spec.reference is not None and len(spec.methods) == 6 and len(spec.attacks) == 3
    assert all(len(c.seeds) == 10 for _, _, c in spec.cells)
    res = run_matrix(spec, tmp_path)
    elapsed = time.perf_counter() - start
    bdtd = res.final("trimmed_mean", "trim_attack")
    ref = res.final("reference", "none")
    fedavg = res.final("fedavg", "trim_attack")
    ce = res.final("trimmed_mean", "trim_attack", "ce")
    checks = {
        "BDTD within 25% of reference": abs(bdtd - ref) <= 0.25 * ref,
        "FedAvg under attack >= 2x BDTD": fedavg >= 2 * bdtd,
        "BDTD CE < 1e-3": ce < 1e-3,
        "under 5 min": elapsed < 300,
    }
    failed = [k for k, v in checks.items() if not v]
    detail = f"MSBE BDTD={bdtd:.4g}, reference={ref:.4g}, FedAvg={fedavg:.4g}; CE={ce:.3g}; {elapsed:.0f}s" + (f"; failed: {failed}" if failed else "")
    report(capsys, 8, "grid matrix under trim attack", not failed, detail)
