"""Randomized and analytic verification suites.

Each suite runs a fixed number of seeded trials and returns a
:class:`SuiteReport` listing every violation it found.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import ConfigurationError
from .features import constant_features, project_ball, random_unit_features, scalar_features, tabular_features
from .mdp import exact_value_function, induced_chain, make_random_mdp, stationary_distribution, uniform_policy
from .metrics import (
    consensus_deviation,
    delta_metric,
    two_execution_gap,
    weight_support_bound,
    lambda_metric,
    lstd_fixed_point,
    td0_estimate,
    verify_product_bound,
)

SUITES = ("hull", "contraction", "product_bound", "impossibility", "oracle")


@dataclass
class SuiteReport:
    name: str
    trials: int
    violations: list = field(default_factory=list)
    details: dict = field(default_factory=dict)
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return not self.violations

    def as_record(self) -> dict:
        return {
            "suite": self.name,
            "trials": self.trials,
            "passed": self.passed,
            "violations": self.violations,
            "details": self.details,
            "seconds": self.seconds,
        }

    def format(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        lines = [f"{self.name}: {status} ({self.trials} trials, {len(self.violations)} violations, {self.seconds:.2f}s)"]
        for k, v in self.details.items():
            lines.append(f"  {k}: {v}")
        for v in self.violations:
            lines.append(f"  violation: {v}")
        return "\n".join(lines)


# --------------------------------------------------------------------------- #
# hull containment of the trimmed mean


def _adversarial_values(rng, honest: np.ndarray, f: int) -> np.ndarray:
    """f values per trial mixing huge outliers, near-range values and honest copies."""
    t = honest.shape[0]
    lo, hi = honest.min(axis=1), honest.max(axis=1)
    span = np.maximum(hi - lo, 1e-300)
    kind = rng.integers(0, 5, size=(t, f))
    huge = rng.uniform(-1e9, 1e9, size=(t, f))
    signs = np.where(rng.random((t, f)) < 0.5, -1.0, 1.0)
    extreme = signs * 1e9
    below = lo[:, None] - span[:, None] * rng.random((t, f))
    above = hi[:, None] + span[:, None] * rng.random((t, f))
    copies = honest[np.arange(t)[:, None], rng.integers(0, honest.shape[1], size=(t, f))]
    return np.choose(kind, [huge, extreme, below, above, copies])


def hull_suite(trials: int = 100_000, seed: int = 0, sizes=(7, 10, 13)) -> SuiteReport:
    """Trimmed mean of honest + f adversarial scalars stays within the honest range."""
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    report = SuiteReport("hull", trials)
    per = np.full(len(sizes), trials // len(sizes))
    per[: trials - per.sum()] += 1
    for n, count in zip(sizes, per):
        f = (n - 1) // 3
        scale = 10.0 ** rng.uniform(-3, 3, size=(count, 1))
        honest = rng.standard_normal((count, n - f)) * scale + rng.uniform(-1, 1, size=(count, 1)) * scale
        adv = _adversarial_values(rng, honest, f)
        vals = np.concatenate([honest, adv], axis=1)
        # shuffle sender order so adversaries are not always last
        vals = np.take_along_axis(vals, rng.permuted(np.tile(np.arange(n), (count, 1)), axis=1), axis=1)
        out = _kernels.trimmed_mean_batch(vals[:, :, None], None, np.full(count, f))[:, 0]
        lo, hi = honest.min(axis=1), honest.max(axis=1)
        # a mean of values in [lo, hi] may round past an endpoint by a few ulps
        tol = 8 * np.finfo(float).eps * np.maximum(np.abs(lo), np.abs(hi))
        bad = np.flatnonzero((out < lo - tol) | (out > hi + tol))
        for t in bad:
            report.violations.append({"n": int(n), "f": int(f), "trial": int(t), "output": float(out[t]), "low": float(lo[t]), "high": float(hi[t])})
        report.details[f"n={n}"] = f"f={f}, {int(count)} trials"
    report.seconds = time.perf_counter() - start
    return report


# --------------------------------------------------------------------------- #
# projection contraction


def contraction_suite(trials: int = 100_000, seed: int = 0, tol: float = 1e-12) -> SuiteReport:
    """Clipping scalar agent parameters never increases their spread around the mean."""
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    report = SuiteReport("contraction", trials)
    ns = rng.integers(2, 14, size=trials)
    worst = -np.inf
    for n in np.unique(ns):
        idx = np.flatnonzero(ns == n)
        count = idx.size
        scale = 10.0 ** rng.uniform(-2, 3, size=(count, 1))
        w = rng.standard_normal((count, n)) * scale + rng.uniform(-2, 2, size=(count, 1)) * scale
        radius = scale[:, 0] * rng.uniform(0.05, 3.0, size=count)
        p = project_ball(w[:, :, None], radius[:, None, None], "coordinate")[:, :, 0]
        lhs = np.linalg.norm(p - p.mean(axis=1, keepdims=True), axis=1)
        rhs = np.linalg.norm(w - w.mean(axis=1, keepdims=True), axis=1)
        worst = max(worst, float(np.max(lhs - rhs)))
        for t in np.flatnonzero(lhs > rhs + tol):
            report.violations.append({"n": int(n), "trial": int(idx[t]), "projected": float(lhs[t]), "original": float(rhs[t])})
    report.details["max(lhs - rhs)"] = worst
    report.seconds = time.perf_counter() - start
    return report


# --------------------------------------------------------------------------- #
# row-stochastic products


def random_row_stochastic(rng, n: int) -> np.ndarray:
    """Dense, sparse, identity-like or permutation matrices with unit row sums."""
    style = rng.integers(0, 4)
    if style == 0:
        X = rng.dirichlet(np.ones(n), size=n)
    elif style == 1:
        X = rng.random((n, n)) * (rng.random((n, n)) < 0.5)
        X[np.arange(n), rng.integers(0, n, size=n)] += rng.random(n) + 1e-3
        X /= X.sum(axis=1, keepdims=True)
    elif style == 2:
        X = 0.5 * np.eye(n) + 0.5 * rng.dirichlet(np.ones(n), size=n)
    else:
        X = np.eye(n)[rng.permutation(n)]
    return X


def product_bound_suite(trials: int = 10_000, seed: int = 0, tol: float = 1e-10) -> SuiteReport:
    """delta of a product is at most the product of lambdas, and ||X - 1 Xbar||_F <= n delta(X)."""
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    report = SuiteReport("product_bound", trials)
    min_slack = np.inf
    min_dev_slack = np.inf
    for t in range(trials):
        n = int(rng.integers(2, 7))
        m = int(rng.integers(1, 9))
        mats = [random_row_stochastic(rng, n) for _ in range(m)]
        res = verify_product_bound(mats, tol)
        min_slack = min(min_slack, res.slack)
        if not res.passed:
            report.violations.append({"trial": t, "check": "product", "n": n, "m": m, "lhs": res.lhs, "rhs": res.rhs})
        for j, X in enumerate(mats):
            dev, delta = consensus_deviation(X), delta_metric(X)
            min_dev_slack = min(min_dev_slack, n * delta - dev)
            if dev > n * delta + tol:
                report.violations.append({"trial": t, "check": "deviation", "matrix": j, "n": n, "lhs": dev, "rhs": n * delta})
            if not 0.0 <= delta <= lambda_metric(X) + tol:
                report.violations.append({"trial": t, "check": "delta<=lambda", "matrix": j, "n": n})
    report.details["min product slack"] = float(min_slack)
    report.details["min deviation slack"] = float(min_dev_slack)
    report.seconds = time.perf_counter() - start
    return report


# --------------------------------------------------------------------------- #
# impossibility constructions


def impossibility_suite(seed: int = 0, sizes=(4, 7, 10), triples=((7, 2, 2), (10, 3, 3), (4, 1, 1)), horizon: int = 200) -> SuiteReport:
    """Fixed-point gap of the two-execution construction and the weight-support bound."""
    start = time.perf_counter()
    report = SuiteReport("impossibility", len(sizes) * 2 + len(triples))
    for n in sizes:
        mdp = make_random_mdp(3, n, 1, seed + n)
        policy = uniform_policy(mdp.action_counts)
        for label, feats in (("phi=1", constant_features(3)), ("scalar phi", scalar_features(3, seed + n))):
            rep = two_execution_gap(n, feats, mdp, policy, seed=seed, horizon=horizon)
            rec = {"n": n, "features": label, "w1": rep.w1.tolist(), "w2": rep.w2.tolist(), "gap": rep.gap.tolist(), "E[phi]": rep.expected_gap.tolist(), "traces_identical": rep.traces_identical}
            if label == "phi=1":
                expected = ((n * (n + 1) - 2) / (2 * (n - 1)), n / 2)
                rec["closed_form"] = expected
                if abs(rep.w1[0] - expected[0]) > 1e-10 or abs(rep.w2[0] - expected[1]) > 1e-10:
                    report.violations.append({**rec, "check": "closed form"})
            if not rep.passed:
                report.violations.append({**rec, "check": "gap or trace equality", "notes": rep.notes})
            report.details[f"two-execution n={n} {label}"] = f"gap={rep.gap.tolist()}, E[phi]={rep.expected_gap.tolist()}, identical={rep.traces_identical}"
    for n, f, q in triples:
        rep = weight_support_bound(n, f, q)
        report.details[f"weight-support (n,f,q)=({n},{f},{q})"] = f"forced_zero={rep.forced_zero}, max_support={rep.max_support}, bound={rep.bound}, lp_agrees={rep.lp_agrees}"
        if not rep.passed:
            report.violations.append({"check": "weight support", **rep.as_record()})
    report.seconds = time.perf_counter() - start
    return report


# --------------------------------------------------------------------------- #
# oracle agreement


def td_step_scale(mdp, policy, features) -> float:
    """eta0 with eta0 * lambda_min(sym A) >= 1, the usual condition for harmonic steps to converge at rate 1/sqrt(k)."""
    P = induced_chain(mdp, policy)
    d = stationary_distribution(P)
    Phi = features.table
    A = (Phi * d[:, None]).T @ (Phi - mdp.discount * (P @ Phi))
    lam = float(np.linalg.eigvalsh(0.5 * (A + A.T)).min())
    if lam <= 0:
        raise ConfigurationError("symmetric part of the TD matrix is not positive definite")
    return max(1.0, 1.0 / lam)


def oracle_suite(seed: int = 100, steps: int = 100_000, runs: int = 5, tol: float = 1e-2) -> SuiteReport:
    """Seed-averaged TD(0) matches the LSTD solution; tabular LSTD matches the exact values."""
    start = time.perf_counter()
    report = SuiteReport("oracle", runs + 1)
    mdp = make_random_mdp(3, 1, 2, seed, discount=0.5)
    policy = uniform_policy(mdp.action_counts)
    feats = random_unit_features(3, 2, seed)
    target = lstd_fixed_point(mdp, policy, feats, [1.0])
    eta0 = td_step_scale(mdp, policy, feats)
    est = np.mean([td0_estimate(mdp, policy, feats, [1.0], steps, s, eta0=eta0) for s in range(runs)], axis=0)
    err = float(np.max(np.abs(est - target)))
    report.details["lstd"] = target.tolist()
    report.details["td0 mean"] = est.tolist()
    report.details["td0 error"] = err
    report.details["eta0"] = eta0
    if not err <= tol:
        report.violations.append({"check": "td0 vs lstd", "error": err, "tolerance": tol})
    tab = lstd_fixed_point(mdp, policy, tabular_features(3), [1.0])
    exact = exact_value_function(mdp, policy, [1.0])
    terr = float(np.max(np.abs(tab - exact)))
    report.details["tabular error"] = terr
    if not terr <= 1e-6:
        report.violations.append({"check": "tabular lstd vs exact", "error": terr})
    report.seconds = time.perf_counter() - start
    return report


def run_suite(name: str, *, trials: int | None = None, seed: int | None = None) -> SuiteReport:
    if name not in SUITES:
        raise ConfigurationError(f"unknown suite {name!r}; choose from {SUITES}")
    kwargs = {}
    if seed is not None:
        kwargs["seed"] = seed
    if trials is not None:
        if name in ("impossibility",):
            raise ConfigurationError(f"suite {name} has a fixed case list")
        kwargs["steps" if name == "oracle" else "trials"] = trials
    fn = {
        "hull": hull_suite,
        "contraction": contraction_suite,
        "product_bound": product_bound_suite,
        "impossibility": impossibility_suite,
        "oracle": oracle_suite,
    }[name]
    return fn(**kwargs)
