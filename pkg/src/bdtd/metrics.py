"""Evaluation metrics, fixed-point oracles and the impossibility constructions."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import ConfigurationError
from .features import FeatureMap
from .mdp import JointPolicy, NetworkedMdp, expected_rewards, induced_chain, stationary_distribution

# --------------------------------------------------------------------------- #
# run metrics


def sbe(params, phi_s, phi_next, rewards, gamma: float) -> float:
    """Squared Bellman error of one sample, averaged over normal agents.

    ``params`` is (|N|, d); ``rewards`` are the normal agents' rewards for the
    sample. Every agent is scored against the mean normal reward.
    """
    P = np.atleast_2d(np.asarray(params, dtype=np.float64))
    r = np.asarray(rewards, dtype=np.float64).ravel()
    if P.shape[0] == 0 or r.size == 0:
        raise ConfigurationError("SBE needs at least one normal agent")
    resid = r.mean() + gamma * (P @ np.atleast_1d(phi_next)) - P @ np.atleast_1d(phi_s)
    return float(np.mean(resid**2))


def msbe(sbe_series, k: int | None = None) -> float:
    """Mean of the first k per-sample SBE values."""
    x = np.asarray(getattr(sbe_series, "sbe", sbe_series), dtype=np.float64)
    k = x.size if k is None else int(k)
    if k < 1 or k > x.size:
        raise ConfigurationError(f"k must lie in [1, {x.size}], got {k}")
    return float(x[:k].mean())


def consensus_error(params) -> float:
    """Mean squared distance of the agents' parameters from their average."""
    P = np.asarray(params, dtype=np.float64)
    if P.ndim == 1:
        P = P[:, None]
    if P.shape[0] == 0:
        raise ConfigurationError("consensus error needs at least one agent")
    dev = P - P.mean(axis=0)
    return float((dev * dev).sum() / P.shape[0])


# --------------------------------------------------------------------------- #
# fixed points


@dataclass(frozen=True, eq=False)
class FixedPointSpec:
    """Weights over agents (zeros for excluded ones) plus the model they apply to."""

    mdp: NetworkedMdp
    policy: JointPolicy
    features: FeatureMap
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        object.__setattr__(self, "weights", w)
        if w.shape != (self.mdp.num_agents,):
            raise ConfigurationError("one weight per agent required")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ConfigurationError("weights must be nonnegative and sum to 1")
        if self.features.state_count != self.mdp.state_count:
            raise ConfigurationError("feature table does not match the MDP")

    def support_count(self, xi: float) -> int:
        return int(np.sum(self.weights >= xi))

    def is_admissible(self, nu: int, xi: float) -> bool:
        return self.support_count(xi) >= nu


def uniform_weights(n: int, agents) -> np.ndarray:
    agents = list(agents)
    w = np.zeros(n)
    w[agents] = 1.0 / len(agents)
    return w


def weighted_fixed_point(spec: FixedPointSpec) -> np.ndarray:
    """E_{s~d_pi, a~pi}[phi(s) * sum_i alpha_i r_i(s, a)] from exact oracles."""
    d = stationary_distribution(induced_chain(spec.mdp, spec.policy))
    r = spec.weights @ expected_rewards(spec.mdp, spec.policy)
    return spec.features.table.T @ (d * r)


def lstd_fixed_point(mdp: NetworkedMdp, policy: JointPolicy, features: FeatureMap, weights) -> np.ndarray:
    """Projected-Bellman fixed point: solve A w = b with
    A = E[phi(s)(phi(s) - gamma phi(s'))^T] and b = E[phi(s) r_alpha(s)].
    """
    w = np.asarray(weights, dtype=np.float64)
    P = induced_chain(mdp, policy)
    d = stationary_distribution(P)
    Phi = features.table
    r = w @ expected_rewards(mdp, policy)
    D = Phi * d[:, None]
    A = D.T @ (Phi - mdp.discount * (P @ Phi))
    b = D.T @ r
    if np.linalg.matrix_rank(A) < A.shape[0]:
        raise ConfigurationError("LSTD matrix is singular; check feature rank and d_pi support")
    sol = np.linalg.solve(A, b)
    if np.max(np.abs(A @ sol - b)) > 1e-10 * max(1.0, np.max(np.abs(b))):
        raise ConfigurationError("LSTD solve residual above 1e-10")
    return sol


def td0_estimate(mdp: NetworkedMdp, policy: JointPolicy, features: FeatureMap, weights, steps: int, seed=0, *, eta0: float = 1.0, schedule: str = "harmonic") -> np.ndarray:
    """Plain single-learner TD(0) on the alpha-weighted reward; no projection.

    Serves as the simulation check of :func:`lstd_fixed_point`.
    """
    if steps < 1:
        raise ConfigurationError("steps must be >= 1")
    if schedule not in ("harmonic", "constant"):
        raise ConfigurationError(f"unknown schedule {schedule!r}")
    rng = np.random.default_rng(seed)
    S = mdp.state_count
    cum_pi = np.cumsum(policy.joint_table(S), axis=1)
    cum_pi[:, -1] = 1.0
    cum_P = np.cumsum(mdp.transition, axis=2)
    cum_P[..., -1] = 1.0
    r = np.tensordot(np.asarray(weights, dtype=np.float64), mdp.rewards, axes=1)
    s0 = int(rng.integers(S))
    return _kernels.td0_path(cum_pi, cum_P, r, features.table, mdp.discount, eta0, schedule == "harmonic", s0, rng.random((steps, 2)))


# --------------------------------------------------------------------------- #
# row-similarity metrics


def _check_stochastic(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] != X.shape[1]:
        raise ConfigurationError("expected a square matrix")
    if np.any(X < -1e-15) or np.max(np.abs(X.sum(axis=1) - 1.0)) > 1e-10:
        raise ConfigurationError("matrix is not row-stochastic")
    return X


def delta_metric(X) -> float:
    """Largest within-column spread: max_j max_{i1,i2} |X[i1,j] - X[i2,j]|."""
    X = _check_stochastic(X)
    return float(np.max(X.max(axis=0) - X.min(axis=0)))


def lambda_metric(X) -> float:
    """1 - min over row pairs of the overlap sum_j min(X[i1,j], X[i2,j])."""
    X = _check_stochastic(X)
    overlap = np.minimum(X[:, None, :], X[None, :, :]).sum(axis=2)
    return float(1.0 - overlap.min())


def consensus_deviation(X) -> float:
    """Frobenius norm of X minus its column-mean row broadcast."""
    X = np.asarray(X, dtype=np.float64)
    return float(np.linalg.norm(X - X.mean(axis=0, keepdims=True)))


@dataclass(frozen=True)
class ProductBoundReport:
    lhs: float
    rhs: float
    slack: float
    passed: bool


def verify_product_bound(matrices, tol: float = 1e-10) -> ProductBoundReport:
    """Check delta(X1 X2 ... Xm) <= prod lambda(Xi)."""
    mats = [_check_stochastic(X) for X in matrices]
    if not mats or len({X.shape for X in mats}) != 1:
        raise ConfigurationError("need at least one matrix, all the same size")
    prod = mats[0]
    for X in mats[1:]:
        prod = prod @ X
    prod = prod / prod.sum(axis=1, keepdims=True)
    lhs = delta_metric(prod)
    rhs = float(np.prod([lambda_metric(X) for X in mats]))
    return ProductBoundReport(lhs, rhs, rhs - lhs, lhs <= rhs + tol)


# --------------------------------------------------------------------------- #
# impossibility constructions


@dataclass
class TwoExecutionReport:
    n: int
    w1: np.ndarray
    w2: np.ndarray
    gap: np.ndarray
    expected_gap: np.ndarray
    gap_ok: bool
    applicable: bool
    traces_identical: bool | None
    notes: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.applicable and self.gap_ok and self.traces_identical is not False

    def as_record(self) -> dict:
        return {
            "n": self.n,
            "w1": self.w1.tolist(),
            "w2": self.w2.tolist(),
            "gap": self.gap.tolist(),
            "expected_gap": self.expected_gap.tolist(),
            "gap_ok": self.gap_ok,
            "applicable": self.applicable,
            "traces_identical": self.traces_identical,
            "passed": self.passed,
            "notes": self.notes,
        }


def two_execution_gap(
    n: int,
    features: FeatureMap,
    mdp: NetworkedMdp,
    policy: JointPolicy,
    *,
    seed=0,
    horizon: int = 200,
    simulate: bool = True,
) -> TwoExecutionReport:
    """Two executions with rewards r_i = i that the middle agents cannot tell apart.

    Execution 1 has agent 1 Byzantine, execution 2 agent n (1-based). The
    uniform-average targets differ by E_{d_pi}[phi], yet when the Byzantine
    agent behaves correctly the middle agents' trajectories coincide.
    """
    from .adversary import AttackModel
    from .aggregation import AggregationRule
    from .protocol import AgentRoster, StepSchedule, run_bdtd

    if n < 3:
        raise ConfigurationError("the construction needs n >= 3")
    if mdp.num_agents != n:
        raise ConfigurationError(f"MDP has {mdp.num_agents} agents, expected {n}")
    base = mdp.with_rewards(np.arange(1, n + 1, dtype=np.float64), r_max=float(n))
    spec1 = FixedPointSpec(base, policy, features, uniform_weights(n, range(1, n)))
    spec2 = FixedPointSpec(base, policy, features, uniform_weights(n, range(0, n - 1)))
    w1 = weighted_fixed_point(spec1)
    w2 = weighted_fixed_point(spec2)
    d = stationary_distribution(induced_chain(base, policy))
    e_phi = features.table.T @ d
    gap = w1 - w2
    notes = []
    applicable = bool(np.any(np.abs(e_phi) > 1e-12))
    if not applicable:
        notes.append("E[phi] is zero: the two targets coincide and the construction does not apply")
    gap_ok = bool(np.max(np.abs(gap - e_phi)) <= 1e-10)

    identical = None
    if simulate and n >= 4:
        radius = None
        if features.phi_min:
            from .features import default_radius

            radius = default_radius(base.r_max, features.phi_min, base.discount)
        traces = []
        for byz in ((0,), (n - 1,)):
            roster = AgentRoster(n, 1, byz)
            traces.append(
                run_bdtd(base, policy, features, roster, AggregationRule("trimmed_mean"), AttackModel("none"),
                         StepSchedule("harmonic", 1.0), radius, horizon, seed)
            )
        identical = all(
            traces[0].agent_params(i).tobytes() == traces[1].agent_params(i).tobytes() for i in range(1, n - 1)
        )
    elif simulate:
        notes.append("n < 4 cannot host f = 1 under n >= 3f+1; trace check skipped")
    return TwoExecutionReport(n, w1, w2, gap, e_phi, gap_ok, applicable, identical, notes)


@dataclass
class WeightSupportReport:
    n: int
    f: int
    q: int
    rewards: np.ndarray
    feasible_vertices: list
    max_weight: np.ndarray  # per normal agent, the largest alpha_i consistent with the constraint
    forced_zero: list[int]  # 1-based agents forced to zero weight
    max_support: int
    bound: int
    method: str
    lp_agrees: bool | None

    @property
    def passed(self) -> bool:
        return (
            self.forced_zero == list(range(1, self.f + 1))
            and self.max_support == self.bound
            and self.lp_agrees is not False
        )

    def as_record(self) -> dict:
        return {
            "n": self.n,
            "f": self.f,
            "q": self.q,
            "rewards": self.rewards.tolist(),
            "tail_byzantine_interval": [1, self.f + 1],
            "head_byzantine_interval": [self.f + 1, self.n],
            "forced_zero": self.forced_zero,
            "max_support": self.max_support,
            "bound": self.bound,
            "method": self.method,
            "lp_agrees": self.lp_agrees,
            "passed": self.passed,
        }


def support_bound_rewards(n: int, f: int, q: int) -> np.ndarray:
    """r_i = i for i <= f and i > n-q; r_i = f+1 in between (1-based agents)."""
    r = np.arange(1, n + 1, dtype=np.float64)
    r[f : n - q] = f + 1
    return r


def _feasible_vertices(r: np.ndarray, target: float, tol: float = 1e-12):
    """Vertices of {alpha >= 0, sum alpha = 1, alpha . r = target}: at most two nonzeros."""
    verts = []
    m = r.size
    for i in range(m):
        if abs(r[i] - target) <= tol:
            v = np.zeros(m)
            v[i] = 1.0
            verts.append(v)
    for i, j in itertools.combinations(range(m), 2):
        if abs(r[i] - r[j]) <= tol:
            continue
        t = (target - r[j]) / (r[i] - r[j])
        if tol < t < 1 - tol:
            v = np.zeros(m)
            v[i], v[j] = t, 1 - t
            verts.append(v)
    return verts


def _lp_max_weights(r: np.ndarray, target: float) -> np.ndarray:
    from scipy.optimize import linprog

    m = r.size
    out = np.empty(m)
    A_eq = np.vstack([np.ones(m), r])
    b_eq = np.array([1.0, target])
    for i in range(m):
        c = np.zeros(m)
        c[i] = -1.0
        res = linprog(c, A_eq=A_eq, b_eq=b_eq, bounds=[(0, None)] * m, method="highs")
        if not res.success:
            raise ConfigurationError(f"LP for agent {i + 1} failed: {res.message}")
        out[i] = -res.fun
    return out


def weight_support_bound(n: int, f: int, q: int, *, enumerate_up_to: int = 13, tol: float = 1e-9) -> WeightSupportReport:
    """Which weightings stay consistent whether the first f or the last q agents are Byzantine.

    With agents n-q+1..n Byzantine, a normal agent that cannot tell the two
    situations apart must settle on f+1, so feasible weights over the normal
    agents 1..n-q satisfy sum_i alpha_i r_i = f+1.
    """
    if f < 1 or not 0 < q <= f or n < 3 * f + 1:
        raise ConfigurationError(f"need f >= 1, 0 < q <= f and n >= 3f+1; got n={n}, f={f}, q={q}")
    rewards = support_bound_rewards(n, f, q)
    r = rewards[: n - q]
    target = float(f + 1)
    verts = []
    lp_agrees = None
    if n <= enumerate_up_to:
        verts = _feasible_vertices(r, target)
        if not verts:
            raise ConfigurationError("no feasible weighting")
        max_weight = np.max(np.stack(verts), axis=0)
        method = "vertex enumeration"
        lp_agrees = bool(np.allclose(_lp_max_weights(r, target), max_weight, atol=1e-9))
    else:
        max_weight = _lp_max_weights(r, target)
        method = "linear programming"
    positive = max_weight > tol
    forced = [i + 1 for i in range(r.size) if not positive[i]]
    # the feasible set is convex, so one weighting is positive on every index any vertex can make positive
    support = int(positive.sum())
    return WeightSupportReport(n, f, q, rewards, verts, max_weight, forced, support, (n - q) - f, method, lp_agrees)
