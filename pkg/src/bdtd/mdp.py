"""Finite networked multi-agent MDPs, joint policies and exact oracles.

Joint actions are enumerated in C order over the per-agent action sets, so
agent 0 is the most significant digit of a joint-action index.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, ConvergenceError

SCHEMA_VERSION = 1
MAX_JOINT_ACTIONS = 10**6
ROW_SUM_TOL = 1e-12


def _as_rng(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


@dataclass(frozen=True, eq=False)
class NetworkedMdp:
    """Tabular networked MDP.

    ``transition[s, j, t]`` is the probability of moving from ``s`` to ``t``
    under joint action ``j`` and ``rewards[i, s, j]`` is agent ``i``'s
    deterministic reward.
    """

    transition: np.ndarray
    rewards: np.ndarray
    action_counts: tuple[int, ...]
    discount: float
    r_max: float | None = None

    def __post_init__(self):
        P = np.asarray(self.transition, dtype=np.float64)
        R = np.asarray(self.rewards, dtype=np.float64)
        counts = tuple(int(a) for a in self.action_counts)
        object.__setattr__(self, "transition", P)
        object.__setattr__(self, "rewards", R)
        object.__setattr__(self, "action_counts", counts)
        if not counts or min(counts) < 1:
            raise ConfigurationError("every agent needs at least one action")
        joint = math.prod(counts)
        if P.ndim != 3 or P.shape[0] != P.shape[2] or P.shape[1] != joint:
            raise ConfigurationError(
                f"transition must have shape (S, {joint}, S), got {P.shape}"
            )
        if R.shape != (len(counts), P.shape[0], joint):
            raise ConfigurationError(
                f"rewards must have shape ({len(counts)}, {P.shape[0]}, {joint}), got {R.shape}"
            )
        if np.any(P < 0) or np.any(P > 1):
            raise ConfigurationError("transition probabilities must lie in [0, 1]")
        if np.max(np.abs(P.sum(axis=2) - 1.0)) > ROW_SUM_TOL:
            raise ConfigurationError("transition rows must sum to 1")
        if not 0.0 < self.discount < 1.0:
            raise ConfigurationError(f"discount must lie in (0, 1), got {self.discount}")
        bound = float(np.max(np.abs(R))) if R.size else 0.0
        if self.r_max is None:
            object.__setattr__(self, "r_max", bound)
        elif bound > self.r_max + 1e-12:
            raise ConfigurationError(f"|reward| {bound} exceeds r_max {self.r_max}")

    @property
    def num_agents(self) -> int:
        return len(self.action_counts)

    @property
    def state_count(self) -> int:
        return self.transition.shape[0]

    @property
    def joint_action_count(self) -> int:
        return self.transition.shape[1]

    @cached_property
    def _radix(self) -> np.ndarray:
        counts = np.asarray(self.action_counts, dtype=np.int64)
        return np.concatenate([np.cumprod(counts[::-1])[::-1][1:], [1]])

    @cached_property
    def _cum_transition(self) -> np.ndarray:
        cum = np.cumsum(self.transition, axis=2)
        cum[..., -1] = 1.0
        return cum

    def initial_state(self, rng) -> int:
        return int(_as_rng(rng).integers(self.state_count))

    def sample_step(self, policy: "JointPolicy", state: int, rng):
        if not 0 <= state < self.state_count:
            raise ConfigurationError(f"state {state} out of range")
        rng = _as_rng(rng)
        u = rng.random(self.num_agents + 1)
        actions = policy.sample_actions(state, u[:-1])
        j = int(actions @ self._radix)
        nxt = min(int(np.searchsorted(self._cum_transition[state, j], u[-1], side="right")), self.state_count - 1)
        return actions, nxt, self.rewards[:, state, j].copy()

    def with_rewards(self, rewards, r_max: float | None = None) -> "NetworkedMdp":
        """Copy of this MDP with a replaced reward table.

        ``rewards`` may be a full ``(n, S, J)`` table or a length-n vector of
        constant per-agent rewards.
        """
        R = np.asarray(rewards, dtype=np.float64)
        if R.ndim == 1:
            R = np.broadcast_to(R[:, None, None], (self.num_agents, self.state_count, self.joint_action_count)).copy()
        return NetworkedMdp(self.transition, R, self.action_counts, self.discount, r_max)


@dataclass(frozen=True, eq=False)
class JointPolicy:
    """Product policy: one conditional distribution per agent.

    Each entry of ``agent_probs`` is either an ``(S, A_i)`` table or a
    state-independent ``(A_i,)`` vector.
    """

    agent_probs: tuple[np.ndarray, ...]

    def __post_init__(self):
        probs = tuple(np.asarray(p, dtype=np.float64) for p in self.agent_probs)
        object.__setattr__(self, "agent_probs", probs)
        for i, p in enumerate(probs):
            if p.ndim not in (1, 2):
                raise ConfigurationError(f"agent {i}: policy must be 1-D or 2-D")
            if np.any(p < 0) or np.max(np.abs(p.sum(axis=-1) - 1.0)) > ROW_SUM_TOL:
                raise ConfigurationError(f"agent {i}: policy rows must be distributions")

    @property
    def num_agents(self) -> int:
        return len(self.agent_probs)

    @property
    def action_counts(self) -> tuple[int, ...]:
        return tuple(p.shape[-1] for p in self.agent_probs)

    @property
    def state_independent(self) -> bool:
        return all(p.ndim == 1 for p in self.agent_probs)

    def agent(self, i: int, state: int) -> np.ndarray:
        p = self.agent_probs[i]
        return p if p.ndim == 1 else p[state]

    def joint(self, state: int) -> np.ndarray:
        """Joint action distribution pi(a|s) as a flat vector."""
        out = np.ones(1)
        for i in range(self.num_agents):
            out = np.multiply.outer(out, self.agent(i, state)).ravel()
        return out

    def joint_table(self, state_count: int) -> np.ndarray:
        return np.stack([self.joint(s) for s in range(state_count)])

    @cached_property
    def _cum(self) -> np.ndarray:
        # padded (S or 1, n, A_max) cumulative table; padding stays above any u < 1
        a_max = max(self.action_counts)
        rows = max((p.shape[0] for p in self.agent_probs if p.ndim == 2), default=1)
        cum = np.full((rows, self.num_agents, a_max), 2.0)
        for i, p in enumerate(self.agent_probs):
            c = np.cumsum(np.atleast_2d(p), axis=-1)
            c[:, -1] = 1.0
            cum[:, i, : p.shape[-1]] = c
        return cum

    def sample_actions(self, state: int, u: np.ndarray) -> np.ndarray:
        cum = self._cum[0 if self._cum.shape[0] == 1 else state]
        acts = (cum <= u[:, None]).sum(axis=1)
        return np.minimum(acts, np.asarray(self.action_counts) - 1)

    def check_compatible(self, num_agents: int, action_counts: Sequence[int], state_count: int | None):
        if self.num_agents != num_agents or tuple(action_counts) != self.action_counts:
            raise ConfigurationError(
                f"policy shape {self.action_counts} does not match MDP {tuple(action_counts)}"
            )
        for i, p in enumerate(self.agent_probs):
            if p.ndim == 2 and (state_count is None or p.shape[0] != state_count):
                raise ConfigurationError(f"agent {i}: policy table has wrong state count")


def uniform_policy(action_counts: Sequence[int]) -> JointPolicy:
    return JointPolicy(tuple(np.full(a, 1.0 / a) for a in action_counts))


def random_policy(mdp: NetworkedMdp, rng) -> JointPolicy:
    """State-dependent policy with Dirichlet(1) rows, strictly positive."""
    rng = _as_rng(rng)
    probs = []
    for a in mdp.action_counts:
        p = 0.9 * rng.dirichlet(np.ones(a), size=mdp.state_count) + 0.1 / a
        probs.append(p / p.sum(axis=1, keepdims=True))
    return JointPolicy(tuple(probs))


# --------------------------------------------------------------------------- #
# exact oracles


def induced_chain(mdp: NetworkedMdp, policy: JointPolicy) -> np.ndarray:
    """State-transition matrix P_pi(s, s') = sum_a pi(a|s) P(s, a, s')."""
    policy.check_compatible(mdp.num_agents, mdp.action_counts, mdp.state_count)
    pi = policy.joint_table(mdp.state_count)
    P = np.einsum("sj,sjt->st", pi, mdp.transition)
    return P / P.sum(axis=1, keepdims=True)


def stationary_distribution(P: np.ndarray, tol: float = 1e-10, max_iter: int = 10**6) -> np.ndarray:
    """Invariant distribution of a row-stochastic matrix by power iteration.

    Starts from a point mass on state 0 and applies ``P^(2^k)`` by repeated
    squaring, so ``max_iter`` single-step iterations cost only
    ``log2(max_iter)`` matrix products. A chain that does not settle, e.g. a
    periodic one, raises :class:`ConvergenceError`.
    """
    P = np.asarray(P, dtype=np.float64)
    if P.ndim != 2 or P.shape[0] != P.shape[1]:
        raise ConfigurationError("P must be square")
    if np.any(P < 0) or np.max(np.abs(P.sum(axis=1) - 1.0)) > 1e-10:
        raise ConfigurationError("P must be row-stochastic")
    d = np.zeros(P.shape[0])
    d[0] = 1.0
    M = P.copy()
    steps = 1
    while True:
        d = d @ M
        d = np.clip(d, 0.0, None)
        d /= d.sum()
        if np.max(np.abs(d @ P - d)) <= tol:
            return d
        if steps >= max_iter:
            raise ConvergenceError(
                f"power iteration did not converge within {max_iter} steps; "
                "the chain is likely periodic or reducible"
            )
        M = M @ M
        M /= M.sum(axis=1, keepdims=True)
        steps *= 2


def expected_rewards(mdp: NetworkedMdp, policy: JointPolicy) -> np.ndarray:
    """Per-agent expected one-step reward, shape (n, S)."""
    pi = policy.joint_table(mdp.state_count)
    return np.einsum("sj,isj->is", pi, mdp.rewards)


def exact_value_function(mdp: NetworkedMdp, policy: JointPolicy, weights) -> np.ndarray:
    """Solve (I - gamma P_pi) V = r_alpha for the alpha-weighted team reward."""
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (mdp.num_agents,) or np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
        raise ConfigurationError("weights must be a simplex vector over the agents")
    P = induced_chain(mdp, policy)
    r = w @ expected_rewards(mdp, policy)
    A = np.eye(mdp.state_count) - mdp.discount * P
    V = np.linalg.solve(A, r)
    if np.max(np.abs(A @ V - r)) > 1e-10 * max(1.0, np.max(np.abs(r))):
        raise ConvergenceError("value-function solve residual above 1e-10")
    return V


def sample_step(mdp, policy: JointPolicy, state: int, rng):
    """One environment transition: (per-agent actions, next state, rewards)."""
    return mdp.sample_step(policy, state, rng)


# --------------------------------------------------------------------------- #
# generators


def make_random_mdp(
    state_count: int,
    num_agents: int,
    actions_per_agent: int | Sequence[int],
    seed,
    *,
    r_max: float = 1.0,
    discount: float = 0.9,
    max_joint_actions: int = MAX_JOINT_ACTIONS,
) -> NetworkedMdp:
    """Random MDP with strictly positive transition rows (irreducible, aperiodic)."""
    if state_count < 1 or num_agents < 1:
        raise ConfigurationError("state_count and num_agents must be positive")
    counts = (
        (int(actions_per_agent),) * num_agents
        if np.isscalar(actions_per_agent)
        else tuple(int(a) for a in actions_per_agent)
    )
    if len(counts) != num_agents or min(counts) < 1:
        raise ConfigurationError("bad actions_per_agent")
    joint = math.prod(counts)
    if joint > max_joint_actions:
        raise ConfigurationError(f"{joint} joint actions exceed the cap of {max_joint_actions}")
    rng = _as_rng(seed)
    P = rng.dirichlet(np.ones(state_count), size=(state_count, joint))
    P = 0.95 * P + 0.05 / state_count
    P /= P.sum(axis=2, keepdims=True)
    R = rng.uniform(-r_max, r_max, size=(num_agents, state_count, joint))
    return NetworkedMdp(P, R, counts, discount, r_max)


ACTIONS = ("noop", "left", "right", "down", "up")
_MOVES = np.array([[0, 0], [-1, 0], [1, 0], [0, -1], [0, 1]], dtype=np.int64)


@dataclass(frozen=True, eq=False)
class GridSpreadEnv:
    """Grid discretisation of cooperative navigation.

    The global state is the tuple of agent cells, encoded as one integer in
    base ``grid_size**2`` (agent 0 most significant). Moves are
    deterministic and clamped at the walls. Rewards are evaluated on the
    post-move positions:

    ``r_i = -(mean over landmarks of distance from the nearest agent)
    - shaping * (agent i's own distance to its nearest landmark)
    + collision_penalty * [agent i shares its cell] + offset_i``

    with distances normalised by the grid diagonal.
    """

    grid_size: int
    num_agents: int
    landmarks: np.ndarray
    collision_penalty: float
    shaping_scale: float
    offsets: np.ndarray
    discount: float

    @property
    def action_counts(self) -> tuple[int, ...]:
        return (len(ACTIONS),) * self.num_agents

    @property
    def cells(self) -> int:
        return self.grid_size**2

    @property
    def state_count(self) -> int:
        return self.cells**self.num_agents

    @property
    def r_max(self) -> float:
        return 1.0 + abs(self.collision_penalty) + self.shaping_scale + float(np.max(np.abs(self.offsets)))

    @cached_property
    def _powers(self) -> np.ndarray:
        return self.cells ** np.arange(self.num_agents - 1, -1, -1, dtype=np.int64)

    @cached_property
    def _diag(self) -> float:
        return max(1.0, math.sqrt(2.0) * (self.grid_size - 1))

    def decode(self, state: int) -> np.ndarray:
        cells = (int(state) // self._powers) % self.cells
        out = np.empty((self.num_agents, 2), dtype=np.int64)
        out[:, 1], out[:, 0] = np.divmod(cells, self.grid_size)
        return out

    def encode(self, positions: np.ndarray) -> int:
        cells = positions[:, 1] * self.grid_size + positions[:, 0]
        return int(cells @ self._powers)

    def move(self, positions: np.ndarray, actions) -> np.ndarray:
        return np.clip(positions + _MOVES[np.asarray(actions)], 0, self.grid_size - 1)

    def rewards_at(self, positions: np.ndarray) -> np.ndarray:
        diff = positions[:, None, :] - self.landmarks[None, :, :]
        dist = np.sqrt((diff * diff).sum(axis=2)) / self._diag  # (agents, landmarks)
        cover = -dist.min(axis=0).mean()
        own = dist.min(axis=1)
        cells = positions[:, 1] * self.grid_size + positions[:, 0]
        counts = np.bincount(cells, minlength=self.cells)
        collide = counts[cells] > 1
        return cover - self.shaping_scale * own + self.collision_penalty * collide + self.offsets

    def reward(self, state: int, actions) -> np.ndarray:
        return self.rewards_at(self.move(self.decode(state), actions))

    def initial_state(self, rng) -> int:
        rng = _as_rng(rng)
        return self.encode(rng.integers(self.grid_size, size=(self.num_agents, 2)))

    def sample_step(self, policy: JointPolicy, state: int, rng):
        if not 0 <= state < self.state_count:
            raise ConfigurationError(f"state {state} out of range")
        rng = _as_rng(rng)
        actions = policy.sample_actions(0, rng.random(self.num_agents))
        pos = self.move(self.decode(state), actions)
        return actions, self.encode(pos), self.rewards_at(pos)

    def to_tabular(self, max_entries: int = 10**7) -> NetworkedMdp:
        """Enumerate the full kernel; only for small grids."""
        S, J = self.state_count, math.prod(self.action_counts)
        if S * J * S > max_entries:
            raise ConfigurationError(f"tabular kernel with {S}x{J}x{S} entries exceeds cap {max_entries}")
        P = np.zeros((S, J, S))
        R = np.zeros((self.num_agents, S, J))
        for s in range(S):
            pos = self.decode(s)
            for j, acts in enumerate(np.ndindex(*self.action_counts)):
                nxt = self.move(pos, acts)
                P[s, j, self.encode(nxt)] = 1.0
                R[:, s, j] = self.rewards_at(nxt)
        return NetworkedMdp(P, R, self.action_counts, self.discount, self.r_max)


def make_grid_spread_env(
    grid_size: int,
    num_agents: int,
    num_landmarks: int | None = None,
    collision_penalty: float = -1.0,
    seed=0,
    *,
    shaping_scale: float = 0.1,
    offset_scale: float = 0.1,
    discount: float = 0.9,
    max_states: int = 10**15,
) -> GridSpreadEnv:
    """Cooperative-navigation grid with seeded landmarks and per-agent offsets."""
    if grid_size < 2 or num_agents < 1:
        raise ConfigurationError("need grid_size >= 2 and num_agents >= 1")
    num_landmarks = num_agents if num_landmarks is None else int(num_landmarks)
    if not 1 <= num_landmarks <= grid_size**2:
        raise ConfigurationError("num_landmarks must fit on the grid")
    states = (grid_size**2) ** num_agents
    if states > max_states:
        raise ConfigurationError(f"{states} states exceed the desk-scale cap of {max_states}")
    if not 0.0 < discount < 1.0:
        raise ConfigurationError("discount must lie in (0, 1)")
    rng = _as_rng(seed)
    cells = rng.choice(grid_size**2, size=num_landmarks, replace=False)
    landmarks = np.stack([cells % grid_size, cells // grid_size], axis=1).astype(np.int64)
    offsets = rng.uniform(-offset_scale, offset_scale, size=num_agents) if offset_scale > 0 else np.zeros(num_agents)
    return GridSpreadEnv(grid_size, num_agents, landmarks, float(collision_penalty), float(shaping_scale), offsets, float(discount))


# --------------------------------------------------------------------------- #
# fixtures


def mdp_to_dict(mdp: NetworkedMdp, features=None) -> dict:
    out = {
        "schema_version": SCHEMA_VERSION,
        "kind": "networked_mdp",
        "num_agents": mdp.num_agents,
        "state_count": mdp.state_count,
        "action_counts": list(mdp.action_counts),
        "discount": mdp.discount,
        "r_max": mdp.r_max,
        "transition": mdp.transition.tolist(),
        "rewards": mdp.rewards.tolist(),
    }
    if features is not None:
        out["features"] = {"dim": features.dim, "table": features.table.tolist()}
    return out


def mdp_from_dict(data: dict):
    """Inverse of :func:`mdp_to_dict`; returns ``(mdp, features_or_None)``."""
    from .features import FeatureMap

    version = data.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigurationError(f"unsupported or missing schema_version: {version!r}")
    if data.get("kind") != "networked_mdp":
        raise ConfigurationError(f"unexpected fixture kind {data.get('kind')!r}")
    mdp = NetworkedMdp(
        np.array(data["transition"]),
        np.array(data["rewards"]),
        tuple(data["action_counts"]),
        float(data["discount"]),
        data.get("r_max"),
    )
    if mdp.state_count != data["state_count"] or mdp.num_agents != data["num_agents"]:
        raise ConfigurationError("fixture header disagrees with its tables")
    feats = None
    if "features" in data:
        feats = FeatureMap(np.array(data["features"]["table"], dtype=np.float64))
        if feats.dim != data["features"]["dim"]:
            raise ConfigurationError("feature dim disagrees with table")
    return mdp, feats


def save_mdp(path, mdp: NetworkedMdp, features=None) -> Path:
    path = Path(path)
    path.write_text(json.dumps(mdp_to_dict(mdp, features), indent=1))
    return path


def load_mdp(path):
    return mdp_from_dict(json.loads(Path(path).read_text()))
