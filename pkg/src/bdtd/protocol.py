"""Synchronous-round simulator for Byzantine-tolerant decentralized TD learning.

Every round on the complete graph:

1. each agent sends its parameter to every other agent; Byzantine agents
   send attack values to normal receivers;
2. each receiver drops senders whose value left the projection ball, then
   aggregates what it received (its own value included by default);
3. the environment takes one joint step;
4. each agent forms its TD error from its own reward and its pre-consensus
   parameter and takes a projected TD step from the aggregated value.

Byzantine agents run the honest update on the values they receive, so with
the ``none`` attack they are indistinguishable from normal agents.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .adversary import AttackModel, RoundContext, _trim_draw, _trim_stats, poison_outgoing
from .aggregation import AggregationRule
from .errors import ConfigurationError, SimulationError
from .features import outside_ball, project_ball

log = logging.getLogger(__name__)

CSV_VERSION = 1
PROJECTIONS = ("coordinate", "l2", "none")


def step_size(kind: str, k: int, eta0: float = 1.0) -> float:
    """harmonic: eta0 / k (eta0 at k = 0); constant: eta0."""
    if kind == "harmonic":
        return eta0 / k if k >= 1 else eta0
    if kind == "constant":
        return eta0
    raise ConfigurationError(f"unknown step-size schedule {kind!r}")


@dataclass(frozen=True)
class StepSchedule:
    kind: str = "harmonic"
    eta0: float = 1.0

    def __post_init__(self):
        step_size(self.kind, 1, self.eta0)
        if self.eta0 <= 0:
            raise ConfigurationError("eta0 must be positive")

    def __call__(self, k: int) -> float:
        return step_size(self.kind, k, self.eta0)


@dataclass(frozen=True, eq=False)
class AgentRoster:
    """Who is in the network and who is Byzantine.

    ``initial_params`` is an (n, d) array; None starts everyone at zero.
    """

    n: int
    f: int
    byzantine: tuple[int, ...] = ()
    initial_params: np.ndarray | None = None
    include_self: bool = True

    def __post_init__(self):
        byz = tuple(sorted(int(b) for b in self.byzantine))
        object.__setattr__(self, "byzantine", byz)
        if self.f < 0 or self.n < 1:
            raise ConfigurationError("need n >= 1 and f >= 0")
        if self.n < 3 * self.f + 1:
            raise ConfigurationError(f"n={self.n} violates n >= 3f+1 with f={self.f}")
        if len(set(byz)) != len(byz) or len(byz) > self.f:
            raise ConfigurationError(f"{len(byz)} Byzantine agents exceed f={self.f}")
        if any(not 0 <= b < self.n for b in byz):
            raise ConfigurationError("Byzantine id out of range")
        if self.initial_params is not None:
            p = np.atleast_2d(np.asarray(self.initial_params, dtype=np.float64))
            if p.shape[0] != self.n:
                raise ConfigurationError("initial_params needs one row per agent")
            object.__setattr__(self, "initial_params", p)

    @property
    def normal(self) -> tuple[int, ...]:
        byz = set(self.byzantine)
        return tuple(i for i in range(self.n) if i not in byz)

    def params0(self, d: int) -> np.ndarray:
        if self.initial_params is None:
            return np.zeros((self.n, d))
        if self.initial_params.shape[1] != d:
            raise ConfigurationError(f"initial params have dim {self.initial_params.shape[1]}, features {d}")
        return self.initial_params.copy()


@dataclass
class RoundMessageBuffer:
    """values[r, j] is what receiver r got from sender j this round."""

    values: np.ndarray
    delivered: np.ndarray

    def fill_undelivered(self, default) -> None:
        self.values[~self.delivered] = default


@dataclass
class LocalView:
    """Each receiver's private record of excluded senders."""

    removed: np.ndarray
    f: int

    @classmethod
    def fresh(cls, n: int, f: int) -> "LocalView":
        return cls(np.zeros((n, n), dtype=bool), f)

    @property
    def n_local(self) -> np.ndarray:
        return self.removed.shape[1] - self.removed.sum(axis=1)

    @property
    def f_local(self) -> np.ndarray:
        return np.maximum(self.f - self.removed.sum(axis=1), 0)


def exclusion_filter(buffer: RoundMessageBuffer, radius: float, view: LocalView, mode: str = "coordinate"):
    """Permanently drop, per receiver, every sender whose value left the ball.

    Returns the updated view, the mask of senders each receiver still counts,
    and the list of new (receiver, sender) removals.
    """
    out = outside_ball(buffer.values, radius, mode)
    if not out.any():
        return view, ~view.removed, []
    out &= buffer.delivered
    np.fill_diagonal(out, False)
    new = out & ~view.removed
    removed = view.removed | new
    over = view.f - removed.sum(axis=1) < 0
    if np.any(over & new.any(axis=1)):
        log.warning("local f would drop below 0 for receivers %s; clamped at 0", np.flatnonzero(over).tolist())
    events = [(int(r), int(j)) for r, j in zip(*np.nonzero(new))]
    return LocalView(removed, view.f), ~removed, events


@dataclass(eq=False)
class RunTrace:
    """Everything recorded during one run; arrays are indexed by round."""

    states: np.ndarray  # (H+1,)
    actions: np.ndarray  # (H, n)
    rewards: np.ndarray  # (H, n), all agents
    params: np.ndarray  # (H+1, |N|, d), normal agents
    consensus: np.ndarray  # (H, |N|, d)
    td_errors: np.ndarray  # (H, |N|)
    sbe: np.ndarray  # (H,)
    ce: np.ndarray  # (H+1,)
    normal_ids: tuple[int, ...]
    byzantine_ids: tuple[int, ...]
    exclusions: list = field(default_factory=list)
    seed: int | None = None
    config_hash: str | None = None

    @property
    def horizon(self) -> int:
        return len(self.sbe)

    @property
    def msbe(self) -> np.ndarray:
        return np.cumsum(self.sbe) / np.arange(1, self.horizon + 1)

    def agent_params(self, agent: int) -> np.ndarray:
        return self.params[:, self.normal_ids.index(agent)]

    def digest(self) -> str:
        h = hashlib.sha256()
        for arr in (self.states, self.actions, self.rewards, self.params, self.consensus, self.td_errors, self.sbe, self.ce):
            h.update(np.ascontiguousarray(arr).tobytes())
        h.update(repr(self.exclusions).encode())
        return h.hexdigest()

    def write_csv(self, path) -> Path:
        """Per (round, normal agent) rows; enough to recompute SBE, MSBE and CE."""
        path = Path(path)
        d = self.params.shape[2]
        normal = list(self.normal_ids)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["round", "agent"] + [f"w{c}" for c in range(d)] + ["reward", "td_error", "ce_contribution"])
            for k in range(self.horizon):
                p = self.params[k]
                dev = ((p - p.mean(axis=0)) ** 2).sum(axis=1) / len(normal)
                for a, agent in enumerate(normal):
                    w.writerow(
                        [k, agent]
                        + [repr(float(x)) for x in p[a]]
                        + [repr(float(self.rewards[k, agent])), repr(float(self.td_errors[k, a])), repr(float(dev[a]))]
                    )
        return path

    def manifest(self, config=None, code_version: str | None = None) -> dict:
        from . import __version__

        return {
            "csv_version": CSV_VERSION,
            "seed": self.seed,
            "config_hash": self.config_hash,
            "config": config,
            "code_version": code_version or __version__,
            "horizon": self.horizon,
            "normal_ids": list(self.normal_ids),
            "byzantine_ids": list(self.byzantine_ids),
            "exclusions": [list(e) for e in self.exclusions],
            "trace_digest": self.digest(),
        }

    def write_manifest(self, path, config=None) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.manifest(config), indent=2, sort_keys=True))
        return path


def sbe_from_csv_rows(rows, gamma=None) -> np.ndarray:
    """Per-round SBE recomputed from trace CSV rows (see :meth:`RunTrace.write_csv`).

    The residual for agent i is its TD error with its own reward replaced by
    the normal-agent mean reward.
    """
    by_round: dict[int, list[tuple[float, float]]] = {}
    for row in rows:
        by_round.setdefault(int(row["round"]), []).append((float(row["reward"]), float(row["td_error"])))
    out = np.empty(len(by_round))
    for k in sorted(by_round):
        r, delta = np.array(by_round[k]).T
        out[k] = np.mean((delta - r + r.mean()) ** 2)
    return out


def _poison_round(attack, W, byz, normal, ctx, rng) -> np.ndarray:
    """Messages from each Byzantine sender to each normal receiver, shape (q, |N|, d)."""
    q, m, d = len(byz), len(normal), W.shape[1]
    if attack.consistency == "per_neighbor" and attack.kind == "gaussian":
        return rng.standard_normal((q, m, d))
    if attack.consistency == "per_neighbor" and attack.kind == "trim_attack":
        stats = _trim_stats(ctx.benign, attack.trim_band)
        return _trim_draw(stats, q * m, rng).reshape(q, m, d)
    if attack.kind in ("krum_attack", "fixed_value"):
        # one value for every sender and receiver
        v = poison_outgoing(attack, W[byz[0]], 0, int(normal[0]), ctx, rng)
        return np.broadcast_to(v, (q, m, d))
    out = np.empty((q, m, d))
    for rank, b in enumerate(byz):
        for a, r in enumerate(normal):
            out[rank, a] = poison_outgoing(attack, W[b], rank, r, ctx, rng)
    return out


def run_bdtd(
    env,
    policy,
    features,
    roster: AgentRoster,
    rule: AggregationRule,
    attack: AttackModel,
    schedule: StepSchedule,
    radius: float | None,
    horizon: int,
    seed=0,
    *,
    projection: str = "coordinate",
    exclusion: bool = True,
    default_value: float = 0.0,
    drop_prob: float = 0.0,
    initial_state: int | None = None,
    config_hash: str | None = None,
) -> RunTrace:
    """Run the protocol for ``horizon`` rounds and return the full trace.

    ``env`` is a :class:`~bdtd.mdp.NetworkedMdp` or any object with the same
    ``sample_step``/``initial_state``/``discount`` surface. ``radius=None`` or
    ``projection='none'`` disables projection and exclusion. Randomness comes
    from three independent streams spawned from ``seed``: environment,
    adversary and network, so attacks never perturb the sampled trajectory.
    """
    if horizon < 1:
        raise ConfigurationError("horizon must be >= 1")
    if projection not in PROJECTIONS:
        raise ConfigurationError(f"projection must be one of {PROJECTIONS}")
    if env.num_agents != roster.n:
        raise ConfigurationError(f"environment has {env.num_agents} agents, roster {roster.n}")
    if not 0.0 <= drop_prob < 1.0:
        raise ConfigurationError("drop_prob must lie in [0, 1)")
    policy.check_compatible(env.num_agents, env.action_counts, getattr(env, "state_count", None))
    project = projection != "none" and radius is not None
    if project and radius <= 0:
        raise ConfigurationError("radius must be positive")
    if rule.kind == "scclip" and rule.scclip_tau is None:
        if radius is None:
            raise ConfigurationError("scclip needs scclip_tau when no radius is set")
        rule = replace(rule, scclip_tau=radius / 10.0)

    d = features.dim
    n, f = roster.n, roster.f
    normal = np.array(roster.normal, dtype=np.int64)
    byz = list(roster.byzantine)
    m = len(normal)
    if m == 0:
        raise ConfigurationError("no normal agents")
    W = roster.params0(d)
    if project and np.any(outside_ball(W, radius, projection)):
        raise ConfigurationError("initial parameters must lie inside the projection ball")
    gamma = env.discount

    env_ss, adv_ss, net_ss = np.random.SeedSequence(seed).spawn(3)
    env_rng = np.random.default_rng(env_ss)
    adv_rng = np.random.default_rng(adv_ss)
    net_rng = np.random.default_rng(net_ss)

    s = env.initial_state(env_rng) if initial_state is None else int(initial_state)
    states = np.empty(horizon + 1, dtype=np.int64)
    actions_log = np.empty((horizon, n), dtype=np.int64)
    rewards_log = np.empty((horizon, n))
    params = np.empty((horizon + 1, m, d))
    consensus = np.empty((horizon, m, d))
    td_log = np.empty((horizon, m))
    sbe = np.empty(horizon)
    ce = np.empty(horizon + 1)
    states[0] = s
    params[0] = W[normal]
    ce[0] = _ce(W[normal])

    view = LocalView.fresh(n, f)
    eye = np.eye(n, dtype=bool)
    buffer = RoundMessageBuffer(np.empty((n, n, d)), np.ones((n, n), dtype=bool))
    rows, cols = normal[:, None], np.array(byz, dtype=np.int64)[None, :]
    events: list[tuple[int, int, int]] = []
    poisoning = attack.kind != "none" and len(byz) > 0
    default = np.full(d, float(default_value))

    for k in range(horizon):
        buffer.values[:] = W[None, :, :]
        if poisoning:
            ctx = RoundContext(k, W[normal], len(byz), f, radius if project else None)
            buffer.values[rows, cols] = _poison_round(attack, W, byz, normal, ctx, adv_rng).transpose(1, 0, 2)
        if drop_prob > 0:
            buffer.delivered = (net_rng.random((n, n)) >= drop_prob) | eye
            buffer.fill_undelivered(default)
        if project and exclusion:
            view, counted, new = exclusion_filter(buffer, radius, view, projection)
            events.extend((k, r, j) for r, j in new)
        else:
            counted = ~view.removed
        mask = counted & ~eye if (rule.uses_reference or not roster.include_self) else counted
        W_tilde = rule.aggregate_batch(buffer.values, mask, W, view.f_local)

        acts, s_next, rewards = env.sample_step(policy, s, env_rng)
        phi_s = features(s)
        phi_next = features(s_next)
        v_s = W @ phi_s
        v_next = W @ phi_next
        delta = rewards + gamma * v_next - v_s
        W_new = W_tilde + schedule(k) * delta[:, None] * phi_s[None, :]
        if project:
            W_new = project_ball(W_new, radius, projection)
        if not np.all(np.isfinite(W_new[normal])):
            raise SimulationError(f"non-finite parameter at round {k} (seed {seed})")

        r_norm = rewards[normal]
        resid = r_norm.sum() / m + gamma * v_next[normal] - v_s[normal]
        sbe[k] = (resid @ resid) / m
        actions_log[k] = acts
        rewards_log[k] = rewards
        consensus[k] = W_tilde[normal]
        td_log[k] = delta[normal]
        W = W_new
        s = s_next
        states[k + 1] = s
        Wn = W[normal]
        params[k + 1] = Wn
        dev = Wn - Wn.sum(axis=0) / m
        ce[k + 1] = float((dev * dev).sum()) / m

    return RunTrace(
        states=states,
        actions=actions_log,
        rewards=rewards_log,
        params=params,
        consensus=consensus,
        td_errors=td_log,
        sbe=sbe,
        ce=ce,
        normal_ids=tuple(int(i) for i in normal),
        byzantine_ids=tuple(byz),
        exclusions=events,
        seed=None if seed is None else int(seed) if np.isscalar(seed) else None,
        config_hash=config_hash,
    )


def _ce(P: np.ndarray) -> float:
    dev = P - P.mean(axis=0)
    return float((dev * dev).sum() / P.shape[0])
