"""Byzantine message crafting.

Byzantine agents interact with the environment honestly; only the values
they send to neighbours are poisoned. Each attack is a pure function of
the round context and the adversary's own random stream.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .aggregation import krum_subset
from .errors import ConfigurationError

ATTACKS = ("none", "gaussian", "trim_attack", "krum_attack", "fixed_value")
CONSISTENCY = ("per_neighbor", "broadcast")


@dataclass(frozen=True)
class AttackModel:
    kind: str = "none"
    consistency: str = "per_neighbor"
    fixed_value: float = 0.0
    trim_band: float = 4.0
    krum_lambda_max: float | None = None
    krum_search_steps: int = 30
    krum_subset: str | int = "n-f"

    def __post_init__(self):
        if self.kind not in ATTACKS:
            raise ConfigurationError(f"unknown attack {self.kind!r}; choose from {ATTACKS}")
        if self.consistency not in CONSISTENCY:
            raise ConfigurationError(f"consistency must be one of {CONSISTENCY}")
        if self.trim_band <= 0:
            raise ConfigurationError("trim_band must be positive")
        if self.krum_search_steps < 1:
            raise ConfigurationError("krum_search_steps must be >= 1")


def gaussian_attack(rng, d: int) -> np.ndarray:
    if d < 1:
        raise ConfigurationError("dimension must be >= 1")
    return rng.standard_normal(d)


def _trim_stats(benign: np.ndarray, band: float):
    mu = benign.mean(axis=0)
    sigma = benign.std(axis=0)
    sigma = np.where(sigma > 0, sigma, 1.0)
    below = mu >= 0
    anchor = np.where(below, benign.min(axis=0), benign.max(axis=0))
    direction = np.where(below, -1.0, 1.0)
    return anchor, direction, band * sigma


def _trim_draw(stats, count: int, rng) -> np.ndarray:
    anchor, direction, width = stats
    u = rng.random((count, anchor.size))
    u = np.where(u > 0, u, 0.5)  # keep the band open at the anchor
    return anchor + direction * width * u


def trim_attack(benign_params, f: int, rng, band: float = 4.0) -> np.ndarray:
    """f values per coordinate just beyond the benign range, opposite the benign mean.

    Where the benign mean is nonnegative the values fall in
    (min - band*sigma, min); otherwise in (max, max + band*sigma).
    """
    benign = np.atleast_2d(np.asarray(benign_params, dtype=np.float64))
    if benign.shape[0] < 1:
        raise ConfigurationError("trim attack needs at least one benign vector")
    if f == 0:
        return np.empty((0, benign.shape[1]))
    return _trim_draw(_trim_stats(benign, band), f, rng)


def krum_attack(
    benign_params,
    f: int,
    *,
    f_declared: int | None = None,
    subset_mode="n-f",
    search_steps: int = 30,
    lambda_max: float = 10.0,
) -> np.ndarray:
    """f identical vectors ``mean - lam * sign(mean)`` that Krum still selects.

    ``lam`` is the largest value in (0, lambda_max] found by bisection for
    which Krum over benign + crafted picks a crafted vector; lambda_max/2 if
    no tried value succeeds.
    """
    benign = np.atleast_2d(np.asarray(benign_params, dtype=np.float64))
    d = benign.shape[1]
    if f == 0:
        return np.empty((0, d))
    n = benign.shape[0] + f
    if n < 2:
        raise ConfigurationError("krum attack needs n >= 2")
    f_rule = f if f_declared is None else f_declared
    k = krum_subset(n, f_rule, subset_mode)
    base = benign.mean(axis=0)
    sign = np.where(base >= 0, 1.0, -1.0)
    lam = _kernels.krum_attack_lambda(benign, f, k, lambda_max, search_steps)
    if lam < 0:
        lam = lambda_max / 2
    return np.tile(base - lam * sign, (f, 1))


@dataclass
class RoundContext:
    """What an omniscient adversary knows when crafting round ``round``."""

    round: int
    benign: np.ndarray
    num_byzantine: int
    f: int
    radius: float | None = None
    _cache: dict = field(default_factory=dict, repr=False)


def poison_outgoing(attack: AttackModel, true_param, sender_rank: int, neighbor_id: int, ctx: RoundContext, rng) -> np.ndarray:
    """Value Byzantine sender number ``sender_rank`` sends to ``neighbor_id`` this round."""
    true_param = np.asarray(true_param, dtype=np.float64)
    d = true_param.size
    kind = attack.kind
    if kind == "none":
        return true_param.copy()
    if kind == "fixed_value":
        return np.full(d, float(attack.fixed_value))
    broadcast = attack.consistency == "broadcast"
    cache = ctx._cache
    if kind == "gaussian":
        if broadcast:
            key = ("gaussian", sender_rank)
            if key not in cache:
                cache[key] = gaussian_attack(rng, d)
            return cache[key].copy()
        return gaussian_attack(rng, d)
    if kind == "trim_attack":
        if "trim_stats" not in cache:
            cache["trim_stats"] = _trim_stats(np.atleast_2d(ctx.benign), attack.trim_band)
        if broadcast:
            key = ("trim", sender_rank)
            if key not in cache:
                cache[key] = _trim_draw(cache["trim_stats"], 1, rng)[0]
            return cache[key].copy()
        return _trim_draw(cache["trim_stats"], 1, rng)[0]
    # krum_attack: deterministic given the benign parameters, identical for all senders
    if "krum" not in cache:
        lam_max = attack.krum_lambda_max
        if lam_max is None:
            lam_max = 10.0 * ctx.radius if ctx.radius else 10.0 * (1.0 + float(np.max(np.abs(ctx.benign))))
        cache["krum"] = krum_attack(
            ctx.benign,
            max(ctx.num_byzantine, 1),
            f_declared=ctx.f,
            subset_mode=attack.krum_subset,
            search_steps=attack.krum_search_steps,
            lambda_max=lam_max,
        )
    return cache["krum"][0].copy()
