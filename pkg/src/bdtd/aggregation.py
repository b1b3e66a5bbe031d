"""Consensus rules: f-trimmed mean and the baseline robust aggregators.

The module-level functions act on one receiver's multiset and are written
for clarity. :class:`AggregationRule` applies a rule to a whole round at
once (one multiset per receiver) through the batched kernels.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import AggregationError, ConfigurationError

log = logging.getLogger(__name__)

RULES = ("trimmed_mean", "fedavg", "krum", "coordinate_median", "fltrust", "scclip")
# rules that use the receiver's own parameter as a reference instead of a vote
REFERENCE_RULES = ("fltrust", "scclip")


def _as_points(values) -> np.ndarray:
    x = np.asarray(values, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2 or x.shape[0] == 0:
        raise AggregationError("expected a non-empty stack of vectors")
    return x


def trimmed_mean(values, f: int, rng=None) -> float:
    """Drop the f smallest and f largest values and average the rest.

    Ties are ordered uniformly at random when ``rng`` is given. Tied values
    are equal, so the tie order never changes the returned mean.
    """
    x = np.asarray(values, dtype=np.float64).ravel()
    n = x.size
    if f < 0 or n <= 2 * f:
        raise AggregationError(f"trimmed mean needs n > 2f, got n={n}, f={f}")
    if rng is not None:
        x = np.random.default_rng(rng).permutation(x)
    order = np.argsort(x, kind="stable")
    return float(x[order[f : n - f]].mean())


def trimmed_mean_vec(values, f: int, rng=None) -> np.ndarray:
    x = _as_points(values)
    rng = None if rng is None else np.random.default_rng(rng)
    return np.array([trimmed_mean(x[:, c], f, rng) for c in range(x.shape[1])])


def fedavg(values, weights=None) -> np.ndarray:
    x = _as_points(values)
    if weights is None:
        return x.mean(axis=0)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (x.shape[0],):
        raise AggregationError(f"{w.size} weights for {x.shape[0]} values")
    if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
        raise AggregationError("fedavg weights must be nonnegative and sum to 1")
    return w @ x


def krum_subset(n: int, f: int, mode="n-f") -> int:
    """Number of nearest neighbours each Krum score sums over."""
    if isinstance(mode, str):
        if mode == "n-f":
            k = n - f
        elif mode == "n-f-2":
            k = n - f - 2
        else:
            raise ConfigurationError(f"unknown krum subset mode {mode!r}")
    else:
        k = int(mode)
    return int(min(max(k, 1), n - 1))


def krum(values, f: int, subset_size: int | None = None) -> np.ndarray:
    """Select the value whose nearest ``subset_size`` others are closest (squared L2)."""
    x = _as_points(values)
    n = x.shape[0]
    if n < 2:
        raise AggregationError("krum needs at least two values")
    k = krum_subset(n, f) if subset_size is None else int(subset_size)
    if not 1 <= k <= n - 1:
        raise AggregationError(f"subset_size must lie in [1, n-1], got {k}")
    scores = _kernels.krum_scores(x, k)
    return x[int(np.argmin(scores))].copy()


def coordinate_median(values) -> np.ndarray:
    return np.median(_as_points(values), axis=0)


def fltrust(own, received) -> np.ndarray:
    """Cosine-trust weighted average of received vectors rescaled to ``||own||``."""
    own = np.atleast_1d(np.asarray(own, dtype=np.float64))
    x = _as_points(received)
    own_norm = np.linalg.norm(own)
    if own_norm == 0:
        log.debug("fltrust: own parameter is zero, keeping it")
        return own.copy()
    norms = np.linalg.norm(x, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    trust = np.where(norms > 0, np.maximum(0.0, (x @ own) / (safe * own_norm)), 0.0)
    if trust.sum() == 0:
        log.debug("fltrust: no received value is trusted, keeping own parameter")
        return own.copy()
    rescaled = x * (own_norm / safe)[:, None]
    return (trust @ rescaled) / trust.sum()


def scclip(own, received, tau: float) -> np.ndarray:
    """own + mean of received offsets, each clipped to norm tau."""
    if tau <= 0:
        raise AggregationError("scclip threshold must be positive")
    own = np.atleast_1d(np.asarray(own, dtype=np.float64))
    diff = _as_points(received) - own
    norms = np.linalg.norm(diff, axis=1)
    scale = np.minimum(1.0, tau / np.maximum(norms, np.finfo(float).tiny))
    return own + (diff * scale[:, None]).mean(axis=0)


@dataclass(frozen=True)
class AggregationRule:
    """A configured consensus rule.

    ``scclip_tau=None`` means "R/10", resolved by the caller that knows R.
    """

    kind: str = "trimmed_mean"
    f: int = 0
    krum_subset: str | int = "n-f"
    scclip_tau: float | None = None
    fedavg_weights: tuple[float, ...] | None = field(default=None)

    def __post_init__(self):
        if self.kind not in RULES:
            raise ConfigurationError(f"unknown rule {self.kind!r}; choose from {RULES}")
        if self.f < 0:
            raise ConfigurationError("f must be nonnegative")
        if self.scclip_tau is not None and self.scclip_tau <= 0:
            raise ConfigurationError("scclip_tau must be positive")

    @property
    def uses_reference(self) -> bool:
        return self.kind in REFERENCE_RULES

    def aggregate(self, values, own=None, f: int | None = None) -> np.ndarray:
        """Apply the rule to a single multiset (reference path)."""
        f = self.f if f is None else f
        if self.kind == "trimmed_mean":
            return trimmed_mean_vec(values, f)
        if self.kind == "fedavg":
            return fedavg(values, None if self.fedavg_weights is None else self.fedavg_weights)
        if self.kind == "krum":
            n = _as_points(values).shape[0]
            return krum(values, f, krum_subset(n, f, self.krum_subset))
        if self.kind == "coordinate_median":
            return coordinate_median(values)
        if own is None:
            raise AggregationError(f"{self.kind} needs the receiver's own parameter")
        if self.kind == "fltrust":
            return fltrust(own, values)
        return scclip(own, values, self._tau())

    def _tau(self) -> float:
        if self.scclip_tau is None:
            raise AggregationError("scclip threshold unresolved; set scclip_tau")
        return float(self.scclip_tau)

    def aggregate_batch(self, values, mask, own, f_local) -> np.ndarray:
        """One output per receiver.

        values: (m, n, d) messages, column j from sender j.
        mask: (m, n) senders counted by each receiver. For reference rules the
            caller passes a mask without the receiver itself.
        own: (m, d) receivers' own parameters.
        f_local: (m,) each receiver's current trim count.
        """
        values = np.asarray(values, dtype=np.float64)
        mask = np.asarray(mask, dtype=bool)
        own = np.asarray(own, dtype=np.float64)
        f_local = np.asarray(f_local, dtype=np.int64)
        counts = mask.sum(axis=1)
        kind = self.kind
        if kind == "trimmed_mean":
            if np.any(counts <= 2 * f_local):
                raise AggregationError("trimmed mean needs n > 2f for every receiver")
            return _kernels.trimmed_mean_batch(values, mask, f_local)
        if kind == "coordinate_median":
            if np.any(counts == 0):
                raise AggregationError("median of an empty multiset")
            return _kernels.median_batch(values, mask)
        if kind == "krum":
            if np.any(counts < 2):
                raise AggregationError("krum needs at least two values")
            subset = np.array([krum_subset(int(c), int(fl), self.krum_subset) for c, fl in zip(counts, f_local)])
            return _kernels.krum_batch(values, mask, subset)
        if kind == "fedavg":
            if self.fedavg_weights is None:
                w = mask.astype(np.float64)
            else:
                w = np.asarray(self.fedavg_weights, dtype=np.float64)[None, :] * mask
            total = w.sum(axis=1, keepdims=True)
            if np.any(total <= 0):
                raise AggregationError("fedavg over an empty or zero-weight multiset")
            return np.einsum("mn,mnd->md", w / total, values)
        if kind == "fltrust":
            own_norm = np.linalg.norm(own, axis=1)
            norms = np.linalg.norm(values, axis=2)
            safe = np.where(norms > 0, norms, 1.0)
            cos = np.einsum("mnd,md->mn", values, own) / (safe * np.where(own_norm > 0, own_norm, 1.0)[:, None])
            trust = np.where(mask & (norms > 0), np.maximum(cos, 0.0), 0.0)
            total = trust.sum(axis=1)
            rescaled = values * (own_norm[:, None] / safe)[:, :, None]
            agg = np.einsum("mn,mnd->md", trust, rescaled) / np.where(total > 0, total, 1.0)[:, None]
            keep = (total <= 0) | (own_norm == 0)
            return np.where(keep[:, None], own, agg)
        tau = self._tau()
        diff = values - own[:, None, :]
        norms = np.linalg.norm(diff, axis=2)
        scale = np.minimum(1.0, tau / np.maximum(norms, np.finfo(float).tiny)) * mask
        step = np.einsum("mn,mnd->md", scale, diff) / np.maximum(counts, 1)[:, None]
        return own + step
