"""Linear value-function approximation: features, TD error and projection."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import ConfigurationError

NORM_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class FeatureMap:
    """Explicit per-state feature table ``phi(s)`` of shape (S, d).

    Construction enforces ``||phi(s)|| <= 1`` and full column rank.
    """

    table: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.table, dtype=np.float64)
        if t.ndim == 1:
            t = t[:, None]
        object.__setattr__(self, "table", t)
        if t.ndim != 2 or t.shape[1] < 1:
            raise ConfigurationError("feature table must be (S, d)")
        if np.max(np.linalg.norm(t, axis=1)) > 1.0 + NORM_TOL:
            raise ConfigurationError("feature vectors must satisfy ||phi(s)|| <= 1")
        if np.linalg.matrix_rank(t) < t.shape[1]:
            raise ConfigurationError(f"feature matrix is not full rank (d={t.shape[1]})")

    @property
    def dim(self) -> int:
        return self.table.shape[1]

    @property
    def state_count(self) -> int:
        return self.table.shape[0]

    @cached_property
    def phi_min(self) -> float | None:
        """min_s |phi(s)| in scalar mode, None when d > 1."""
        if self.dim != 1:
            return None
        return float(np.min(np.abs(self.table[:, 0])))

    def __call__(self, state: int) -> np.ndarray:
        return self.table[state]


class ObservationFeatures:
    """Features computed from grid positions, for state spaces too large to tabulate.

    Layout: every agent's normalised position, then each landmark's offset
    from its nearest agent, then an optional constant. The whole vector is
    scaled by ``1/sqrt(d)`` so each entry in [-1, 1] keeps ``||phi|| <= 1``.
    """

    phi_min = None

    def __init__(self, env, bias: bool = True):
        self.env = env
        self.bias = bool(bias)
        self.dim = 2 * env.num_agents + 2 * len(env.landmarks) + int(self.bias)
        self._scale = 1.0 / np.sqrt(self.dim)
        self._span = max(1, env.grid_size - 1)
        self._cache: dict[int, np.ndarray] = {}

    def _compute(self, state: int) -> np.ndarray:
        pos = self.env.decode(state)
        own = 2.0 * pos / self._span - 1.0
        diff = self.env.landmarks[:, None, :] - pos[None, :, :]
        near = np.argmin((diff * diff).sum(axis=2), axis=1)
        rel = diff[np.arange(len(near)), near] / self._span
        parts = [own.ravel(), rel.ravel()]
        if self.bias:
            parts.append(np.ones(1))
        return np.concatenate(parts) * self._scale

    def __call__(self, state: int) -> np.ndarray:
        phi = self._cache.get(state)
        if phi is None:
            if len(self._cache) > 200_000:
                self._cache.clear()
            phi = self._cache[state] = self._compute(state)
        return phi

    def check_rank(self, rng, samples: int = 2000) -> int:
        """Rank of the features over sampled states (a lower bound on rank(Phi))."""
        rng = np.random.default_rng(rng)
        rows = np.stack([self(self.env.initial_state(rng)) for _ in range(samples)])
        return int(np.linalg.matrix_rank(rows))


def scalar_features(state_count: int, rng, low: float = 0.5, high: float = 1.0) -> FeatureMap:
    """Scalar features drawn uniformly from [low, high]; phi_min >= low > 0."""
    if not 0.0 < low <= high <= 1.0:
        raise ConfigurationError("need 0 < low <= high <= 1")
    return FeatureMap(np.random.default_rng(rng).uniform(low, high, size=(state_count, 1)))


def constant_features(state_count: int, value: float = 1.0) -> FeatureMap:
    return FeatureMap(np.full((state_count, 1), float(value)))


def tabular_features(state_count: int) -> FeatureMap:
    return FeatureMap(np.eye(state_count))


def random_unit_features(state_count: int, dim: int, rng, max_tries: int = 20) -> FeatureMap:
    """Seeded random unit-norm features, redrawn until full rank."""
    if dim > state_count:
        raise ConfigurationError(f"cannot have rank {dim} with {state_count} states")
    rng = np.random.default_rng(rng)
    for _ in range(max_tries):
        t = rng.standard_normal((state_count, dim))
        t /= np.linalg.norm(t, axis=1, keepdims=True)
        if np.linalg.matrix_rank(t) == dim:
            return FeatureMap(t)
    raise ConfigurationError("could not draw a full-rank feature table")


def td_error(r: float, w, phi_s, phi_next, gamma: float) -> float:
    """delta = r + gamma * phi(s')^T w - phi(s)^T w."""
    w = np.atleast_1d(np.asarray(w, dtype=np.float64))
    phi_s = np.atleast_1d(np.asarray(phi_s, dtype=np.float64))
    phi_next = np.atleast_1d(np.asarray(phi_next, dtype=np.float64))
    if not (w.shape == phi_s.shape == phi_next.shape):
        raise ConfigurationError(
            f"dimension mismatch: w{w.shape}, phi(s){phi_s.shape}, phi(s'){phi_next.shape}"
        )
    return float(r + gamma * (phi_next @ w) - phi_s @ w)


def default_radius(r_max: float, phi_min: float | None, gamma: float) -> float:
    """Projection radius R = 2 r_max / (phi_min (1 - gamma)^(3/2)) for scalar features."""
    if phi_min is None or phi_min <= 0:
        raise ConfigurationError("projection radius needs phi_min > 0 (scalar features)")
    if not 0.0 <= gamma < 1.0:
        raise ConfigurationError("gamma must lie in [0, 1)")
    return 2.0 * r_max / (phi_min * (1.0 - gamma) ** 1.5)


def project_ball(w, radius, mode: str = "coordinate") -> np.ndarray:
    """Project onto the radius-R ball: 'l2' rescales, 'coordinate' clamps each entry.

    Works on a single vector or row-wise on a stack of vectors; ``radius`` may
    be an array broadcasting against ``w``.
    """
    if np.any(np.asarray(radius) <= 0):
        raise ConfigurationError("radius must be positive")
    w = np.asarray(w, dtype=np.float64)
    if mode == "coordinate":
        return np.clip(w, -radius, radius)
    if mode == "l2":
        norm = np.linalg.norm(w, axis=-1, keepdims=True)
        outside = norm > radius
        scale = np.where(outside, radius / np.where(outside, norm, 1.0), 1.0)
        return w * scale
    raise ConfigurationError(f"unknown projection mode {mode!r}")


def outside_ball(w, radius: float, mode: str = "coordinate", rtol: float = 1e-12) -> np.ndarray:
    """Boolean mask of vectors (along the last axis) lying outside the ball."""
    w = np.asarray(w, dtype=np.float64)
    size = np.max(np.abs(w), axis=-1) if mode == "coordinate" else np.linalg.norm(w, axis=-1)
    return ~(size <= radius * (1.0 + rtol))
