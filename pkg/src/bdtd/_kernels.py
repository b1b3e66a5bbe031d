"""Batched aggregation kernels.

Every kernel works on a stack of multisets: ``values`` has shape
``(m, n, d)`` (m receivers, n candidate senders, d coordinates) and
``mask`` has shape ``(m, n)`` marking which senders count for each
receiver. Two interchangeable backends are provided: numba-compiled loops
and a pure-numpy path. Set ``BDTD_NUMBA=0`` in the environment to force the
numpy path; it is also used automatically when numba cannot be imported.
"""

from __future__ import annotations

import os

import numpy as np

try:
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _HAVE_NUMBA = False


def _numba_requested() -> bool:
    flag = os.environ.get("BDTD_NUMBA", "1").strip().lower()
    return flag not in {"0", "false", "no", "off"}


USE_NUMBA = _HAVE_NUMBA and _numba_requested()


def backend() -> str:
    """Name of the backend the public kernels dispatch to."""
    return "numba" if USE_NUMBA else "numpy"


# --------------------------------------------------------------------------- #
# numpy backend


def trimmed_mean_batch_np(values, mask, f):
    m, n, d = values.shape
    if mask.all() and np.all(f == f[0]):
        k = int(f[0])
        srt = np.sort(values, axis=1)
        return srt[:, k : n - k, :].mean(axis=1)
    out = np.empty((m, d))
    for r in range(m):
        sub = np.sort(values[r, mask[r]], axis=0)
        k = int(f[r])
        out[r] = sub[k : sub.shape[0] - k].mean(axis=0)
    return out


def median_batch_np(values, mask):
    m, _, d = values.shape
    if mask.all():
        return np.median(values, axis=1)
    out = np.empty((m, d))
    for r in range(m):
        out[r] = np.median(values[r, mask[r]], axis=0)
    return out


def krum_batch_np(values, mask, subset):
    m, n, d = values.shape
    out = np.empty((m, d))
    for r in range(m):
        idx = np.flatnonzero(mask[r])
        pts = values[r, idx]
        diff = pts[:, None, :] - pts[None, :, :]
        dist = np.einsum("ijk,ijk->ij", diff, diff)
        np.fill_diagonal(dist, np.inf)
        k = int(subset[r])
        scores = np.sort(dist, axis=1)[:, :k].sum(axis=1)
        out[r] = pts[int(np.argmin(scores))]
    return out


def krum_scores_np(points, subset):
    diff = points[:, None, :] - points[None, :, :]
    dist = np.einsum("ijk,ijk->ij", diff, diff)
    np.fill_diagonal(dist, np.inf)
    return np.sort(dist, axis=1)[:, :subset].sum(axis=1)


def krum_attack_lambda_np(benign, f, subset, lambda_max, steps):
    nb, d = benign.shape
    base = benign.mean(axis=0)
    sign = np.where(base >= 0, 1.0, -1.0)

    def selects_crafted(lam):
        pts = np.vstack([benign, np.broadcast_to(base - lam * sign, (f, d))])
        return int(np.argmin(krum_scores_np(pts, subset))) >= nb

    if selects_crafted(lambda_max):
        return lambda_max
    lam, lo, hi = -1.0, 0.0, lambda_max
    for _ in range(steps):
        mid = 0.5 * (lo + hi)
        if selects_crafted(mid):
            lam, lo = mid, mid
        else:
            hi = mid
    return lam


def _draw(cum_row, u):
    # index of the first cumulative entry above u, clipped to the last entry
    return min(int(np.searchsorted(cum_row, u, side="right")), cum_row.shape[0] - 1)


def td0_path_np(cum_pi, cum_P, rewards, Phi, gamma, eta0, harmonic, s0, u):
    w = np.zeros(Phi.shape[1])
    s = s0
    for k in range(u.shape[0]):
        a = _draw(cum_pi[s], u[k, 0])
        nxt = _draw(cum_P[s, a], u[k, 1])
        delta = rewards[s, a] + gamma * (Phi[nxt] @ w) - Phi[s] @ w
        eta = eta0 / k if (harmonic and k >= 1) else eta0
        w = w + eta * delta * Phi[s]
        s = nxt
    return w


# --------------------------------------------------------------------------- #
# numba backend

if _HAVE_NUMBA:

    @njit(cache=True)
    def _insertion_sort(buf, cnt):
        # multisets here are tiny; this avoids an allocation per column
        for i in range(1, cnt):
            x = buf[i]
            j = i - 1
            while j >= 0 and buf[j] > x:
                buf[j + 1] = buf[j]
                j -= 1
            buf[j + 1] = x

    @njit(cache=True)
    def trimmed_mean_batch_nb(values, mask, f):
        m, n, d = values.shape
        out = np.empty((m, d))
        buf = np.empty(n)
        for r in range(m):
            k = f[r]
            for c in range(d):
                cnt = 0
                for j in range(n):
                    if mask[r, j]:
                        buf[cnt] = values[r, j, c]
                        cnt += 1
                _insertion_sort(buf, cnt)
                acc = 0.0
                for t in range(k, cnt - k):
                    acc += buf[t]
                out[r, c] = acc / (cnt - 2 * k)
        return out

    @njit(cache=True)
    def median_batch_nb(values, mask):
        m, n, d = values.shape
        out = np.empty((m, d))
        buf = np.empty(n)
        for r in range(m):
            for c in range(d):
                cnt = 0
                for j in range(n):
                    if mask[r, j]:
                        buf[cnt] = values[r, j, c]
                        cnt += 1
                _insertion_sort(buf, cnt)
                h = cnt // 2
                if cnt % 2 == 1:
                    out[r, c] = buf[h]
                else:
                    out[r, c] = 0.5 * (buf[h - 1] + buf[h])
        return out

    @njit(cache=True)
    def krum_scores_nb(points, subset):
        n, d = points.shape
        dist = np.empty((n, n))
        for i in range(n):
            dist[i, i] = np.inf
            for j in range(i + 1, n):
                acc = 0.0
                for c in range(d):
                    t = points[i, c] - points[j, c]
                    acc += t * t
                dist[i, j] = acc
                dist[j, i] = acc
        scores = np.empty(n)
        buf = np.empty(n)
        for i in range(n):
            buf[:] = dist[i]
            scores[i] = _sum_smallest(buf, n, subset)
        return scores

    @njit(cache=True)
    def krum_batch_nb(values, mask, subset):
        m, n, d = values.shape
        out = np.empty((m, d))
        for r in range(m):
            cnt = 0
            for j in range(n):
                if mask[r, j]:
                    cnt += 1
            pts = np.empty((cnt, d))
            t = 0
            for j in range(n):
                if mask[r, j]:
                    pts[t] = values[r, j]
                    t += 1
            scores = krum_scores_nb(pts, subset[r])
            # np.argmin returns the first minimum: ties go to the lowest index
            out[r] = pts[np.argmin(scores)]
        return out


    @njit(cache=True)
    def _sum_smallest(buf, cnt, k):
        _insertion_sort(buf, cnt)
        acc = 0.0
        for t in range(k):
            acc += buf[t]
        return acc

    @njit(cache=True)
    def _krum_selects_crafted_nb(benign, bdist, f, crafted, subset, buf):
        # same scores as krum_scores_nb on benign + f copies of crafted, reusing
        # the benign-benign distances; ties resolve to the lowest index as there
        nb, d = benign.shape
        dc = np.empty(nb)
        for i in range(nb):
            acc = 0.0
            for c in range(d):
                t = benign[i, c] - crafted[c]
                acc += t * t
            dc[i] = acc
        best = np.inf
        for i in range(nb):
            cnt = 0
            for j in range(nb):
                if j != i:
                    buf[cnt] = bdist[i, j]
                    cnt += 1
            for _ in range(f):
                buf[cnt] = dc[i]
                cnt += 1
            score = _sum_smallest(buf, cnt, subset)
            if score < best:
                best = score
        cnt = 0
        for j in range(nb):
            buf[cnt] = dc[j]
            cnt += 1
        for _ in range(f - 1):
            buf[cnt] = 0.0
            cnt += 1
        return _sum_smallest(buf, cnt, subset) < best

    @njit(cache=True)
    def krum_attack_lambda_nb(benign, f, subset, lambda_max, steps):
        nb, d = benign.shape
        base = np.empty(d)
        sign = np.empty(d)
        for c in range(d):
            acc = 0.0
            for i in range(nb):
                acc += benign[i, c]
            base[c] = acc / nb
            sign[c] = 1.0 if base[c] >= 0 else -1.0
        bdist = np.zeros((nb, nb))
        for i in range(nb):
            for j in range(i + 1, nb):
                acc = 0.0
                for c in range(d):
                    t = benign[i, c] - benign[j, c]
                    acc += t * t
                bdist[i, j] = acc
                bdist[j, i] = acc
        buf = np.empty(nb + f)
        if _krum_selects_crafted_nb(benign, bdist, f, base - lambda_max * sign, subset, buf):
            return lambda_max
        lam, lo, hi = -1.0, 0.0, lambda_max
        for _ in range(steps):
            mid = 0.5 * (lo + hi)
            if _krum_selects_crafted_nb(benign, bdist, f, base - mid * sign, subset, buf):
                lam, lo = mid, mid
            else:
                hi = mid
        return lam

    @njit(cache=True)
    def _draw_nb(cum_row, u):
        last = cum_row.shape[0] - 1
        for i in range(last):
            if cum_row[i] > u:
                return i
        return last

    @njit(cache=True)
    def td0_path_nb(cum_pi, cum_P, rewards, Phi, gamma, eta0, harmonic, s0, u):
        d = Phi.shape[1]
        w = np.zeros(d)
        s = s0
        for k in range(u.shape[0]):
            a = _draw_nb(cum_pi[s], u[k, 0])
            nxt = _draw_nb(cum_P[s, a], u[k, 1])
            v_s = 0.0
            v_n = 0.0
            for c in range(d):
                v_s += Phi[s, c] * w[c]
                v_n += Phi[nxt, c] * w[c]
            delta = rewards[s, a] + gamma * v_n - v_s
            eta = eta0 / k if (harmonic and k >= 1) else eta0
            for c in range(d):
                w[c] += eta * delta * Phi[s, c]
            s = nxt
        return w


# --------------------------------------------------------------------------- #
# dispatch


def _prep(values, mask):
    values = np.ascontiguousarray(values, dtype=np.float64)
    if values.ndim != 3:
        raise ValueError(f"expected (m, n, d) values, got shape {values.shape}")
    if mask is None:
        mask = np.ones(values.shape[:2], dtype=np.bool_)
    else:
        mask = np.ascontiguousarray(mask, dtype=np.bool_)
    return values, mask


def _per_receiver(x, m):
    return np.ascontiguousarray(np.broadcast_to(np.asarray(x, dtype=np.int64), (m,)))


def trimmed_mean_batch(values, mask, f):
    """Coordinate-wise f-trimmed mean of each receiver's masked multiset."""
    values, mask = _prep(values, mask)
    f = _per_receiver(f, values.shape[0])
    if USE_NUMBA:
        return trimmed_mean_batch_nb(values, mask, f)
    return trimmed_mean_batch_np(values, mask, f)


def median_batch(values, mask=None):
    values, mask = _prep(values, mask)
    if USE_NUMBA:
        return median_batch_nb(values, mask)
    return median_batch_np(values, mask)


def krum_batch(values, mask, subset):
    values, mask = _prep(values, mask)
    subset = _per_receiver(subset, values.shape[0])
    if USE_NUMBA:
        return krum_batch_nb(values, mask, subset)
    return krum_batch_np(values, mask, subset)


def krum_scores(points, subset: int):
    """Krum score of every point: sum of squared distances to its nearest others."""
    points = np.ascontiguousarray(points, dtype=np.float64)
    if USE_NUMBA:
        return krum_scores_nb(points, int(subset))
    return krum_scores_np(points, int(subset))


def td0_path(cum_pi, cum_P, rewards, Phi, gamma: float, eta0: float, harmonic: bool, s0: int, u):
    """Linear TD(0) along a trajectory driven by the uniforms ``u`` (shape (H, 2)).

    ``cum_pi`` is the (S, J) cumulative policy, ``cum_P`` the (S, J, S)
    cumulative transition table and ``rewards`` the (S, J) reward table.
    """
    args = (
        np.ascontiguousarray(cum_pi, dtype=np.float64),
        np.ascontiguousarray(cum_P, dtype=np.float64),
        np.ascontiguousarray(rewards, dtype=np.float64),
        np.ascontiguousarray(Phi, dtype=np.float64),
        float(gamma),
        float(eta0),
        bool(harmonic),
        int(s0),
        np.ascontiguousarray(u, dtype=np.float64),
    )
    if USE_NUMBA:
        return td0_path_nb(*args)
    return td0_path_np(*args)


def krum_attack_lambda(benign, f: int, subset: int, lambda_max: float, steps: int) -> float:
    """Largest scale found by bisection at which Krum picks the crafted vector; -1 if none."""
    benign = np.ascontiguousarray(benign, dtype=np.float64)
    if USE_NUMBA:
        return float(krum_attack_lambda_nb(benign, int(f), int(subset), float(lambda_max), int(steps)))
    return float(krum_attack_lambda_np(benign, int(f), int(subset), float(lambda_max), int(steps)))
