"""Time the numba kernels against their pure-numpy counterparts.

    python benchmarks/bench_kernels.py [--repeat 50]

Both implementations are called directly, so the BDTD_NUMBA flag does not
matter here. Each row also checks that the two backends agree.
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from bdtd import _kernels as K


def cases(rng):
    vals = rng.standard_normal((10, 10, 40))
    full = np.ones((10, 10), dtype=bool)
    ragged = full.copy()
    ragged[np.arange(10), rng.integers(0, 10, size=10)] = False
    f = np.full(10, 2, dtype=np.int64)
    big = rng.standard_normal((4000, 13, 1))
    big_mask = np.ones((4000, 13), dtype=bool)
    big_f = np.full(4000, 4, dtype=np.int64)
    sub = np.full(10, 8, dtype=np.int64)
    benign = rng.standard_normal((8, 40))
    S, J = 3, 2
    pi = np.cumsum(np.full((S, J), 0.5), axis=1)
    P = np.cumsum(rng.dirichlet(np.ones(S), size=(S, J)), axis=2)
    P[..., -1] = 1.0
    R, Phi, u = rng.uniform(-1, 1, (S, J)), rng.uniform(0.5, 1, (S, 2)) / 2, rng.random((20000, 2))
    return [
        ("trimmed mean 10x10x40", K.trimmed_mean_batch_nb, K.trimmed_mean_batch_np, (vals, full, f)),
        ("trimmed mean ragged", K.trimmed_mean_batch_nb, K.trimmed_mean_batch_np, (vals, ragged, f)),
        ("trimmed mean 4000x13x1", K.trimmed_mean_batch_nb, K.trimmed_mean_batch_np, (big, big_mask, big_f)),
        ("median 10x10x40", K.median_batch_nb, K.median_batch_np, (vals, full)),
        ("krum 10x10x40", K.krum_batch_nb, K.krum_batch_np, (vals, full, sub)),
        ("krum attack search", K.krum_attack_lambda_nb, K.krum_attack_lambda_np, (benign, 2, 8, 100.0, 30)),
        ("td0 path 2e4 steps", K.td0_path_nb, K.td0_path_np, (pi, P, R, Phi, 0.5, 1.0, True, 0, u)),
    ]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=30)
    args = ap.parse_args()
    if not K._HAVE_NUMBA:
        raise SystemExit("numba is not importable; nothing to compare")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<26} {'numba (us)':>12} {'numpy (us)':>12} {'speedup':>8}  agree")
    for name, nb, npf, args_ in cases(rng):
        a, b = nb(*args_), npf(*args_)  # warm up / compile
        agree = np.allclose(a, b, rtol=1e-12, atol=1e-12)
        reps = max(1, args.repeat // (10 if "td0" in name else 1))
        t_nb = min(timeit.repeat(lambda: nb(*args_), number=reps, repeat=3)) / reps
        t_np = min(timeit.repeat(lambda: npf(*args_), number=reps, repeat=3)) / reps
        print(f"{name:<26} {t_nb * 1e6:>12.1f} {t_np * 1e6:>12.1f} {t_np / t_nb:>8.1f}  {agree}")


if __name__ == "__main__":
    main()
