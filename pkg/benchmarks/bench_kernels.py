"""Compiled kernels versus the numpy fallback.

Usage: python3 benchmarks/bench_kernels.py [--repeat R] [--stages N ...]
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from tempo import kernels


def riccati_args(n, nx=3, nu=1, seed=0):
    rng = np.random.default_rng(seed)
    L = rng.standard_normal((nx, nx))
    Wxx = np.broadcast_to(np.eye(nx) + 0.1 * L @ L.T, (n, nx, nx)).copy()
    Wuu = np.broadcast_to(np.eye(nu), (n, nu, nu)).copy()
    A = np.broadcast_to(0.9 * np.eye(nx), (n, nx, nx)).copy()
    B = rng.standard_normal((n, nx, nu))
    return (Wxx, np.zeros((n, nx, nu)), Wuu, rng.standard_normal((n, nx)),
            rng.standard_normal((n, nu)), A, B, rng.standard_normal((n, nx)),
            rng.standard_normal(nx), rng.standard_normal(nx))


def cstr_args(n, seed=0):
    rng = np.random.default_rng(seed)
    X = np.column_stack([rng.uniform(0.05, 0.2, n), rng.uniform(0.05, 0.2, n),
                         rng.uniform(0.1, 0.3, n)])
    U = rng.uniform(0.05, 0.45, (n, 1))
    lam = rng.standard_normal((n, 3))
    return X, U, lam


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--stages", type=int, nargs="+", default=[200, 1000, 4800])
    args = ap.parse_args()
    backends = sorted(kernels.BACKENDS)
    if "compiled" not in backends:
        print("compiled kernels unavailable; timing the fallback only")
    print(f"{'kernel':<10}{'stages':>8}" + "".join(f"{b + ' ms':>14}" for b in backends) + f"{'speedup':>10}")
    for n in args.stages:
        r_args = riccati_args(n)
        X, U, lam = cstr_args(n)
        cases = {
            "riccati": lambda b: kernels.riccati_solve(*r_args, backend=b),
            "cstr": lambda b: kernels.cstr_step(X, U, 0.25, 4, lam=lam, backend=b),
        }
        for name, fn in cases.items():
            times = {b: min(timeit.repeat(lambda: fn(b), number=1, repeat=args.repeat)) * 1e3
                     for b in backends}
            ratio = times["python"] / times["compiled"] if "compiled" in times else float("nan")
            print(f"{name:<10}{n:>8}" + "".join(f"{times[b]:>14.3f}" for b in backends) + f"{ratio:>10.1f}")


if __name__ == "__main__":
    main()
