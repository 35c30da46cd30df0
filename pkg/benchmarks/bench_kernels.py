"""Time the compiled PBFT round kernel against the pure-Python fallback.

    python benchmarks/bench_kernels.py [--peers 16 32 64] [--rounds 200]

Both kernels see identical inputs; results are checked for equality before
timing so a speedup never hides a divergence.
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from outlierbft import kernels
from outlierbft._kernels_py import pbft_round as py_round


def make_case(n: int, rng: np.random.Generator):
    pp = rng.uniform(1.0, 5.0, n)
    prep = rng.uniform(1.0, 5.0, (n, n))
    com = rng.uniform(1.0, 5.0, (n, n))
    role = rng.choice([0, 0, 0, 1, 2, 3], size=n).astype(np.int64)
    role[0] = 0
    trusted = (role != 1).astype(np.int64)
    active = int(trusted.sum())
    q = 2 * ((active - 1) // 3) + 1
    return pp, 0.01, prep, com, role, trusted, q, 50.0


def bench(fn, cases) -> float:
    t0 = time.perf_counter()
    for c in cases:
        fn(*c)
    return (time.perf_counter() - t0) / len(cases)


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--peers", type=int, nargs="+", default=[16, 32, 64])
    ap.add_argument("--rounds", type=int, default=200)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    if kernels.BACKEND != "cython":
        print("compiled kernel not built; only the Python fallback is available")
    rng = np.random.default_rng(args.seed)
    print(f"{'peers':>5}  {'python_us':>10}  {kernels.BACKEND + '_us':>10}  {'speedup':>7}")
    for n in args.peers:
        cases = [make_case(n, rng) for _ in range(args.rounds)]
        for c in cases[:20]:
            a, b = py_round(*c), kernels.pbft_round(*c)
            if not (np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])):
                raise SystemExit(f"kernels disagree at n={n}")
        t_py = bench(py_round, cases)
        t_fast = bench(kernels.pbft_round, cases)
        print(f"{n:>5}  {t_py * 1e6:>10.1f}  {t_fast * 1e6:>10.1f}  {t_py / t_fast:>6.1f}x")


if __name__ == "__main__":
    main()
