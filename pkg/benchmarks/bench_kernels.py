"""Time the compiled kernels against the NumPy fallback.

Usage: python3 benchmarks/bench_kernels.py [--sizes 500 2000 5000] [--repeat 3]
"""

import argparse
import timeit

import numpy as np

import divmax.kernels as K
from divmax.kernels import _fallback

try:
    from divmax.kernels import _core
except ImportError:
    _core = None


def cases(n, d, rng):
    A = rng.standard_normal((n, d))
    B = rng.standard_normal((n, d)) + 0.5
    w = np.full(n, 1.0 / n)
    r = np.abs(rng.standard_normal(n)) * 0.1
    return {
        "rbf_sum_grad": lambda impl: K.rbf_sum_grad(A, B, w, w, 0.5, impl=impl),
        "rbf_sum_grad(sym)": lambda impl: K.rbf_sum_grad(A, A, w, w, 0.5, symmetric=True, impl=impl),
        "knn_distances(k=5)": lambda impl: K.knn_distances(A, B, 5, impl=impl),
        "ball_margin": lambda impl: K.ball_margin(A, B, r, impl=impl),
    }


def best(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", type=int, nargs="+", default=[500, 2000, 5000])
    ap.add_argument("--dim", type=int, default=2)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    if _core is None:
        print("compiled core not built; only the fallback is timed")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<22}{'n':>7}{'cython s':>12}{'numpy s':>12}{'speedup':>10}")
    for n in args.sizes:
        for name, fn in cases(n, args.dim, rng).items():
            t_py = best(lambda: fn(_fallback), args.repeat)
            if _core is not None:
                t_c = best(lambda: fn(_core), args.repeat)
                print(f"{name:<22}{n:>7}{t_c:>12.4f}{t_py:>12.4f}{t_py / t_c:>9.1f}x")
            else:
                print(f"{name:<22}{n:>7}{'-':>12}{t_py:>12.4f}{'-':>10}")


if __name__ == "__main__":
    main()
