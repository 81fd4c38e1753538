"""Time the compiled kernels against the numpy fallback.

Usage: python3 benchmarks/bench_kernels.py [--sizes 50 200 500] [--repeat 5]
"""
import argparse
import timeit

import numpy as np

from gpmia import _pykernels

try:
    from gpmia import _ckernels
except ImportError:
    _ckernels = None


def cases(n, rng):
    g = rng.standard_normal((n, n))
    a = np.ascontiguousarray(g @ g.T + n * np.eye(n))
    L = np.linalg.cholesky(a)
    b = np.ascontiguousarray(rng.standard_normal((n, 8)))
    x = np.ascontiguousarray(rng.standard_normal((n, 20)))
    return {
        "cholesky": lambda m: m.cholesky_lower(a, 0.0),
        "solve_lower": lambda m: m.solve_lower(L, b),
        "solve_lower_t": lambda m: m.solve_lower_t(L, b),
        "sq_dists": lambda m: m.sq_dists(x, x),
    }


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--sizes", type=int, nargs="+", default=[50, 200, 500])
    p.add_argument("--repeat", type=int, default=5)
    args = p.parse_args()
    mods = [_pykernels] + ([_ckernels] if _ckernels is not None else [])
    if _ckernels is None:
        print("compiled kernels not built; timing the numpy fallback only")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<14}{'n':>6}" + "".join(f"{m.BACKEND + ' ms':>14}" for m in mods)
          + ("" if len(mods) == 1 else f"{'speedup':>10}"))
    for n in args.sizes:
        for name, fn in cases(n, rng).items():
            times = []
            for m in mods:
                number = 3
                best = min(timeit.repeat(lambda: fn(m), number=number, repeat=args.repeat)) / number
                times.append(best * 1e3)
            row = f"{name:<14}{n:>6}" + "".join(f"{t:>14.3f}" for t in times)
            if len(times) == 2:
                row += f"{times[0] / times[1]:>9.2f}x"
            print(row)


if __name__ == "__main__":
    main()
