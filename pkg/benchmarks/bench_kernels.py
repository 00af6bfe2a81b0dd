"""Compare the compiled and pure-Python kernels on typical workloads.

Usage: python3 benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import timeit

import numpy as np

from funnelwatch import kernels


def workloads(rng):
    k = 89
    n = rng.integers(500, 50_000, size=k).astype(float)
    o = np.floor(n * rng.uniform(0.005, 0.02, size=k))
    e = n * rng.uniform(0.005, 0.02, size=k)
    y = rng.normal(0, 0.2, size=k)
    s = rng.uniform(0.05, 0.5, size=k)
    cells = 89 * 114
    bn = rng.integers(0, 2000, size=cells)
    bp = rng.uniform(0.0005, 0.02, size=cells)
    q = np.minimum(bp, 1 - bp)
    chunk = np.maximum(1, np.floor(600.0 / -np.log1p(-q))).astype(np.int64)
    u = rng.uniform(size=int((-(-bn // chunk)).sum()))
    big = rng.normal(size=100_000)
    return {
        "excess_log_odds (k=89)": lambda m: m.excess_log_odds(o, n, e, True),
        "dl_fit (k=89)": lambda m: m.dl_fit(y, s),
        "flag (k=89)": lambda m: m.flag(y, s, 0.0, 0.01, 2.0),
        "binomial_inversion (10146 cells)": lambda m: m.binomial_inversion(bn, bp, chunk, u),
        "neumaier_sum (1e5)": lambda m: m.neumaier_sum(big),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if kernels.compiled is None:
        print("compiled extension not built; only the Python backend is available")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<36}{'python':>12}{'cython':>12}{'speedup':>10}")
    for name, fn in workloads(rng).items():
        times = {}
        for label, mod in (("python", kernels.python), ("cython", kernels.compiled)):
            if mod is None:
                continue
            number = 1
            while timeit.timeit(lambda: fn(mod), number=number) < 0.2:
                number *= 2
            times[label] = min(timeit.repeat(lambda: fn(mod), number=number, repeat=args.repeat)) / number
        py_t = times["python"]
        cy_t = times.get("cython")
        cy_s = f"{cy_t * 1e6:10.1f}us" if cy_t else f"{'-':>12}"
        sp = f"{py_t / cy_t:9.1f}x" if cy_t else f"{'-':>10}"
        print(f"{name:<36}{py_t * 1e6:10.1f}us{cy_s}{sp}")


if __name__ == "__main__":
    main()
