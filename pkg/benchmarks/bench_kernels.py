"""Time the compiled kernels against the numpy fallback.

Usage: python3 benchmarks/bench_kernels.py [--repeat N] [--sizes 500,2000]
"""

import argparse
import timeit

import numpy as np

from nsmra import _core


def _inputs(n, rng):
    X = np.column_stack([rng.uniform(-1, 1, n), rng.uniform(-1, 1, n), rng.uniform(-1, 1, n)])
    X /= np.linalg.norm(X, axis=1, keepdims=True)
    X *= 6371.0
    s = rng.uniform(0.5, 2.0, n)
    b = rng.uniform(100.0, 800.0, n)
    return X, s, b


def cases(n, rng):
    X, s, b = _inputs(n, rng)
    C, _, _ = _inputs(max(n // 10, 10), rng)
    A = rng.standard_normal((n, 60))
    A = np.asfortranarray(A - A.mean(axis=0))
    y = A[:, :5].sum(axis=1) + 0.1 * rng.standard_normal(n)

    def lasso(m):
        w = np.zeros(60)
        m.lasso_cd(A, y, 0.01, w, 1e-8, 100000)
        return w

    return {
        "chordal_matrix": lambda m: m.chordal_matrix(X, X),
        "nsexp_matrix": lambda m: m.nsexp_matrix(X, X, s, b, s, b),
        "wendland_matrix": lambda m: m.wendland_matrix(X, C, 1500.0),
        "lasso_cd": lasso,
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--sizes", default="500,2000")
    args = ap.parse_args()
    backends = _core.backends()
    if "cython" not in backends:
        print("compiled extension not built; only the fallback is available")
    names = sorted(backends)
    print(f"{'kernel':<16} {'n':>6} " + " ".join(f"{b + ' ms':>12}" for b in names) + f" {'speedup':>8}")
    for n in (int(v) for v in args.sizes.split(",")):
        for kname, fn in cases(n, np.random.default_rng(n)).items():
            times = {}
            outs = {}
            for b in names:
                outs[b] = fn(backends[b])
                times[b] = min(timeit.repeat(lambda: fn(backends[b]), number=1, repeat=args.repeat)) * 1e3
            for b in names:
                np.testing.assert_allclose(outs[b], outs["python"], rtol=1e-7, atol=1e-9)
            speed = times["python"] / times["cython"] if "cython" in times else float("nan")
            print(f"{kname:<16} {n:>6} " + " ".join(f"{times[b]:>12.2f}" for b in names) + f" {speed:>8.2f}")


if __name__ == "__main__":
    main()
