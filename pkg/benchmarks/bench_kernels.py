"""Compare the compiled and pure-Python kernel backends.

Usage: python benchmarks/bench_kernels.py [--rows 1600] [--trees 20] [--repeat 3]
"""

import argparse
import time

import numpy as np

from diba._backend import load_backend
from diba.classifier import fit_random_forest


def _time(fn, repeat: int) -> float:
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def _data(n: int, d: int = 5, seed: int = 0):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, d))
    X[:, 0] = np.round(X[:, 0] * 4) / 4  # tied values, like ft_score
    y = (X[:, 0] + 0.5 * X[:, 1] + rng.normal(size=n) > 0).astype(np.float64)
    return X, y


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rows", type=int, default=1600)
    ap.add_argument("--trees", type=int, default=20)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()

    X, y = _data(args.rows)
    seqs = [np.random.default_rng(k).integers(0, 12, size=200).astype(np.int64) for k in range(2)]
    try:
        load_backend("cython")
        names = ("cython", "python")
    except ImportError:
        print("compiled extension not built; timing the python backend only")
        names = ("python",)

    rows = []
    for name in names:
        k = load_backend(name)
        forest = _time(lambda: fit_random_forest(X, y, args.trees, seed=0, backend=name), args.repeat)
        rf = fit_random_forest(X, y, args.trees, seed=0, backend=name)
        pred = _time(lambda: rf.predict_proba(X, name), args.repeat)
        lcs = _time(lambda: [k.lcs_length(seqs[0], seqs[1]) for _ in range(20)], args.repeat)
        rows.append((name, forest, pred, lcs, rf.predict_proba(X, name)))

    print(f"{'backend':<8} {'forest fit':>12} {'predict':>10} {'20x lcs':>10}")
    for name, f, p, l, _ in rows:
        print(f"{name:<8} {f:>11.3f}s {p:>9.4f}s {l:>9.4f}s")
    if len(rows) == 2:
        c, py = rows
        print(f"speedup  {py[1] / c[1]:>11.1f}x {py[2] / c[2]:>9.1f}x {py[3] / c[3]:>9.1f}x")
        print("identical predictions:", bool(np.array_equal(c[4], py[4])))


if __name__ == "__main__":
    main()
