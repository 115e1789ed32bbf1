"""Pure numpy fallback for the compiled kernels in ``_kernels.pyx``.

Produces bit-identical trees: same splitmix64 stream, same candidate order,
same split-score expression evaluated in float64 on exact integer partial sums.
"""

from __future__ import annotations

import numpy as np

BACKEND = "python"

_MASK = (1 << 64) - 1


class SplitMix64:
    """splitmix64 generator on Python ints (wraps modulo 2**64)."""

    def __init__(self, seed: int):
        self.state = int(seed) & _MASK

    def next(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & _MASK
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
        return z ^ (z >> 31)


def splitmix64_stream(seed: int, n: int) -> np.ndarray:
    g = SplitMix64(seed)
    return np.array([g.next() for _ in range(n)], dtype=np.uint64)


def _best_on_feature(xs: np.ndarray, ys: np.ndarray, ws: np.ndarray, W: float, W1: float,
                     min_leaf: int):
    """Best split on one sorted column; returns (found, score, threshold)."""
    n = xs.size
    wl = np.cumsum(ws)[:-1]
    w1l = np.cumsum(ws * ys)[:-1]
    i = np.arange(n - 1)
    ok = (xs[:-1] < xs[1:]) & (i + 1 >= min_leaf) & (n - i - 1 >= min_leaf)
    if not ok.any():
        return False, np.inf, 0.0
    wl, w1l = wl[ok], w1l[ok]
    wr = W - wl
    w1r = W1 - w1l
    score = (w1l * (wl - w1l)) / wl + (w1r * (wr - w1r)) / wr
    k = int(np.argmin(score))
    pos = int(i[ok][k])
    xa, xb = xs[pos], xs[pos + 1]
    thr = 0.5 * (xa + xb)
    if thr >= xb:
        thr = xa
    return True, float(score[k]), float(thr)


def build_tree(X, y, w, order, mtry: int, min_leaf: int, seed: int):
    """See ``_kernels.build_tree``; ``order`` is accepted for signature parity."""
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    n, d = X.shape
    rng = SplitMix64(seed)
    feature, thresh, left, right, value, weight = [], [], [], [], [], []
    stack = [(np.arange(n), -1, False)]
    while stack:
        rows, parent, is_left = stack.pop()
        node = len(feature)
        for arr, v in ((feature, -1), (thresh, 0.0), (left, -1), (right, -1)):
            arr.append(v)
        if parent >= 0:
            (left if is_left else right)[parent] = node
        wr_ = w[rows]
        W = float(np.sum(wr_))
        W1 = float(np.sum(wr_ * y[rows]))
        # sequential sums in the compiled path; exact here too for integer weights
        value.append(W1 / W)
        weight.append(W)
        if W1 == 0.0 or W1 == W or rows.size < 2 * min_leaf:
            continue
        perm = list(range(d))
        for i in range(d - 1, 0, -1):
            j = rng.next() % (i + 1)
            perm[i], perm[j] = perm[j], perm[i]
        nc = min(mtry, d)
        cand = sorted(perm[:nc])

        best = (np.inf, 0.0, -1)
        any_valid = False

        def evaluate(f):
            srt = rows[np.argsort(X[rows, f], kind="stable")]
            return _best_on_feature(X[srt, f], y[srt], w[srt], W, W1, min_leaf)

        for f in cand:
            found, s, t = evaluate(f)
            if found:
                any_valid = True
                if s < best[0]:
                    best = (s, t, f)
        k = nc
        while not any_valid and k < d:
            f = perm[k]
            k += 1
            found, s, t = evaluate(f)
            if found:
                any_valid = True
                best = (s, t, f)
        if best[2] < 0:
            continue
        _, t, f = best
        feature[node] = f
        thresh[node] = t
        go_left = X[rows, f] <= t
        stack.append((rows[~go_left], node, False))
        stack.append((rows[go_left], node, True))
    return (np.array(feature, dtype=np.int64), np.array(thresh, dtype=np.float64),
            np.array(left, dtype=np.int64), np.array(right, dtype=np.int64),
            np.array(value, dtype=np.float64), np.array(weight, dtype=np.float64))


def predict_tree(X, feature, threshold, left, right, value) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    node = np.zeros(X.shape[0], dtype=np.int64)
    active = feature[node] >= 0
    rows = np.arange(X.shape[0])
    while active.any():
        r = rows[active]
        nd = node[r]
        f = feature[nd]
        go_left = X[r, f] <= threshold[nd]
        node[r] = np.where(go_left, left[nd], right[nd])
        active[r] = feature[node[r]] >= 0
    return value[node]


def lcs_length(a, b) -> int:
    a = list(a)
    b = list(b)
    if not a or not b:
        return 0
    row = [0] * (len(b) + 1)
    for x in a:
        prev_diag = 0
        for j in range(1, len(b) + 1):
            cur = row[j]
            row[j] = prev_diag + 1 if x == b[j - 1] else max(row[j], row[j - 1])
            prev_diag = cur
    return row[-1]
