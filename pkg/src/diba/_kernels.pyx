# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels: CART tree growth, tree prediction, LCS length.

Must stay bit-compatible with ``_kernels_py``. Split scores are computed with
the same float64 expression in the same order, and weights are integer
bootstrap counts, so partial sums are exact.
"""

import numpy as np
cimport numpy as cnp
from libc.stdint cimport uint64_t, int64_t
from libc.stdlib cimport malloc, free

cnp.import_array()

BACKEND = "cython"


cdef inline uint64_t _splitmix_next(uint64_t* state) noexcept nogil:
    cdef uint64_t z
    state[0] = state[0] + <uint64_t>0x9E3779B97F4A7C15ULL
    z = state[0]
    z = (z ^ (z >> 30)) * <uint64_t>0xBF58476D1CE4E5B9ULL
    z = (z ^ (z >> 27)) * <uint64_t>0x94D049BB133111EBULL
    return z ^ (z >> 31)


def splitmix64_stream(uint64_t seed, Py_ssize_t n):
    """First ``n`` outputs of splitmix64 seeded with ``seed`` (for tests)."""
    cdef uint64_t state = seed
    out = np.empty(n, dtype=np.uint64)
    cdef uint64_t[::1] o = out
    cdef Py_ssize_t i
    for i in range(n):
        o[i] = _splitmix_next(&state)
    return out


cdef inline double _split_score(double wl, double w1l, double wr, double w1r) noexcept nogil:
    # weighted Gini times node weight; fixed expression order
    cdef double a = (w1l * (wl - w1l)) / wl
    cdef double b = (w1r * (wr - w1r)) / wr
    return a + b


cdef int _best_on_feature(const double[:, ::1] X, const double[::1] y, const double[::1] w,
                          const int64_t[::1] seg, Py_ssize_t n_seg, Py_ssize_t f,
                          double W, double W1, Py_ssize_t min_leaf,
                          double* best_score, double* best_thr) noexcept nogil:
    """Scan sorted segment; update best if strictly better. Returns 1 if any valid split."""
    cdef Py_ssize_t i
    cdef double wl = 0.0, w1l = 0.0, wr, w1r, s, xa, xb, thr
    cdef int found = 0
    cdef int64_t a, b
    for i in range(n_seg - 1):
        a = seg[i]
        wl = wl + w[a]
        w1l = w1l + w[a] * y[a]
        b = seg[i + 1]
        xa = X[a, f]
        xb = X[b, f]
        if not (xa < xb):
            continue
        if i + 1 < min_leaf or n_seg - i - 1 < min_leaf:
            continue
        found = 1
        wr = W - wl
        w1r = W1 - w1l
        s = _split_score(wl, w1l, wr, w1r)
        if s < best_score[0]:
            thr = 0.5 * (xa + xb)
            if thr >= xb:
                thr = xa
            best_score[0] = s
            best_thr[0] = thr
    return found


def build_tree(const double[:, ::1] X, const double[::1] y, const double[::1] w,
               const int64_t[:, ::1] order, Py_ssize_t mtry, Py_ssize_t min_leaf, uint64_t seed):
    """Grow one tree on in-bag rows.

    Args:
        X: ``(n, d)`` in-bag rows.
        y: 0/1 labels as float64.
        w: positive integer-valued sample weights (bootstrap counts).
        order: ``(d, n)`` row order sorting each column ascending.
        mtry: Features drawn per split.
        min_leaf: Minimum distinct rows per child.
        seed: splitmix64 seed for feature subsampling.

    Returns:
        Tuple ``(feature, threshold, left, right, value, weight)`` of node arrays.
        Leaves have ``feature == -1``.
    """
    cdef Py_ssize_t n = X.shape[0], d = X.shape[1]
    cdef Py_ssize_t max_nodes = 2 * n + 1
    feature_a = np.full(max_nodes, -1, dtype=np.int64)
    thr_a = np.zeros(max_nodes, dtype=np.float64)
    left_a = np.full(max_nodes, -1, dtype=np.int64)
    right_a = np.full(max_nodes, -1, dtype=np.int64)
    value_a = np.zeros(max_nodes, dtype=np.float64)
    weight_a = np.zeros(max_nodes, dtype=np.float64)
    cdef int64_t[::1] feature = feature_a
    cdef double[::1] thrv = thr_a
    cdef int64_t[::1] left = left_a
    cdef int64_t[::1] right = right_a
    cdef double[::1] value = value_a
    cdef double[::1] weight = weight_a

    work_a = np.array(order, dtype=np.int64, copy=True)
    cdef int64_t[:, ::1] work = work_a
    tmp_a = np.empty(n, dtype=np.int64)
    cdef int64_t[::1] tmp = tmp_a
    goes_left_a = np.zeros(n, dtype=np.uint8)
    cdef unsigned char[::1] goes_left = goes_left_a
    perm_a = np.empty(d, dtype=np.int64)
    cdef int64_t[::1] perm = perm_a
    cand_a = np.empty(d, dtype=np.int64)
    cdef int64_t[::1] cand = cand_a

    # explicit stack: start, end, parent, is_left
    stack_a = np.empty((max_nodes, 4), dtype=np.int64)
    cdef int64_t[:, ::1] stack = stack_a
    cdef Py_ssize_t sp = 0
    cdef Py_ssize_t node_count = 0
    cdef uint64_t rng = seed

    cdef Py_ssize_t start, end, parent, is_left, node, n_seg, i, j, k, f, nl, nc, tmpi
    cdef double W, W1, best_score, best_thr, cur_thr, cur_score
    cdef int64_t best_f, r
    cdef int any_valid

    stack[0, 0] = 0
    stack[0, 1] = n
    stack[0, 2] = -1
    stack[0, 3] = 0
    sp = 1
    with nogil:
        while sp > 0:
            sp -= 1
            start = stack[sp, 0]
            end = stack[sp, 1]
            parent = stack[sp, 2]
            is_left = stack[sp, 3]
            node = node_count
            node_count += 1
            if parent >= 0:
                if is_left:
                    left[parent] = node
                else:
                    right[parent] = node
            n_seg = end - start
            W = 0.0
            W1 = 0.0
            for i in range(start, end):
                r = work[0, i]
                W = W + w[r]
                W1 = W1 + w[r] * y[r]
            value[node] = W1 / W
            weight[node] = W
            if W1 == 0.0 or W1 == W or n_seg < 2 * min_leaf:
                continue

            # feature permutation for this node
            for i in range(d):
                perm[i] = i
            for i in range(d - 1, 0, -1):
                j = <Py_ssize_t>(_splitmix_next(&rng) % <uint64_t>(i + 1))
                tmpi = perm[i]
                perm[i] = perm[j]
                perm[j] = tmpi
            nc = mtry if mtry < d else d
            for i in range(nc):
                cand[i] = perm[i]
            # insertion sort of candidates ascending
            for i in range(1, nc):
                tmpi = cand[i]
                j = i - 1
                while j >= 0 and cand[j] > tmpi:
                    cand[j + 1] = cand[j]
                    j -= 1
                cand[j + 1] = tmpi

            best_score = 1e308
            best_thr = 0.0
            best_f = -1
            any_valid = 0
            for i in range(nc):
                f = cand[i]
                cur_score = best_score
                if _best_on_feature(X, y, w, work[f, start:end], n_seg, f, W, W1, min_leaf,
                                    &cur_score, &cur_thr):
                    any_valid = 1
                    if cur_score < best_score:
                        best_score = cur_score
                        best_thr = cur_thr
                        best_f = f
            k = nc
            while not any_valid and k < d:
                f = perm[k]
                k += 1
                cur_score = best_score
                if _best_on_feature(X, y, w, work[f, start:end], n_seg, f, W, W1, min_leaf,
                                    &cur_score, &cur_thr):
                    any_valid = 1
                    best_score = cur_score
                    best_thr = cur_thr
                    best_f = f
            if best_f < 0:
                continue

            feature[node] = best_f
            thrv[node] = best_thr
            nl = 0
            for i in range(start, end):
                r = work[best_f, i]
                if X[r, best_f] <= best_thr:
                    goes_left[r] = 1
                    nl += 1
                else:
                    goes_left[r] = 0
            # stable partition of every feature's segment
            for f in range(d):
                j = 0
                k = nl
                for i in range(start, end):
                    r = work[f, i]
                    if goes_left[r]:
                        tmp[j] = r
                        j += 1
                    else:
                        tmp[k] = r
                        k += 1
                for i in range(n_seg):
                    work[f, start + i] = tmp[i]
            # right pushed first so the left child is numbered next
            stack[sp, 0] = start + nl
            stack[sp, 1] = end
            stack[sp, 2] = node
            stack[sp, 3] = 0
            sp += 1
            stack[sp, 0] = start
            stack[sp, 1] = start + nl
            stack[sp, 2] = node
            stack[sp, 3] = 1
            sp += 1

    m = node_count
    return (feature_a[:m].copy(), thr_a[:m].copy(), left_a[:m].copy(), right_a[:m].copy(),
            value_a[:m].copy(), weight_a[:m].copy())


def predict_tree(const double[:, ::1] X, const int64_t[::1] feature, const double[::1] threshold,
                 const int64_t[::1] left, const int64_t[::1] right, const double[::1] value):
    """Leaf value reached by each row."""
    cdef Py_ssize_t n = X.shape[0], i
    cdef int64_t node
    out_a = np.empty(n, dtype=np.float64)
    cdef double[::1] out = out_a
    with nogil:
        for i in range(n):
            node = 0
            while feature[node] >= 0:
                if X[i, feature[node]] <= threshold[node]:
                    node = left[node]
                else:
                    node = right[node]
            out[i] = value[node]
    return out_a


def lcs_length(const int64_t[::1] a, const int64_t[::1] b):
    """Longest common subsequence length with an O(len(b)) row buffer."""
    cdef Py_ssize_t n = a.shape[0], m = b.shape[0], i, j
    cdef int64_t prev_diag, cur, best
    if n == 0 or m == 0:
        return 0
    cdef int64_t* row = <int64_t*>malloc((m + 1) * sizeof(int64_t))
    if row == NULL:
        raise MemoryError()
    try:
        for j in range(m + 1):
            row[j] = 0
        for i in range(1, n + 1):
            prev_diag = 0
            for j in range(1, m + 1):
                cur = row[j]
                if a[i - 1] == b[j - 1]:
                    row[j] = prev_diag + 1
                else:
                    best = row[j] if row[j] > row[j - 1] else row[j - 1]
                    row[j] = best
                prev_diag = cur
        return row[m]
    finally:
        free(row)
