"""Attack evaluation metrics.

Scores follow the convention "higher means more likely member". All curve
metrics are computed on the empirical ROC without interpolation between
operating points (except the linear segment that closes pAUC at ``f_max``).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

DEFAULT_FPR_TARGETS = (0.01, 0.001)


@dataclass(frozen=True)
class RocCurve:
    """Empirical ROC: one point per distinct threshold plus (0, 0).

    ``threshold[i]`` is the cut for "score >= threshold". The first point uses
    ``+inf``.
    """

    fpr: np.ndarray
    tpr: np.ndarray
    threshold: np.ndarray
    n_pos: int
    n_neg: int
    tp: np.ndarray
    fp: np.ndarray

    def points(self) -> list[tuple[float, float, float]]:
        return list(zip(self.fpr.tolist(), self.tpr.tolist(), self.threshold.tolist()))


def _as_scores(x, name: str) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64).ravel()
    if a.size == 0:
        raise ValueError(f"empty class: no {name} scores")
    if np.isnan(a).any():
        raise ValueError(f"NaN in {name} scores")
    return a


def split_by_label(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    """Split ``scores`` into (member, nonmember) arrays using 0/1 ``labels``."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    return s[y], s[~y]


def roc_curve(scores_member, scores_nonmember) -> RocCurve:
    """Empirical ROC with ties sharing a single point."""
    pos = _as_scores(scores_member, "member")
    neg = _as_scores(scores_nonmember, "nonmember")
    thr = np.unique(np.concatenate([pos, neg]))[::-1]
    pos_sorted = np.sort(pos)
    neg_sorted = np.sort(neg)
    # counts of scores >= t
    tp = pos.size - np.searchsorted(pos_sorted, thr, side="left")
    fp = neg.size - np.searchsorted(neg_sorted, thr, side="left")
    tpr = np.concatenate([[0.0], tp / pos.size])
    fpr = np.concatenate([[0.0], fp / neg.size])
    thresholds = np.concatenate([[np.inf], thr])
    return RocCurve(fpr=fpr, tpr=tpr, threshold=thresholds, n_pos=pos.size, n_neg=neg.size,
                    tp=np.concatenate([[0], tp]), fp=np.concatenate([[0], fp]))


def _curve(x, y=None) -> RocCurve:
    return x if isinstance(x, RocCurve) else roc_curve(x, y)


def auc(scores_member, scores_nonmember=None) -> float:
    """Trapezoid area under the empirical ROC.

    Equals the Mann-Whitney statistic with ties counted as one half.
    Accepts either two score arrays or a precomputed :class:`RocCurve`.
    """
    c = _curve(scores_member, scores_nonmember)
    # integer counts keep the sum exact up to a final division
    tp, fp = c.tp.astype(np.int64), c.fp.astype(np.int64)
    area2 = float(np.sum(np.diff(fp) * (tp[1:] + tp[:-1])))
    return area2 / (2.0 * c.n_pos * c.n_neg)


def mann_whitney_auc(scores_member, scores_nonmember) -> float:
    """Pair-counting AUC, ``P(member > nonmember) + 0.5 P(tie)``."""
    pos = _as_scores(scores_member, "member")
    neg = _as_scores(scores_nonmember, "nonmember")
    gt = (pos[:, None] > neg[None, :]).sum()
    eq = (pos[:, None] == neg[None, :]).sum()
    return float((gt + 0.5 * eq) / (pos.size * neg.size))


def tpr_at_fpr(scores_member, scores_nonmember=None, target_fpr: float = 0.01) -> float:
    """TPR at the loosest threshold whose empirical FPR does not exceed the target."""
    if not 0.0 < target_fpr < 1.0:
        raise ValueError("target_fpr must lie in (0, 1)")
    c = _curve(scores_member, scores_nonmember)
    return float(c.tpr[_fpr_ok(c, target_fpr)].max())


def _fpr_ok(c: RocCurve, target: float) -> np.ndarray:
    # compare counts, not rounded ratios
    return c.fp <= np.floor(target * c.n_neg * (1.0 + 1e-12))


def is_granularity_limited(n_neg: int, target_fpr: float) -> bool:
    """True when fewer than one negative fits under the FPR target."""
    return target_fpr * n_neg < 1.0 - 1e-9


def _restricted_area(c: RocCurve, f_max: float) -> float:
    fpr, tpr = c.fpr, c.tpr
    area = 0.0
    for i in range(1, fpr.size):
        f0, f1 = fpr[i - 1], fpr[i]
        if f0 >= f_max:
            break
        t0, t1 = tpr[i - 1], tpr[i]
        if f1 > f_max:
            t1 = t0 + (t1 - t0) * (f_max - f0) / (f1 - f0)
            f1 = f_max
        area += (f1 - f0) * (t0 + t1) / 2.0
    return area


def pauc(scores_member, scores_nonmember=None, f_max: float = 0.001,
         standardized: bool = False) -> float:
    """Partial AUC over ``fpr in [0, f_max]`` divided by ``f_max``.

    A perfect attack scores 1 and the chance diagonal scores ``f_max / 2``.
    With ``standardized=True`` the McClish transform is applied instead, which
    maps the diagonal to 0.5 and perfect to 1.
    """
    if not 0.0 < f_max <= 1.0:
        raise ValueError("f_max must lie in (0, 1]")
    c = _curve(scores_member, scores_nonmember)
    area = _restricted_area(c, f_max)
    if not standardized:
        return float(area / f_max)
    lo, hi = f_max * f_max / 2.0, f_max
    return float(0.5 * (1.0 + (area - lo) / (hi - lo)))


def ks_tail(scores_member, scores_nonmember=None, f_max: float = 0.001) -> float:
    """Largest ``tpr - fpr`` over operating points with ``fpr <= f_max``."""
    c = _curve(scores_member, scores_nonmember)
    ok = _fpr_ok(c, f_max)
    return float(np.max(c.tpr[ok] - c.fpr[ok]))


def balanced_accuracy(probs, labels, threshold: float = 0.5) -> float:
    """Mean of TPR and TNR when predicting member for ``prob > threshold``."""
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    if y.all() or not y.any():
        raise ValueError("balanced accuracy needs both classes")
    pred = p > threshold
    tpr = pred[y].mean()
    tnr = (~pred[~y]).mean()
    return float((tpr + tnr) / 2.0)


def percentile_ranks(values_flagged, values_negative) -> np.ndarray:
    """Percentile of each flagged value within the negative distribution (ties half)."""
    neg = np.sort(_as_scores(values_negative, "negative"))
    v = np.asarray(values_flagged, dtype=np.float64)
    below = np.searchsorted(neg, v, side="left")
    equal = np.searchsorted(neg, v, side="right") - below
    return 100.0 * (below + 0.5 * equal) / neg.size


def pareto_front(points: Sequence[tuple]) -> list[tuple]:
    """Points not dominated in (pauc, tpr): >= in both and > in at least one."""
    front = []
    for i, p in enumerate(points):
        dominated = False
        for j, q in enumerate(points):
            if i != j and q[0] >= p[0] and q[1] >= p[1] and (q[0] > p[0] or q[1] > p[1]):
                dominated = True
                break
        if not dominated:
            front.append(p)
    return front


def metric_block(scores, labels, fpr_targets: Sequence[float] = DEFAULT_FPR_TARGETS,
                 f_max: float = 0.001, probabilities: bool = True) -> dict:
    """Standard metric dictionary for one scored population.

    Args:
        scores: Membership scores (probabilities when ``probabilities``).
        labels: 0/1 membership labels.
        fpr_targets: Targets for the ``tpr_at`` table.
        f_max: Upper FPR bound for pAUC and KS-tail.
        probabilities: Whether balanced accuracy at 0.5 is meaningful.
    """
    pos, neg = split_by_label(scores, labels)
    c = roc_curve(pos, neg)
    out = {
        "auc": auc(c),
        "bal_acc": balanced_accuracy(scores, labels) if probabilities else None,
        "tpr_at": {fmt_target(t): tpr_at_fpr(c, target_fpr=t) for t in fpr_targets},
        "pauc": pauc(c, f_max=f_max),
        "ks_tail": ks_tail(c, f_max=f_max),
        "n_pos": int(pos.size),
        "n_neg": int(neg.size),
        "granularity_limited": [fmt_target(t) for t in fpr_targets
                                if is_granularity_limited(neg.size, t)],
    }
    return out


def fmt_target(t: float) -> str:
    """Canonical string key for an FPR target, e.g. ``0.001``."""
    return format(float(t), "g")
