"""Example-hardness strata and response-similarity diagnostics.

Prompts split into ``all0`` (both models never correct), ``all1`` (both always
correct) and ``residual``. The attack is then rerun inside each stratum.
"""

from __future__ import annotations

import math
from typing import Iterable, Sequence

import numpy as np

from ._backend import kernels
from .classifier import InsufficientDataError
from .features import FeatureMatrix, FeatureVector
from .metrics import DEFAULT_FPR_TARGETS
from .pipeline import run_attack
from .traces import PromptTrace

SPLITS = ("all0", "all1", "residual")


def classify(ft: float, base: float, tol: float = 0.0) -> str:
    """Stratum of one prompt; NaN scores fall in ``residual``."""
    if math.isnan(ft) or math.isnan(base):
        return "residual"
    if ft <= tol and base <= tol:
        return "all0"
    if ft >= 1.0 - tol and base >= 1.0 - tol:
        return "all1"
    return "residual"


def partition(items: FeatureMatrix | Iterable[FeatureVector], tol: float = 0.0) -> dict[str, list[int]]:
    """Row indices of each stratum.

    ``tol = 0`` means exact equality of the empirical means. Passing
    ``1 / (2N)`` for ``N`` samples admits one-off rounding.
    """
    if isinstance(items, FeatureMatrix):
        ft = items.columns(["ft_score"])[:, 0]
        base = items.columns(["base_score"])[:, 0]
        pairs = zip(ft, base)
    else:
        pairs = ((v.ft_score, v.base_score) for v in items)
    out: dict[str, list[int]] = {s: [] for s in SPLITS}
    for i, (f, b) in enumerate(pairs):
        out[classify(float(f), float(b), tol)].append(i)
    return out


def _ids(tokens: Sequence[str], table: dict[str, int]) -> np.ndarray:
    return np.array([table.setdefault(t, len(table)) for t in tokens], dtype=np.int64)


def rouge_l(x: Sequence[str], y: Sequence[str]) -> float:
    """LCS F1 with precision ``LCS/|y|`` and recall ``LCS/|x|``."""
    if not x or not y:
        return 0.0
    table: dict[str, int] = {}
    a, b = _ids(x, table), _ids(y, table)
    lcs = int(kernels.lcs_length(a, b))
    if lcs == 0:
        return 0.0
    p = lcs / len(y)
    r = lcs / len(x)
    return 2 * p * r / (p + r)


def char_ngrams(text: str, n: int = 3) -> set[str]:
    return {text[i:i + n] for i in range(len(text) - n + 1)}


def ngram_overlap(x: str, y: str, n: int = 3) -> float:
    """Jaccard similarity of character n-gram sets (0 when both are empty)."""
    gx, gy = char_ngrams(x, n), char_ngrams(y, n)
    union = gx | gy
    if not union:
        return 0.0
    return len(gx & gy) / len(union)


def group_similarity(trace: PromptTrace, n: int = 3) -> dict[str, float]:
    """Mean Rouge-L and n-gram overlap over all ft x ref sample pairs."""
    ft, ref = trace.samples_ft, trace.samples_ref
    if not ft or not ref:
        return {"rouge_l": math.nan, "ngram": math.nan}
    rl, ng = [], []
    for a in ft:
        ta = a.text.split()
        for b in ref:
            rl.append(rouge_l(ta, b.text.split()))
            ng.append(ngram_overlap(a.text, b.text, n))
    return {"rouge_l": float(np.mean(rl)), "ngram": float(np.mean(ng))}


def stratified_attack(fm: FeatureMatrix, split: dict[str, list[int]] | None = None,
                      folds: int = 5, seed: int = 0,
                      fpr_targets: Sequence[float] = DEFAULT_FPR_TARGETS,
                      traces: Sequence[PromptTrace] | None = None, tol: float = 0.0,
                      n_trees: int = 100) -> dict[str, dict]:
    """Run the attack independently inside each stratum.

    Strata with fewer than ``2 * folds`` labeled rows, or whose classes are too
    small to stratify, are marked unavailable.
    """
    split = split if split is not None else partition(fm, tol)
    out = {}
    for name in SPLITS:
        idx = np.asarray(split.get(name, []), dtype=np.int64)
        sub = fm.subset(idx)
        lab = sub.labeled_mask
        y = sub.y[lab]
        block = {"n": int(idx.size), "n_member": int((y == 1).sum()),
                 "n_nonmember": int((y == 0).sum())}
        if traces is not None and idx.size:
            sims = [group_similarity(traces[i]) for i in idx]
            block["rouge_l"] = float(np.nanmean([s["rouge_l"] for s in sims]))
            block["ngram"] = float(np.nanmean([s["ngram"] for s in sims]))
        if lab.sum() < 2 * folds:
            block.update(available=False, reason=f"fewer than {2 * folds} labeled rows")
        else:
            try:
                res = run_attack(sub, folds, seed, fpr_targets, n_trees=n_trees)
            except InsufficientDataError as exc:
                block.update(available=False, reason=str(exc))
            else:
                block.update(available=True, metrics=res.aggregate)
        out[name] = block
    return out
