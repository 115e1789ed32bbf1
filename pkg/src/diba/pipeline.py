"""End-to-end attack: feature matrix -> cross-validated stacking -> metrics."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .classifier import InsufficientDataError, cross_validate
from .features import FEATURE_NAMES, FeatureMatrix
from .metrics import DEFAULT_FPR_TARGETS, metric_block, pareto_front


@dataclass
class AttackResult:
    """Out-of-fold scores and metrics for the labeled rows of a feature matrix."""

    feature_names: list[str]
    prompt_ids: list[str]
    y: np.ndarray
    oof: np.ndarray
    folds: np.ndarray
    aggregate: dict
    per_fold: list[dict]
    fold_mean: dict = field(default_factory=dict)

    @property
    def auc(self) -> float:
        return self.aggregate["auc"]


def _mean_block(blocks: list[dict]) -> dict:
    out = {}
    for key in ("auc", "bal_acc", "pauc", "ks_tail"):
        vals = [b[key] for b in blocks if b.get(key) is not None]
        out[key] = float(np.mean(vals)) if vals else None
        out[f"{key}_min"] = float(np.min(vals)) if vals else None
        out[f"{key}_max"] = float(np.max(vals)) if vals else None
    out["tpr_at"] = {t: float(np.mean([b["tpr_at"][t] for b in blocks])) for t in blocks[0]["tpr_at"]}
    return out


def run_attack(fm: FeatureMatrix, folds: int = 5, seed: int = 0,
               fpr_targets: Sequence[float] = DEFAULT_FPR_TARGETS,
               features: Optional[Sequence[str]] = None, n_trees: int = 100,
               f_max: float = 0.001) -> AttackResult:
    """Cross-validated stacking attack on labeled rows.

    Rows labeled ``unknown`` are ignored here.

    Raises:
        InsufficientDataError: fewer than ``2 * folds`` labeled rows or a class
            too small to stratify.
    """
    names = list(features) if features is not None else list(FEATURE_NAMES)
    for n in names:
        if n not in fm.feature_names:
            raise ValueError(f"unknown feature {n!r}")
    lab = fm.labeled_mask
    if lab.sum() < 2 * folds:
        raise InsufficientDataError(f"need at least {2 * folds} labeled records, got {int(lab.sum())}")
    sub = fm.subset(lab)
    X = sub.columns(names)
    y = sub.y
    cv = cross_validate(X, y, folds=folds, seed=seed, n_trees=n_trees, feature_names=names,
                        keep_models=False)
    per_fold = []
    for k in range(folds):
        m = cv.folds.folds == k
        blk = metric_block(cv.oof[m], y[m], fpr_targets, f_max)
        blk["fold"] = k
        per_fold.append(blk)
    agg = metric_block(cv.oof, y, fpr_targets, f_max)
    return AttackResult(names, sub.prompt_ids, y, cv.oof, cv.folds.folds, agg, per_fold,
                        _mean_block(per_fold))


def single_feature_table(fm: FeatureMatrix, folds: int = 5, seed: int = 0,
                         fpr_targets: Sequence[float] = DEFAULT_FPR_TARGETS,
                         n_trees: int = 100, f_max: float = 0.001) -> dict[str, AttackResult]:
    """The stacking pipeline run on each feature alone."""
    return {n: run_attack(fm, folds, seed, fpr_targets, [n], n_trees, f_max) for n in fm.feature_names}


def pareto_flags(results: dict[str, AttackResult], target: str) -> dict[str, bool]:
    """Pareto membership over (pAUC, TPR at ``target``) jointly."""
    pts = [(r.aggregate["pauc"], r.aggregate["tpr_at"][target], r.aggregate["ks_tail"], name)
           for name, r in results.items()]
    front = {p[3] for p in pareto_front(pts)}
    return {name: name in front for name in results}
