"""Stacking predictor: random forest + logistic-regression pipeline, LR meta-learner.

Base learners produce out-of-fold membership probabilities on the training
set. The meta-learner is fit on those two columns. The base learners are then
refit on all training rows for inference.

All randomness is derived from one integer seed through
:func:`derive_seed`, so results do not depend on evaluation order.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from ._backend import load_backend

MODEL_FORMAT = "diba-stacking"
MODEL_VERSION = 1


class InsufficientDataError(ValueError):
    """Too few rows, or a class is missing from the data or a fold."""


def derive_seed(seed: int, *keys: int) -> int:
    """Deterministic 63-bit child seed from ``(seed, *keys)``."""
    ss = np.random.SeedSequence([int(seed) & ((1 << 63) - 1), *[int(k) for k in keys]])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def _check_binary(y: np.ndarray) -> np.ndarray:
    y = np.asarray(y).astype(np.int64).ravel()
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0/1")
    if y.min() == y.max():
        raise InsufficientDataError("labels contain a single class")
    return y


# ---------------------------------------------------------------------------
# preprocessing


@dataclass
class Imputer:
    """Median imputation plus binary indicators for columns that had gaps.

    Indicators are added only for columns with at least one missing value in
    the training data.
    """

    medians: np.ndarray
    indicator_cols: np.ndarray

    @classmethod
    def fit(cls, X: np.ndarray) -> "Imputer":
        X = np.asarray(X, dtype=np.float64)
        miss = np.isnan(X)
        med = np.zeros(X.shape[1])
        for j in range(X.shape[1]):
            col = X[~miss[:, j], j]
            med[j] = float(np.median(col)) if col.size else 0.0
        return cls(medians=med, indicator_cols=np.flatnonzero(miss.any(axis=0)).astype(np.int64))

    def transform(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.medians.size:
            raise ValueError(f"expected {self.medians.size} feature columns, got shape {X.shape}")
        miss = np.isnan(X)
        filled = np.where(miss, self.medians[None, :], X)
        out = np.hstack([filled, miss[:, self.indicator_cols].astype(np.float64)])
        if not np.isfinite(out).all():
            raise ValueError("non-finite inputs after imputation")
        return np.ascontiguousarray(out)

    def to_dict(self) -> dict:
        return {"medians": self.medians.tolist(), "indicator_cols": self.indicator_cols.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Imputer":
        return cls(np.asarray(d["medians"], dtype=np.float64),
                   np.asarray(d["indicator_cols"], dtype=np.int64))


# ---------------------------------------------------------------------------
# random forest


@dataclass
class Tree:
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    seed: int

    @property
    def n_nodes(self) -> int:
        return int(self.feature.size)

    def to_dict(self) -> dict:
        return {"seed": self.seed, "feature": self.feature.tolist(),
                "threshold": self.threshold.tolist(), "left": self.left.tolist(),
                "right": self.right.tolist(), "value": self.value.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Tree":
        return cls(np.asarray(d["feature"], dtype=np.int64),
                   np.asarray(d["threshold"], dtype=np.float64),
                   np.asarray(d["left"], dtype=np.int64), np.asarray(d["right"], dtype=np.int64),
                   np.asarray(d["value"], dtype=np.float64), int(d["seed"]))


@dataclass
class RandomForest:
    """Bagged Gini trees grown to purity on an imputed matrix."""

    trees: list[Tree]
    imputer: Imputer
    max_features: int
    min_samples_leaf: int = 1
    seed: int = 0

    def predict_proba(self, X: np.ndarray, backend: Optional[str] = None) -> np.ndarray:
        K = load_backend(backend)
        Z = self.imputer.transform(X)
        acc = np.zeros(Z.shape[0])
        for t in self.trees:
            acc += K.predict_tree(Z, t.feature, t.threshold, t.left, t.right, t.value)
        return acc / len(self.trees)

    def to_dict(self) -> dict:
        return {"seed": self.seed, "max_features": self.max_features,
                "min_samples_leaf": self.min_samples_leaf, "imputer": self.imputer.to_dict(),
                "trees": [t.to_dict() for t in self.trees]}

    @classmethod
    def from_dict(cls, d: dict) -> "RandomForest":
        return cls([Tree.from_dict(t) for t in d["trees"]], Imputer.from_dict(d["imputer"]),
                   int(d["max_features"]), int(d["min_samples_leaf"]), int(d["seed"]))


def bootstrap_counts(n: int, seed: int, tree_index: int) -> tuple[np.ndarray, int]:
    """Bootstrap multiplicities and the tree's split-sampling seed."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, tree_index]))
    counts = np.bincount(rng.integers(0, n, size=n), minlength=n)
    tree_seed = int(rng.integers(0, 2**63 - 1))
    return counts, tree_seed


def fit_tree(Z: np.ndarray, y: np.ndarray, counts: np.ndarray, max_features: int,
             min_samples_leaf: int, tree_seed: int, backend: Optional[str] = None) -> Tree:
    """Grow one tree on rows with positive ``counts`` (used as weights)."""
    K = load_backend(backend)
    inbag = np.flatnonzero(counts > 0)
    Xb = np.ascontiguousarray(Z[inbag], dtype=np.float64)
    yb = np.ascontiguousarray(y[inbag], dtype=np.float64)
    wb = np.ascontiguousarray(counts[inbag], dtype=np.float64)
    order = np.ascontiguousarray(np.argsort(Xb, axis=0, kind="stable").T, dtype=np.int64)
    f, t, lft, rgt, val, _ = K.build_tree(Xb, yb, wb, order, int(max_features),
                                          int(min_samples_leaf), np.uint64(tree_seed))
    return Tree(f, t, lft, rgt, val, tree_seed)


def fit_random_forest(X, y, n_trees: int = 100, seed: int = 0, max_features: Optional[int] = None,
                      min_samples_leaf: int = 1, backend: Optional[str] = None) -> RandomForest:
    """Fit a bagged forest with ``ceil(sqrt(d))`` candidate features per split.

    Args:
        X: Raw feature matrix; NaN allowed (median-imputed, indicators appended).
        y: 0/1 labels.
        n_trees: Number of trees.
        seed: Per-tree streams come from ``(seed, tree_index)``.
        max_features: Override for the per-split feature count.
        min_samples_leaf: Minimum distinct rows per leaf.
        backend: ``"cython"``, ``"python"`` or ``None`` for the default.
    """
    X = np.asarray(X, dtype=np.float64)
    y = _check_binary(y)
    if X.shape[0] < 2:
        raise InsufficientDataError("need at least 2 rows")
    imp = Imputer.fit(X)
    Z = imp.transform(X)
    d = Z.shape[1]
    mtry = max_features or int(math.ceil(math.sqrt(d)))
    trees = []
    for k in range(n_trees):
        counts, tseed = bootstrap_counts(Z.shape[0], seed, k)
        trees.append(fit_tree(Z, y, counts, mtry, min_samples_leaf, tseed, backend))
    return RandomForest(trees, imp, mtry, min_samples_leaf, seed)


# ---------------------------------------------------------------------------
# logistic regression


@dataclass
class LogisticFit:
    """L2-regularized logistic regression (intercept unpenalized)."""

    weights: np.ndarray
    bias: float
    l2: float
    n_iter: int = 0
    grad_norm: float = 0.0
    loss_history: list[float] = field(default_factory=list, repr=False)

    def decision(self, Z: np.ndarray) -> np.ndarray:
        return Z @ self.weights + self.bias

    def predict_proba(self, Z: np.ndarray) -> np.ndarray:
        return _sigmoid(self.decision(Z))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _logreg_objective(theta: np.ndarray, A: np.ndarray, s: np.ndarray, l2: float) -> float:
    z = A @ theta
    return float(np.sum(np.logaddexp(0.0, -s * z)) + 0.5 * l2 * np.dot(theta[1:], theta[1:]))


def fit_logistic(Z, y, l2: float = 1.0, tol: float = 1e-8, max_iter: int = 10_000) -> LogisticFit:
    """Minimize ``sum log-loss + l2/2 * ||w||^2`` by damped Newton steps.

    Backtracking (Armijo) on the step length guarantees a monotone loss. Stops
    when the gradient norm falls below ``tol``, after ``max_iter`` iterations,
    or when no step strictly decreases the loss at float precision.
    """
    Z = np.asarray(Z, dtype=np.float64)
    y = np.asarray(y).astype(np.float64)
    n, d = Z.shape
    A = np.hstack([np.ones((n, 1)), Z])
    s = 2.0 * y - 1.0
    reg = np.full(d + 1, l2)
    reg[0] = 0.0
    theta = np.zeros(d + 1)
    f = _logreg_objective(theta, A, s, l2)
    hist = [f]
    gnorm = math.inf
    it = 0
    for it in range(1, max_iter + 1):
        p = _sigmoid(A @ theta)
        g = A.T @ (p - y) + reg * theta
        gnorm = float(np.linalg.norm(g))
        if gnorm < tol:
            it -= 1
            break
        H = (A * (p * (1.0 - p))[:, None]).T @ A + np.diag(reg)
        # tiny ridge keeps the unpenalized intercept direction solvable
        H[np.diag_indices_from(H)] += 1e-12
        try:
            step = np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            step = g
        t = 1.0
        gd = float(np.dot(g, step))
        while True:
            cand = theta - t * step
            fc = _logreg_objective(cand, A, s, l2)
            if fc <= f - 1e-4 * t * gd or t < 1e-12:
                break
            t *= 0.5
        if not fc < f:
            # converged to float precision: no step decreases the loss
            break
        theta, f = cand, fc
        hist.append(f)
    return LogisticFit(weights=theta[1:].copy(), bias=float(theta[0]), l2=l2, n_iter=it,
                       grad_norm=gnorm, loss_history=hist)


@dataclass
class LogRegPipeline:
    """Median imputation + indicators, standardization, L2 logistic regression.

    Columns with zero training variance are dropped (weight exactly 0) and
    listed in ``constant_cols``.
    """

    imputer: Imputer
    means: np.ndarray
    stds: np.ndarray
    constant_cols: np.ndarray
    model: LogisticFit

    def transform(self, X) -> np.ndarray:
        Z = self.imputer.transform(X)
        S = (Z - self.means) / np.where(self.stds > 0, self.stds, 1.0)
        S[:, self.constant_cols] = 0.0
        return S

    def predict_proba(self, X) -> np.ndarray:
        return self.model.predict_proba(self.transform(X))

    @property
    def weights(self) -> np.ndarray:
        return self.model.weights

    def to_dict(self) -> dict:
        m = self.model
        return {"imputer": self.imputer.to_dict(), "means": self.means.tolist(),
                "stds": self.stds.tolist(), "constant_cols": self.constant_cols.tolist(),
                "weights": m.weights.tolist(), "bias": m.bias, "l2": m.l2}

    @classmethod
    def from_dict(cls, d: dict) -> "LogRegPipeline":
        return cls(Imputer.from_dict(d["imputer"]), np.asarray(d["means"], dtype=np.float64),
                   np.asarray(d["stds"], dtype=np.float64),
                   np.asarray(d["constant_cols"], dtype=np.int64),
                   LogisticFit(np.asarray(d["weights"], dtype=np.float64), float(d["bias"]),
                               float(d["l2"])))


def fit_logreg_pipeline(X, y, l2: float = 1.0, seed: int = 0, tol: float = 1e-8,
                        max_iter: int = 10_000) -> LogRegPipeline:
    """Fit the imputation + scaling + logistic-regression pipeline.

    ``seed`` is accepted for interface symmetry; the optimizer is deterministic.
    """
    del seed
    X = np.asarray(X, dtype=np.float64)
    y = _check_binary(y)
    imp = Imputer.fit(X)
    Z = imp.transform(X)
    means = Z.mean(axis=0)
    stds = Z.std(axis=0)
    const = np.flatnonzero(~(stds > 1e-12 * np.maximum(1.0, np.abs(means)))).astype(np.int64)
    stds[const] = 0.0
    S = (Z - means) / np.where(stds > 0, stds, 1.0)
    S[:, const] = 0.0
    keep = np.setdiff1d(np.arange(Z.shape[1]), const)
    fit = fit_logistic(S[:, keep], y, l2=l2, tol=tol, max_iter=max_iter)
    w = np.zeros(Z.shape[1])
    w[keep] = fit.weights
    fit.weights = w
    return LogRegPipeline(imp, means, stds, const, fit)


# ---------------------------------------------------------------------------
# folds and stacking


@dataclass
class FoldAssignment:
    folds: np.ndarray
    n_folds: int

    def train_test(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        return np.flatnonzero(self.folds != k), np.flatnonzero(self.folds == k)


def stratified_folds(y, n_folds: int = 5, seed: int = 0) -> FoldAssignment:
    """Shuffle each class with the seed, then deal rows to folds cyclically.

    The cycle continues across classes, so fold sizes differ by at most one and
    each fold's per-class count differs from any other fold's by at most one.
    """
    y = np.asarray(y).astype(np.int64)
    if n_folds < 2:
        raise ValueError("need at least 2 folds")
    for c in (0, 1):
        if (y == c).sum() < n_folds:
            raise InsufficientDataError(
                f"class {c} has {(y == c).sum()} rows, fewer than {n_folds} folds")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
    folds = np.empty(y.size, dtype=np.int64)
    offset = 0
    for c in (1, 0):
        idx = np.flatnonzero(y == c)
        idx = idx[rng.permutation(idx.size)]
        folds[idx] = (offset + np.arange(idx.size)) % n_folds
        offset = (offset + idx.size) % n_folds
    return FoldAssignment(folds, n_folds)


@dataclass
class StackingModel:
    forest: RandomForest
    lr_pipeline: LogRegPipeline
    meta: LogisticFit
    feature_names: list[str]
    training_folds: int
    seed: int

    def base_probabilities(self, X) -> np.ndarray:
        return np.column_stack([self.forest.predict_proba(X), self.lr_pipeline.predict_proba(X)])

    def to_dict(self) -> dict:
        return {
            "format": MODEL_FORMAT,
            "version": MODEL_VERSION,
            "feature_names": list(self.feature_names),
            "training_folds": self.training_folds,
            "seed": self.seed,
            "forest": self.forest.to_dict(),
            "lr_pipeline": self.lr_pipeline.to_dict(),
            "meta": {"weights": self.meta.weights.tolist(), "bias": self.meta.bias,
                     "l2": self.meta.l2},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StackingModel":
        if d.get("format") != MODEL_FORMAT:
            raise ValueError("not a stacking model document")
        if d.get("version") != MODEL_VERSION:
            raise ValueError(f"unsupported model version {d.get('version')!r}")
        m = d["meta"]
        return cls(RandomForest.from_dict(d["forest"]), LogRegPipeline.from_dict(d["lr_pipeline"]),
                   LogisticFit(np.asarray(m["weights"], dtype=np.float64), float(m["bias"]),
                               float(m["l2"])),
                   list(d["feature_names"]), int(d["training_folds"]), int(d["seed"]))


def save_model(model: StackingModel, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model.to_dict(), fh, allow_nan=False)
        fh.write("\n")


def load_model(path) -> StackingModel:
    with open(path, "r", encoding="utf-8") as fh:
        return StackingModel.from_dict(json.load(fh))


def _base_learners(X, y, seed: int, n_trees: int, backend):
    rf = fit_random_forest(X, y, n_trees=n_trees, seed=derive_seed(seed, 1), backend=backend)
    lr = fit_logreg_pipeline(X, y, l2=1.0)
    return rf, lr


def oof_base_probabilities(X, y, folds: int = 5, seed: int = 0, n_trees: int = 100,
                           backend: Optional[str] = None) -> np.ndarray:
    """Out-of-fold ``(n, 2)`` base-learner probabilities (forest, LR)."""
    X = np.asarray(X, dtype=np.float64)
    y = _check_binary(y)
    fa = stratified_folds(y, folds, derive_seed(seed, 2))
    meta_X = np.empty((y.size, 2))
    for k in range(folds):
        tr, te = fa.train_test(k)
        if np.unique(y[tr]).size < 2 or np.unique(y[te]).size < 2:
            raise InsufficientDataError(f"inner fold {k} lacks a class")
        rf, lr = _base_learners(X[tr], y[tr], derive_seed(seed, 3, k), n_trees, backend)
        meta_X[te, 0] = rf.predict_proba(X[te], backend)
        meta_X[te, 1] = lr.predict_proba(X[te])
    return meta_X


def fit_stacking(X, y, folds: int = 5, seed: int = 0, n_trees: int = 100,
                 feature_names: Optional[Sequence[str]] = None,
                 backend: Optional[str] = None) -> StackingModel:
    """Fit the stacking predictor with inner out-of-fold meta-features.

    Raises:
        InsufficientDataError: single-class labels or a fold without both classes.
    """
    X = np.asarray(X, dtype=np.float64)
    y = _check_binary(y)
    meta_X = oof_base_probabilities(X, y, folds, seed, n_trees, backend)
    meta = fit_logistic(meta_X, y, l2=1.0)
    rf, lr = _base_learners(X, y, derive_seed(seed, 4), n_trees, backend)
    names = list(feature_names) if feature_names is not None else [f"x{j}" for j in range(X.shape[1])]
    if len(names) != X.shape[1]:
        raise ValueError("feature_names length does not match X")
    return StackingModel(rf, lr, meta, names, folds, seed)


def predict_proba(model: StackingModel, X, feature_names: Optional[Sequence[str]] = None,
                  backend: Optional[str] = None) -> np.ndarray:
    """Membership probabilities from the meta-learner.

    Raises:
        ValueError: feature names or column count do not match the model.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != len(model.feature_names):
        raise ValueError(f"dimension mismatch: model expects {len(model.feature_names)} columns")
    if feature_names is not None and list(feature_names) != list(model.feature_names):
        raise ValueError(f"feature names {list(feature_names)} do not match {model.feature_names}")
    base = np.column_stack([model.forest.predict_proba(X, backend),
                            model.lr_pipeline.predict_proba(X)])
    return model.meta.predict_proba(base)


@dataclass
class CVResult:
    """Out-of-fold predictions from outer cross-validation."""

    oof: np.ndarray
    folds: FoldAssignment
    models: list[StackingModel]
    train_indices: list[np.ndarray]

    def fold_scores(self, y) -> list[tuple[np.ndarray, np.ndarray]]:
        y = np.asarray(y)
        return [(self.oof[self.folds.folds == k], y[self.folds.folds == k])
                for k in range(self.folds.n_folds)]


def cross_validate(X, y, folds: int = 5, seed: int = 0, n_trees: int = 100,
                   feature_names: Optional[Sequence[str]] = None,
                   backend: Optional[str] = None, keep_models: bool = True) -> CVResult:
    """Stratified outer CV; every row is scored once by a model that never saw it.

    Raises:
        InsufficientDataError: fewer than ``2 * folds`` rows or too few per class.
    """
    X = np.asarray(X, dtype=np.float64)
    y = _check_binary(y)
    if y.size < 2 * folds:
        raise InsufficientDataError(f"need at least {2 * folds} labeled rows, got {y.size}")
    fa = stratified_folds(y, folds, seed)
    oof = np.full(y.size, np.nan)
    models, trains = [], []
    for k in range(folds):
        tr, te = fa.train_test(k)
        model = fit_stacking(X[tr], y[tr], folds=folds, seed=derive_seed(seed, 10, k),
                             n_trees=n_trees, feature_names=feature_names, backend=backend)
        oof[te] = predict_proba(model, X[te], backend=backend)
        if keep_models:
            models.append(model)
        trains.append(tr)
    return CVResult(oof, fa, models, trains)
