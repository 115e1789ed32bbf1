"""Per-prompt behavioral-divergence features.

Five features per prompt:

* ``ft_score`` / ``base_score``: mean verifier reward over samples drawn from
  the fine-tuned / reference policy.
* ``divergence``: mean over samples of the per-token mean k3 estimate of
  KL(ft || ref).
* ``likelihood``: mean over samples of the sequence log-probability
  difference ``log p_ft(o) - log p_ref(o)``.
* ``zlib``: the same difference divided by the zlib-compressed text length.
"""

from __future__ import annotations

import csv
import io
import math
import zlib as _zlib
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .traces import PromptTrace, ResponseSample, TraceSet

FEATURE_NAMES = ("ft_score", "base_score", "divergence", "likelihood", "zlib")
ZLIB_LEVEL = 6
LABEL_CODES = {"member": 1, "nonmember": 0}


@dataclass
class FeatureVector:
    """Feature values for one prompt; NaN marks a missing value."""

    prompt_id: str
    ft_score: float
    base_score: float
    divergence: float
    likelihood: float
    zlib: float
    source: str = "ft"
    label: str = "unknown"

    def values(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in FEATURE_NAMES], dtype=np.float64)

    @property
    def missing(self) -> dict[str, bool]:
        return {n: math.isnan(getattr(self, n)) for n in FEATURE_NAMES}

    @property
    def advantage(self) -> float:
        """Correctness gain ``ft_score - base_score``."""
        return self.ft_score - self.base_score


def _mean(xs: Sequence[float]) -> float:
    return float(np.mean(xs)) if len(xs) else math.nan


def ft_score(trace: PromptTrace) -> float:
    """Mean reward over fine-tuned samples (NaN when there are none)."""
    return _mean([s.reward for s in trace.samples_ft])


def base_score(trace: PromptTrace) -> float:
    """Mean reward over reference samples (NaN when there are none)."""
    return _mean([s.reward for s in trace.samples_ref])


def _aligned(sample: ResponseSample) -> tuple[np.ndarray, np.ndarray]:
    if not sample.has_logprobs:
        raise ValueError("sample has no token log-probabilities")
    ft = np.asarray(sample.token_logprobs_ft, dtype=np.float64)
    ref = np.asarray(sample.token_logprobs_ref, dtype=np.float64)
    if ft.shape != ref.shape:
        raise ValueError(f"length mismatch: {ft.size} ft vs {ref.size} ref log-probabilities")
    if ft.size == 0:
        raise ValueError("empty log-probability arrays")
    return ft, ref


def k3_terms(lp_ft, lp_ref) -> np.ndarray:
    """Per-token k3 contributions ``exp(d) - d - 1`` with ``d = lp_ref - lp_ft``."""
    d = np.asarray(lp_ref, dtype=np.float64) - np.asarray(lp_ft, dtype=np.float64)
    # expm1 keeps precision at small d
    return np.expm1(d) - d


def k3_response(sample: ResponseSample) -> float:
    """Per-token mean k3 for one sample; always >= 0."""
    ft, ref = _aligned(sample)
    return float(np.mean(k3_terms(ft, ref)))


def seq_logprob_diff(sample: ResponseSample) -> float:
    ft, ref = _aligned(sample)
    return float(ft.sum() - ref.sum())


def zlib_len(text: str) -> int:
    """Byte length of the zlib container (level 6) of the UTF-8 text."""
    if not text:
        raise ValueError("zlib_len of empty text")
    return len(_zlib.compress(text.encode("utf-8"), ZLIB_LEVEL))


def _samples(trace: PromptTrace, source: str) -> list[ResponseSample]:
    if source == "ft":
        pool = trace.samples_ft
    elif source == "ref":
        pool = trace.samples_ref
    else:
        raise ValueError(f"source must be 'ft' or 'ref', got {source!r}")
    return [s for s in pool if s.has_logprobs]


def divergence_feature(trace: PromptTrace, source: str = "ft") -> float:
    """Mean per-sample k3 over the chosen sample set (NaN if unavailable)."""
    return _mean([k3_response(s) for s in _samples(trace, source)])


def likelihood_feature(trace: PromptTrace, source: str = "ft") -> float:
    """Mean sequence log-prob difference ft minus ref (NaN if unavailable)."""
    return _mean([seq_logprob_diff(s) for s in _samples(trace, source)])


def zlib_feature(trace: PromptTrace, source: str = "ft") -> float:
    """Mean of sequence log-prob difference over zlib length (NaN if unavailable)."""
    vals = [seq_logprob_diff(s) / zlib_len(s.text) for s in _samples(trace, source) if s.text]
    return _mean(vals)


def extract_features(trace: PromptTrace, source: str = "ft") -> FeatureVector:
    """Assemble all five features; uncomputable ones are NaN."""
    return FeatureVector(
        prompt_id=trace.prompt_id,
        ft_score=ft_score(trace),
        base_score=base_score(trace),
        divergence=divergence_feature(trace, source),
        likelihood=likelihood_feature(trace, source),
        zlib=zlib_feature(trace, source),
        source=source,
        label=trace.label,
    )


@dataclass
class FeatureMatrix:
    """Stacked feature vectors with labels.

    Attributes:
        X: ``(n, 5)`` array in :data:`FEATURE_NAMES` order, NaN for missing.
        labels: Label strings, including ``unknown``.
    """

    prompt_ids: list[str]
    labels: list[str]
    X: np.ndarray
    source: str = "ft"
    feature_names: tuple[str, ...] = FEATURE_NAMES
    vectors: list[FeatureVector] = field(default_factory=list, repr=False)

    def __len__(self) -> int:
        return len(self.prompt_ids)

    @property
    def labeled_mask(self) -> np.ndarray:
        return np.array([lab in LABEL_CODES for lab in self.labels], dtype=bool)

    @property
    def y(self) -> np.ndarray:
        """0/1 labels; unknown rows map to -1."""
        return np.array([LABEL_CODES.get(lab, -1) for lab in self.labels], dtype=np.int64)

    def subset(self, mask_or_idx) -> "FeatureMatrix":
        idx = np.arange(len(self))[mask_or_idx]
        return FeatureMatrix(
            prompt_ids=[self.prompt_ids[i] for i in idx],
            labels=[self.labels[i] for i in idx],
            X=self.X[idx],
            source=self.source,
            feature_names=self.feature_names,
            vectors=[self.vectors[i] for i in idx] if self.vectors else [],
        )

    def columns(self, names: Sequence[str]) -> np.ndarray:
        return self.X[:, [self.feature_names.index(n) for n in names]]

    def to_csv(self) -> str:
        return features_to_csv(self)


def feature_matrix(vectors: Iterable[FeatureVector]) -> FeatureMatrix:
    vecs = list(vectors)
    X = np.array([v.values() for v in vecs], dtype=np.float64).reshape(len(vecs), len(FEATURE_NAMES))
    sources = {v.source for v in vecs}
    if len(sources) > 1:
        raise ValueError(f"mixed feature sources {sorted(sources)}")
    return FeatureMatrix(
        prompt_ids=[v.prompt_id for v in vecs],
        labels=[v.label for v in vecs],
        X=X,
        source=sources.pop() if sources else "ft",
        vectors=vecs,
    )


def extract_matrix(ts: TraceSet | Iterable[PromptTrace], source: str = "ft") -> FeatureMatrix:
    records = ts.records if isinstance(ts, TraceSet) else list(ts)
    return feature_matrix(extract_features(r, source) for r in records)


def _fmt(v: float) -> str:
    return "" if math.isnan(v) else repr(float(v))


def features_to_csv(fm: FeatureMatrix) -> str:
    """CSV export; blank cells for missing values plus ``missing_<name>`` columns."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["prompt_id", "label", *fm.feature_names, "source",
                *[f"missing_{n}" for n in fm.feature_names]])
    for i, pid in enumerate(fm.prompt_ids):
        row = fm.X[i]
        w.writerow([pid, fm.labels[i], *[_fmt(v) for v in row], fm.source,
                    *[int(math.isnan(v)) for v in row]])
    return buf.getvalue()


def features_from_csv(text: str) -> FeatureMatrix:
    """Inverse of :func:`features_to_csv`."""
    rows = list(csv.DictReader(io.StringIO(text)))
    vecs = []
    for r in rows:
        vals = {n: (math.nan if r[n] == "" else float(r[n])) for n in FEATURE_NAMES}
        vecs.append(FeatureVector(prompt_id=r["prompt_id"], source=r["source"], label=r["label"], **vals))
    return feature_matrix(vecs)
