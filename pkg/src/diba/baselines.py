"""Memorization-style membership baselines and reference-model calibration.

Each method has a raw metric (e.g. NLL) and a sign that turns it into a
membership score where higher means "more likely member". Calibrated variants
use ``metric_ft - metric_ref`` with the same sign.

By default a baseline scores ``trace.reference_answer``; with
``on="ft-samples"`` it averages the metric over ``samples_ft``.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .features import zlib_len
from .traces import PromptTrace, ResponseSample, TraceSet

DEFAULT_MIN_K = 0.2


class BaselineUnavailable(ValueError):
    """A baseline's required field is absent from the trace."""


def _lp(sample: ResponseSample, which: str) -> np.ndarray:
    vals = getattr(sample, f"token_logprobs_{which}")
    if vals is None:
        raise BaselineUnavailable(f"token_logprobs_{which} missing")
    return np.asarray(vals, dtype=np.float64)


def loss_score(target: ResponseSample, which: str = "ft") -> float:
    """Sequence negative log-likelihood ``-sum lp``."""
    return float(-np.sum(_lp(target, which)))


def lira_score(target: ResponseSample) -> float:
    """Log-likelihood ratio ``sum lp_ft - sum lp_ref``."""
    return float(np.sum(_lp(target, "ft")) - np.sum(_lp(target, "ref")))


def zlib_baseline(target: ResponseSample, which: str = "ft") -> float:
    """NLL divided by the zlib-compressed length of the text."""
    if not target.text:
        raise BaselineUnavailable("empty text")
    return loss_score(target, which) / zlib_len(target.text)


def min_k_score(target: ResponseSample, k: float = DEFAULT_MIN_K, which: str = "ft") -> float:
    """Mean of the ``ceil(k * |o|)`` smallest per-token NLLs."""
    if not 0.0 < k <= 1.0:
        raise ValueError("k must lie in (0, 1]")
    nll = np.sort(-_lp(target, which))
    m = max(1, int(math.ceil(k * nll.size - 1e-12)))
    return float(np.mean(nll[:m]))


def entropy_score(target: ResponseSample, which: str = "ft") -> float:
    """Mean predictive entropy over the response tokens.

    This is a stand-in definition and reports label it as such.
    """
    ents = getattr(target, f"token_entropies_{which}")
    if ents is None:
        raise BaselineUnavailable(f"baseline unavailable: token_entropies_{which} missing")
    if not ents:
        raise BaselineUnavailable("baseline unavailable: empty entropies")
    return float(np.mean(ents))


def neighbor_score(trace: PromptTrace, which: str = "ft") -> float:
    """Mean neighbor sequence log-prob minus the prompt's own."""
    own = getattr(trace, f"prompt_seq_logprob_{which}")
    if own is None or not trace.neighbors:
        raise BaselineUnavailable("neighbor baseline needs neighbors and prompt_seq_logprob")
    vals = [getattr(n, f"seq_logprob_{which}") for n in trace.neighbors]
    if any(v is None for v in vals):
        raise BaselineUnavailable(f"neighbor seq_logprob_{which} missing")
    return float(np.mean(vals) - own)


def calibrate(score_ft: float, score_ref: float) -> float:
    """Reference-model calibration: ``score_ft - score_ref``."""
    return float(score_ft - score_ref)


@dataclass(frozen=True)
class Method:
    """One baseline: metric under a model, plus the membership sign.

    ``metric`` is ``None`` for methods that score the prompt, not a response.
    """

    name: str
    sign: float
    metric: Optional[Callable[[ResponseSample, str], float]]
    calibratable: bool = True
    convention: str = ""


METHODS: dict[str, Method] = {
    "loss": Method("loss", -1.0, loss_score, convention="score = -NLL"),
    "lira": Method("lira", 1.0, lambda s, which: lira_score(s), calibratable=False,
                   convention="score = log p_ft - log p_ref (already reference-calibrated)"),
    "zlib": Method("zlib", -1.0, zlib_baseline, convention="score = -NLL / zlib_len"),
    "min_k": Method("min_k", -1.0, lambda s, which: min_k_score(s, DEFAULT_MIN_K, which),
                    convention="score = -mean of lowest 20% token NLLs"),
    "entropy": Method("entropy", -1.0, entropy_score,
                      convention="score = -mean token entropy (stand-in definition)"),
    "neighbor": Method("neighbor", -1.0, None,
                       convention="score = -(mean neighbor logprob - prompt logprob)"),
}
METHOD_NAMES = tuple(METHODS)


def _targets(trace: PromptTrace, on: str) -> list[ResponseSample]:
    if on == "reference":
        if trace.reference_answer is None:
            raise BaselineUnavailable("reference_answer missing")
        return [trace.reference_answer]
    if on == "ft-samples":
        if not trace.samples_ft:
            raise BaselineUnavailable("samples_ft empty")
        return trace.samples_ft
    raise ValueError(f"on must be 'reference' or 'ft-samples', got {on!r}")


def method_scores(trace: PromptTrace, method: str, on: str = "reference") -> tuple[float, float]:
    """Membership-oriented (raw, calibrated) scores; calibrated is NaN if n/a.

    Raises:
        BaselineUnavailable: a required field is missing.
    """
    m = METHODS[method]
    if method == "neighbor":
        raw = neighbor_score(trace, "ft")
        try:
            cal = calibrate(raw, neighbor_score(trace, "ref"))
        except BaselineUnavailable:
            cal = math.nan
        return m.sign * raw, m.sign * cal
    targets = _targets(trace, on)
    raw = float(np.mean([m.metric(t, "ft") for t in targets]))
    if not m.calibratable:
        return m.sign * raw, math.nan
    ref = float(np.mean([m.metric(t, "ref") for t in targets]))
    return m.sign * raw, m.sign * calibrate(raw, ref)


@dataclass
class BaselineTable:
    """Scores per method; ``unavailable`` maps method to the reason."""

    prompt_ids: list[str]
    labels: list[str]
    raw: dict[str, np.ndarray]
    calibrated: dict[str, np.ndarray]
    unavailable: dict[str, str]
    on: str

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["prompt_id", "label", "method", "raw", "calibrated"])
        for name in self.raw:
            r, c = self.raw[name], self.calibrated[name]
            for i, pid in enumerate(self.prompt_ids):
                w.writerow([pid, self.labels[i], name, _fmt(r[i]), _fmt(c[i])])
        return buf.getvalue()


def _fmt(v: float) -> str:
    return "" if math.isnan(v) else repr(float(v))


def compute_baselines(ts: TraceSet | Sequence[PromptTrace], on: str = "reference",
                      methods: Optional[Sequence[str]] = None) -> BaselineTable:
    """Score every record with every requested method.

    A method missing its inputs on any record is reported as unavailable
    instead of failing the whole table.
    """
    records = ts.records if isinstance(ts, TraceSet) else list(ts)
    names = list(methods) if methods is not None else list(METHOD_NAMES)
    raw, cal, unavailable = {}, {}, {}
    for name in names:
        if name not in METHODS:
            raise ValueError(f"unknown baseline {name!r}")
        r = np.empty(len(records))
        c = np.empty(len(records))
        try:
            for i, rec in enumerate(records):
                r[i], c[i] = method_scores(rec, name, on)
        except BaselineUnavailable as exc:
            unavailable[name] = f"{exc} (prompt_id {rec.prompt_id})"
            continue
        raw[name] = r
        cal[name] = c
    return BaselineTable([r.prompt_id for r in records], [r.label for r in records], raw, cal,
                         unavailable, on)
