"""EvalReport assembly, JSON serialization and log-scale ROC plots.

Reports carry no timestamps: the same inputs, flags and seed give identical
bytes.
"""

from __future__ import annotations

import hashlib
import json
import math
import platform
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Mapping, Optional, Sequence
from xml.sax.saxutils import escape

import numpy as np

from . import __version__
from ._backend import BACKEND
from .baselines import METHODS, BaselineTable
from .features import ZLIB_LEVEL, FeatureMatrix
from .metrics import RocCurve, fmt_target, metric_block, percentile_ranks, roc_curve, split_by_label
from .pipeline import AttackResult

REPORT_FORMAT = "diba-eval-report"
SCHEMA_VERSION = 1
STAND_INS = {
    "entropy": "mean token predictive entropy (stand-in definition)",
    "neighbor": "same-skill simulator prompts as neighbors (stand-in generator)",
}


def clean(obj: Any) -> Any:
    """Recursively convert numpy scalars/arrays to JSON types; NaN/inf become None."""
    if isinstance(obj, Mapping):
        return {str(k): clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return clean(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    return obj


def canonical_json(obj: Any) -> str:
    return json.dumps(clean(obj), sort_keys=True, separators=(",", ":"), ensure_ascii=False,
                      allow_nan=False)


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def versions() -> dict[str, str]:
    return {"diba": __version__, "numpy": np.__version__, "python": platform.python_version()}


@dataclass
class EvalReport:
    """Machine-readable evaluation record.

    ``blocks`` holds the optional sections (``attack``, ``single_feature``,
    ``baselines``, ``hardness``, ``defenses``, ``transfer``, ``diagnostics``).
    """

    command: str
    config: dict
    provenance: dict
    blocks: dict = field(default_factory=dict)

    @property
    def run_id(self) -> str:
        payload = canonical_json({"command": self.command, "config": self.config,
                                  "inputs": self.provenance.get("inputs", {})})
        return sha256_bytes(payload.encode("utf-8"))[:16]

    def to_dict(self) -> dict:
        return clean({"format": REPORT_FORMAT, "schema_version": SCHEMA_VERSION,
                      "run_id": self.run_id, "command": self.command, "config": self.config,
                      "provenance": self.provenance, **self.blocks})

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, ensure_ascii=False,
                          allow_nan=False) + "\n"

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8", newline="\n")


def load_schema() -> dict:
    text = resources.files("diba").joinpath("data/eval_report.schema.json").read_text("utf-8")
    return json.loads(text)


def provenance(seed: int, inputs: Mapping[str, str], **extra) -> dict:
    """Seeds, versions, input hashes and fixed constants behind a report."""
    return {"seed": int(seed), "versions": versions(), "backend": BACKEND,
            "inputs": dict(inputs), "zlib_level": ZLIB_LEVEL,
            "logprob_unit": "nats", "stand_ins": dict(STAND_INS), **extra}


# ---------------------------------------------------------------------------
# blocks


def attack_block(res: AttackResult) -> dict:
    return {"features": list(res.feature_names), "aggregate": res.aggregate,
            "per_fold": res.per_fold, "fold_mean": res.fold_mean}


def single_feature_block(table: Mapping[str, AttackResult], flags: Mapping[str, bool]) -> dict:
    return {name: {"aggregate": r.aggregate, "fold_mean": r.fold_mean, "pareto": flags.get(name)}
            for name, r in table.items()}


def scores_block(fm: FeatureMatrix, res: AttackResult) -> list[dict]:
    """Per-prompt out-of-fold scores (labeled rows) in matrix order."""
    return [{"prompt_id": pid, "label": int(y), "fold": int(f), "score": float(s)}
            for pid, y, f, s in zip(res.prompt_ids, res.y, res.folds, res.oof)]


def _flag_threshold(c: RocCurve, target: float) -> float:
    ok = c.fp <= math.floor(target * c.n_neg * (1.0 + 1e-12))
    return float(c.threshold[np.nonzero(ok)[0][-1]])


def percentile_diagnostics(fm: FeatureMatrix, res: AttackResult,
                           fpr_targets: Sequence[float]) -> dict:
    """Where flagged members (TP) and flagged non-members (FP) sit per feature.

    Each flagged prompt's feature value is ranked against the non-member
    distribution; the table reports quartiles of those percentiles.
    """
    lab = fm.subset(fm.labeled_mask)
    X = lab.columns(res.feature_names)
    pos, neg = split_by_label(res.oof, res.y)
    c = roc_curve(pos, neg)
    out = {}
    for t in fpr_targets:
        thr = _flag_threshold(c, t)
        flagged = res.oof >= thr
        block = {"threshold": thr if math.isfinite(thr) else None}
        for name, mask in (("tp", flagged & (res.y == 1)), ("fp", flagged & (res.y == 0))):
            rows = {"count": int(mask.sum())}
            for j, feat in enumerate(res.feature_names):
                ref = X[res.y == 0, j]
                ref = ref[~np.isnan(ref)]
                vals = X[mask, j]
                vals = vals[~np.isnan(vals)]
                if vals.size == 0 or ref.size == 0:
                    rows[feat] = None
                    continue
                pr = percentile_ranks(vals, ref)
                q = np.quantile(pr, [0.25, 0.5, 0.75])
                rows[feat] = {"p25": float(q[0]), "median": float(q[1]), "p75": float(q[2]),
                              "mean": float(pr.mean())}
            block[name] = rows
        out[fmt_target(t)] = block
    return out


def baseline_block(table: BaselineTable, y: np.ndarray, fpr_targets: Sequence[float],
                   f_max: float = 0.001) -> dict:
    """AUC/TPR tables for each baseline, raw and calibrated."""
    y = np.asarray(y)
    lab = y >= 0
    methods = {}
    for name in METHODS:
        if name in table.unavailable:
            methods[name] = {"available": False, "reason": table.unavailable[name]}
            continue
        if name not in table.raw:
            continue
        entry = {"available": True, "convention": METHODS[name].convention,
                 "stand_in": name in STAND_INS}
        for kind, arr in (("raw", table.raw[name]), ("calibrated", table.calibrated[name])):
            s = arr[lab]
            if np.isnan(s).any():
                entry[kind] = None
            else:
                entry[kind] = metric_block(s, y[lab], fpr_targets, f_max, probabilities=False)
        methods[name] = entry
    return {"on": table.on, "methods": methods}


def defense_block(defense: str, params: Mapping, before: Mapping, after: Mapping,
                  epsilon: Optional[float] = None, **extra) -> dict:
    out = {"defense": defense, "params": dict(params), "epsilon": epsilon,
           "before": dict(before), "after": dict(after),
           "auc_drop": float(before["auc"] - after["auc"])}
    out.update(extra)
    return out


# ---------------------------------------------------------------------------
# plots

_W, _H, _PAD = 480, 400, 50
_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2",
           "#7f7f7f", "#bcbd22", "#17becf")


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def log_roc_svg(curves: RocCurve | Mapping[str, RocCurve]) -> str:
    """SVG text of ROC curves on a log10 FPR axis from ``1/n_neg`` to 1.

    Zero-FPR points are drawn at the left edge.
    """
    if isinstance(curves, RocCurve):
        curves = {"roc": curves}
    if not curves:
        raise ValueError("no curves to plot")
    n_neg = max(c.n_neg for c in curves.values())
    if n_neg < 1:
        raise ValueError("need at least one negative")
    lo = math.log10(1.0 / n_neg) if n_neg > 1 else -1.0
    span = -lo
    pw, ph = _W - 2 * _PAD, _H - 2 * _PAD

    def xy(f: float, t: float) -> tuple[float, float]:
        lf = math.log10(max(f, 10.0 ** lo))
        return _PAD + (lf - lo) / span * pw, _PAD + (1.0 - t) * ph

    lines = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
        f'viewBox="0 0 {_W} {_H}">',
        f'<rect x="{_PAD}" y="{_PAD}" width="{pw}" height="{ph}" fill="none" stroke="black"/>',
    ]
    for k in range(int(math.ceil(lo)), 1):
        x, _ = xy(10.0 ** k, 0.0)
        lines.append(f'<line x1="{_fmt(x)}" y1="{_PAD + ph}" x2="{_fmt(x)}" y2="{_PAD + ph + 5}" '
                     'stroke="black"/>')
        lines.append(f'<text x="{_fmt(x)}" y="{_PAD + ph + 18}" font-size="11" '
                     f'text-anchor="middle">1e{k}</text>')
    grid = np.unique(np.concatenate([np.logspace(lo, 0.0, 64), [1.0]]))
    diag = " ".join(f"{_fmt(a)},{_fmt(b)}" for a, b in (xy(f, f) for f in grid))
    lines.append(f'<polyline class="diagonal" points="{diag}" fill="none" stroke="gray" '
                 'stroke-dasharray="4 3"/>')
    for i, (name, c) in enumerate(sorted(curves.items())):
        pts = " ".join(f"{_fmt(a)},{_fmt(b)}" for a, b in
                       (xy(f, t) for f, t in zip(c.fpr.tolist(), c.tpr.tolist())))
        color = _COLORS[i % len(_COLORS)]
        lines.append(f'<polyline class="roc" data-method="{escape(name)}" points="{pts}" '
                     f'fill="none" stroke="{color}"/>')
        lines.append(f'<text x="{_PAD + 8}" y="{_PAD + 16 + 14 * i}" font-size="11" '
                     f'fill="{color}">{escape(name)}</text>')
    lines.append(f'<text x="{_W / 2:.0f}" y="{_H - 8}" font-size="12" text-anchor="middle">'
                 'false positive rate (log10)</text>')
    lines.append(f'<text x="14" y="{_H / 2:.0f}" font-size="12" text-anchor="middle" '
                 f'transform="rotate(-90 14 {_H / 2:.0f})">true positive rate</text>')
    lines.append("</svg>")
    return "\n".join(lines) + "\n"


def emit_log_roc_svg(roc: RocCurve | Mapping[str, RocCurve], path: str | Path) -> None:
    """Write :func:`log_roc_svg` output to ``path``."""
    Path(path).write_text(log_roc_svg(roc), encoding="utf-8", newline="\n")


def metrics_csv(report: Mapping) -> str:
    """Flat ``section,name,fold,metric,value`` table of the report's metric blocks."""
    rows = ["section,name,fold,metric,value"]

    def emit(section, name, fold, blk):
        for k in ("auc", "bal_acc", "pauc", "ks_tail"):
            v = blk.get(k)
            rows.append(f"{section},{name},{fold},{k},{'' if v is None else repr(float(v))}")
        for t, v in sorted(blk.get("tpr_at", {}).items()):
            rows.append(f"{section},{name},{fold},tpr_at_{t},{repr(float(v))}")

    att = report.get("attack")
    if att:
        emit("attack", "diba", "all", att["aggregate"])
        for blk in att["per_fold"]:
            emit("attack", "diba", blk["fold"], blk)
    for name, r in sorted((report.get("single_feature") or {}).items()):
        emit("single_feature", name, "all", r["aggregate"])
    for name, m in sorted(((report.get("baselines") or {}).get("methods") or {}).items()):
        for kind in ("raw", "calibrated"):
            if m.get(kind):
                emit("baseline", f"{name}_{kind}", "all", m[kind])
    return "\n".join(rows) + "\n"


__all__ = [
    "EvalReport", "attack_block", "baseline_block", "canonical_json", "clean",
    "defense_block", "emit_log_roc_svg", "load_schema", "log_roc_svg", "metrics_csv",
    "percentile_diagnostics", "provenance", "scores_block", "sha256_bytes", "sha256_file",
    "single_feature_block", "versions",
]
