"""Trace data model and the JSONL interchange format.

One line per audited prompt. An optional first line ``{"_meta": {...}}``
carries generator metadata. Log-probabilities are natural-log (nats) and
untempered; the sampling temperature lives in the metadata.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Optional

LABELS = ("member", "nonmember", "unknown")
SOURCES = ("ft", "ref")

_RECORD_REQUIRED = ("prompt_id", "prompt_text", "label", "samples_ft", "samples_ref")
_RECORD_OPTIONAL = (
    "reference_answer",
    "neighbors",
    "prompt_seq_logprob_ft",
    "prompt_seq_logprob_ref",
)
_SAMPLE_REQUIRED = ("text", "reward", "token_logprobs_ft", "token_logprobs_ref", "source")
_SAMPLE_OPTIONAL = ("token_entropies_ft", "token_entropies_ref")
_META_KEYS = ("generator", "n_samples", "temperature", "seed", "notes")


class TraceError(Exception):
    """Base class for trace parsing and I/O failures."""


class TraceValidationError(TraceError, ValueError):
    """A record violates the schema.

    Attributes:
        code: Stable machine-readable error code (one per invariant).
        path: Field path inside the record, e.g. ``samples_ft[2].reward``.
        prompt_id: Offending record id if it could be read.
        line: 1-based line number when raised by :func:`load_trace_set`.
    """

    def __init__(self, code: str, message: str, path: str = "", prompt_id: str | None = None,
                 line: int | None = None):
        self.code = code
        self.path = path
        self.prompt_id = prompt_id
        self.line = line
        super().__init__(message)

    def __str__(self) -> str:
        parts = [f"[{self.code}]"]
        if self.line is not None:
            parts.append(f"line {self.line}:")
        if self.prompt_id is not None:
            parts.append(f"prompt_id={self.prompt_id!r}")
        if self.path:
            parts.append(f"at {self.path}:")
        parts.append(super().__str__())
        return " ".join(parts)


class TraceSetError(TraceError, ValueError):
    """Set-level failure: duplicates, empty sets, or aggregated line errors."""

    def __init__(self, code: str, message: str, errors: list[TraceValidationError] | None = None):
        self.code = code
        self.errors = errors or []
        super().__init__(message)


class TraceIOError(TraceError, OSError):
    """Reading or writing a trace file failed."""


@dataclass
class ResponseSample:
    """One sampled response scored under both models.

    ``token_logprobs_*`` may be ``None`` only when a text transform made the
    stored values stale (see :mod:`diba.defenses`).
    """

    text: str
    reward: int
    token_logprobs_ft: Optional[list[float]]
    token_logprobs_ref: Optional[list[float]]
    source: str
    token_entropies_ft: Optional[list[float]] = None
    token_entropies_ref: Optional[list[float]] = None
    extras: dict[str, Any] = field(default_factory=dict)

    @property
    def has_logprobs(self) -> bool:
        return self.token_logprobs_ft is not None and self.token_logprobs_ref is not None


@dataclass
class Neighbor:
    text: str
    seq_logprob_ft: float
    seq_logprob_ref: Optional[float] = None
    extras: dict[str, Any] = field(default_factory=dict)


@dataclass
class PromptTrace:
    prompt_id: str
    prompt_text: str
    label: str
    samples_ft: list[ResponseSample]
    samples_ref: list[ResponseSample]
    reference_answer: Optional[ResponseSample] = None
    neighbors: Optional[list[Neighbor]] = None
    prompt_seq_logprob_ft: Optional[float] = None
    prompt_seq_logprob_ref: Optional[float] = None
    extras: dict[str, Any] = field(default_factory=dict)

    @property
    def is_member(self) -> bool:
        return self.label == "member"


@dataclass
class TraceMeta:
    generator: str = "unknown"
    n_samples: int = 0
    temperature: float = 1.0
    seed: int = 0
    notes: str = ""
    extras: dict[str, Any] = field(default_factory=dict)


@dataclass
class TraceSet:
    records: list[PromptTrace]
    metadata: TraceMeta = field(default_factory=TraceMeta)

    def __post_init__(self) -> None:
        seen: set[str] = set()
        for rec in self.records:
            if rec.prompt_id in seen:
                raise TraceSetError("duplicate_id", f"duplicate prompt_id {rec.prompt_id!r}")
            seen.add(rec.prompt_id)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def label_counts(self) -> dict[str, int]:
        counts = {lab: 0 for lab in LABELS}
        for rec in self.records:
            counts[rec.label] += 1
        return counts

    @property
    def n_members(self) -> int:
        return self.label_counts["member"]

    @property
    def n_nonmembers(self) -> int:
        return self.label_counts["nonmember"]


# ---------------------------------------------------------------------------
# validation helpers


def _fail(code: str, msg: str, path: str, pid: str | None):
    raise TraceValidationError(code, msg, path=path, prompt_id=pid)


def _is_number(x: Any) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool)


def _real(x: Any, path: str, pid: str | None) -> float:
    if not _is_number(x):
        _fail("type_error", f"expected a number, got {type(x).__name__}", path, pid)
    v = float(x)
    if not math.isfinite(v):
        _fail("non_finite", "value must be finite", path, pid)
    return v


def _string(x: Any, path: str, pid: str | None) -> str:
    if not isinstance(x, str):
        _fail("type_error", f"expected a string, got {type(x).__name__}", path, pid)
    return x


def _real_list(x: Any, path: str, pid: str | None) -> list[float]:
    if not isinstance(x, list):
        _fail("type_error", f"expected a list, got {type(x).__name__}", path, pid)
    return [_real(v, f"{path}[{i}]", pid) for i, v in enumerate(x)]


def _logprob_list(x: Any, path: str, pid: str | None) -> Optional[list[float]]:
    if x is None:
        return None
    vals = _real_list(x, path, pid)
    if not vals:
        _fail("empty_logprobs", "token log-probability list must be nonempty", path, pid)
    for i, v in enumerate(vals):
        if v > 0:
            _fail("logprob_positive", f"logprob > 0 ({v})", f"{path}[{i}]", pid)
    return vals


def _parse_sample(obj: Any, path: str, pid: str | None, expected_source: str | None) -> ResponseSample:
    if not isinstance(obj, dict):
        _fail("type_error", "sample must be an object", path, pid)
    for key in _SAMPLE_REQUIRED:
        if key not in obj:
            _fail("missing_field", f"missing required field {key!r}", f"{path}.{key}", pid)
    text = _string(obj["text"], f"{path}.text", pid)
    reward = obj["reward"]
    if not _is_number(reward) or reward not in (0, 1):
        _fail("reward_range", f"reward outside {{0,1}}: {reward!r}", f"{path}.reward", pid)
    source = obj["source"]
    if source not in SOURCES:
        _fail("source_invalid", f"source must be one of {SOURCES}, got {source!r}", f"{path}.source", pid)
    if expected_source is not None and source != expected_source:
        _fail("source_mismatch", f"sample in samples_{expected_source} has source {source!r}",
              f"{path}.source", pid)
    lp_ft = _logprob_list(obj["token_logprobs_ft"], f"{path}.token_logprobs_ft", pid)
    lp_ref = _logprob_list(obj["token_logprobs_ref"], f"{path}.token_logprobs_ref", pid)
    if (lp_ft is None) != (lp_ref is None):
        _fail("logprob_partial", "logprob arrays must be both present or both null",
              f"{path}.token_logprobs_ref", pid)
    if lp_ft is not None and len(lp_ft) != len(lp_ref):
        _fail("length_mismatch",
              f"array-length mismatch: token_logprobs_ft has {len(lp_ft)}, "
              f"token_logprobs_ref has {len(lp_ref)}", f"{path}.token_logprobs_ref", pid)
    ents: dict[str, Optional[list[float]]] = {}
    for key in _SAMPLE_OPTIONAL:
        raw = obj.get(key)
        if raw is None:
            ents[key] = None
            continue
        vals = _real_list(raw, f"{path}.{key}", pid)
        for i, v in enumerate(vals):
            if v < 0:
                _fail("entropy_negative", f"entropy < 0 ({v})", f"{path}.{key}[{i}]", pid)
        if lp_ft is None or len(vals) != len(lp_ft):
            _fail("entropy_length", f"{key} length does not match token log-probabilities",
                  f"{path}.{key}", pid)
        ents[key] = vals
    extras = {k: v for k, v in obj.items() if k not in _SAMPLE_REQUIRED and k not in _SAMPLE_OPTIONAL}
    return ResponseSample(text=text, reward=int(reward), token_logprobs_ft=lp_ft,
                          token_logprobs_ref=lp_ref, source=source,
                          token_entropies_ft=ents["token_entropies_ft"],
                          token_entropies_ref=ents["token_entropies_ref"], extras=extras)


def _parse_neighbor(obj: Any, path: str, pid: str | None) -> Neighbor:
    if not isinstance(obj, dict):
        _fail("type_error", "neighbor must be an object", path, pid)
    for key in ("text", "seq_logprob_ft"):
        if key not in obj:
            _fail("missing_field", f"missing required field {key!r}", f"{path}.{key}", pid)
    ref = obj.get("seq_logprob_ref")
    return Neighbor(
        text=_string(obj["text"], f"{path}.text", pid),
        seq_logprob_ft=_real(obj["seq_logprob_ft"], f"{path}.seq_logprob_ft", pid),
        seq_logprob_ref=None if ref is None else _real(ref, f"{path}.seq_logprob_ref", pid),
        extras={k: v for k, v in obj.items() if k not in ("text", "seq_logprob_ft", "seq_logprob_ref")},
    )


def trace_from_dict(obj: Any) -> PromptTrace:
    """Validate a decoded JSON object and build a :class:`PromptTrace`."""
    if not isinstance(obj, dict):
        _fail("type_error", "record must be a JSON object", "", None)
    pid_raw = obj.get("prompt_id")
    pid = pid_raw if isinstance(pid_raw, str) else None
    for key in _RECORD_REQUIRED:
        if key not in obj:
            _fail("missing_field", f"missing required field {key!r}", key, pid)
    pid = _string(obj["prompt_id"], "prompt_id", None)
    if not pid:
        _fail("empty_id", "prompt_id must be a nonempty string", "prompt_id", pid)
    prompt_text = _string(obj["prompt_text"], "prompt_text", pid)
    label = obj["label"]
    if label not in LABELS:
        _fail("label_invalid", f"label must be one of {LABELS}, got {label!r}", "label", pid)
    groups = {}
    for src in SOURCES:
        key = f"samples_{src}"
        raw = obj[key]
        if not isinstance(raw, list):
            _fail("type_error", f"{key} must be a list", key, pid)
        groups[src] = [_parse_sample(s, f"{key}[{i}]", pid, src) for i, s in enumerate(raw)]
    ref_ans = obj.get("reference_answer")
    if ref_ans is not None:
        ref_ans = _parse_sample(ref_ans, "reference_answer", pid, None)
    neigh = obj.get("neighbors")
    if neigh is not None:
        if not isinstance(neigh, list):
            _fail("type_error", "neighbors must be a list", "neighbors", pid)
        neigh = [_parse_neighbor(n, f"neighbors[{i}]", pid) for i, n in enumerate(neigh)]
    seq = {}
    for key in ("prompt_seq_logprob_ft", "prompt_seq_logprob_ref"):
        raw = obj.get(key)
        seq[key] = None if raw is None else _real(raw, key, pid)
    extras = {k: v for k, v in obj.items() if k not in _RECORD_REQUIRED and k not in _RECORD_OPTIONAL}
    return PromptTrace(prompt_id=pid, prompt_text=prompt_text, label=label,
                       samples_ft=groups["ft"], samples_ref=groups["ref"],
                       reference_answer=ref_ans, neighbors=neigh, extras=extras, **seq)


def parse_trace_line(line: str) -> PromptTrace:
    """Parse and validate one JSONL record.

    Raises:
        TraceValidationError: with a distinct ``code`` per violated invariant.
    """
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise TraceValidationError("malformed_json", f"malformed JSON: {exc.msg}") from exc
    return trace_from_dict(obj)


# ---------------------------------------------------------------------------
# serialization


def sample_to_dict(s: ResponseSample) -> dict[str, Any]:
    out: dict[str, Any] = {
        "text": s.text,
        "reward": s.reward,
        "token_logprobs_ft": s.token_logprobs_ft,
        "token_logprobs_ref": s.token_logprobs_ref,
        "source": s.source,
    }
    if s.token_entropies_ft is not None:
        out["token_entropies_ft"] = s.token_entropies_ft
    if s.token_entropies_ref is not None:
        out["token_entropies_ref"] = s.token_entropies_ref
    for k in sorted(s.extras):
        out[k] = s.extras[k]
    return out


def trace_to_dict(t: PromptTrace) -> dict[str, Any]:
    out: dict[str, Any] = {
        "prompt_id": t.prompt_id,
        "prompt_text": t.prompt_text,
        "label": t.label,
        "samples_ft": [sample_to_dict(s) for s in t.samples_ft],
        "samples_ref": [sample_to_dict(s) for s in t.samples_ref],
    }
    if t.reference_answer is not None:
        out["reference_answer"] = sample_to_dict(t.reference_answer)
    if t.neighbors is not None:
        out["neighbors"] = []
        for n in t.neighbors:
            nd: dict[str, Any] = {"text": n.text, "seq_logprob_ft": n.seq_logprob_ft}
            if n.seq_logprob_ref is not None:
                nd["seq_logprob_ref"] = n.seq_logprob_ref
            nd.update({k: n.extras[k] for k in sorted(n.extras)})
            out["neighbors"].append(nd)
    if t.prompt_seq_logprob_ft is not None:
        out["prompt_seq_logprob_ft"] = t.prompt_seq_logprob_ft
    if t.prompt_seq_logprob_ref is not None:
        out["prompt_seq_logprob_ref"] = t.prompt_seq_logprob_ref
    for k in sorted(t.extras):
        out[k] = t.extras[k]
    return out


def serialize_trace(t: PromptTrace) -> str:
    """One JSONL line (no trailing newline) with deterministic field order."""
    return json.dumps(trace_to_dict(t), ensure_ascii=False, allow_nan=False)


def meta_to_dict(m: TraceMeta) -> dict[str, Any]:
    out = {"generator": m.generator, "n_samples": m.n_samples, "temperature": m.temperature,
           "seed": m.seed, "notes": m.notes}
    for k in sorted(m.extras):
        out[k] = m.extras[k]
    return out


def _parse_meta(obj: Any) -> TraceMeta:
    if not isinstance(obj, dict):
        raise TraceValidationError("type_error", "_meta must be an object", path="_meta")
    kw = {}
    for key, conv in (("generator", str), ("n_samples", int), ("temperature", float),
                      ("seed", int), ("notes", str)):
        if key in obj and obj[key] is not None:
            try:
                kw[key] = conv(obj[key])
            except (TypeError, ValueError) as exc:
                raise TraceValidationError("type_error", f"bad metadata value: {exc}",
                                           path=f"_meta.{key}") from exc
    return TraceMeta(extras={k: v for k, v in obj.items() if k not in _META_KEYS}, **kw)


# ---------------------------------------------------------------------------
# file I/O


def parse_trace_lines(lines: Iterable[str]) -> TraceSet:
    """Build a :class:`TraceSet` from JSONL lines, aggregating line errors."""
    meta = TraceMeta()
    records: list[PromptTrace] = []
    errors: list[TraceValidationError] = []
    first = True
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            if first:
                first = False
                try:
                    probe = json.loads(line)
                except json.JSONDecodeError:
                    probe = None
                if isinstance(probe, dict) and "_meta" in probe:
                    meta = _parse_meta(probe["_meta"])
                    continue
            records.append(parse_trace_line(line))
        except TraceValidationError as exc:
            exc.line = lineno
            errors.append(exc)
    if errors:
        detail = "; ".join(str(e) for e in errors[:10])
        more = f" (+{len(errors) - 10} more)" if len(errors) > 10 else ""
        raise TraceSetError("invalid_lines", f"{len(errors)} invalid line(s): {detail}{more}", errors)
    if not records:
        raise TraceSetError("no_records", "no records")
    return TraceSet(records=records, metadata=meta)


def load_trace_set(path: str | Path) -> TraceSet:
    """Load and validate a JSONL trace file.

    Raises:
        TraceIOError: the file cannot be read.
        TraceSetError: invalid lines (aggregated), duplicate ids, or no records.
    """
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.readlines()
    except (OSError, UnicodeDecodeError) as exc:
        raise TraceIOError(f"cannot read {path}: {exc}") from exc
    return parse_trace_lines(lines)


def dumps_trace_set(ts: TraceSet) -> str:
    if not ts.records:
        raise TraceSetError("no_records", "refusing to write an empty trace set")
    lines = [json.dumps({"_meta": meta_to_dict(ts.metadata)}, ensure_ascii=False, allow_nan=False)]
    lines.extend(serialize_trace(r) for r in ts.records)
    return "\n".join(lines) + "\n"


def write_trace_set(ts: TraceSet, path: str | Path) -> None:
    """Write ``ts`` as UTF-8 JSONL with a leading metadata line."""
    text = dumps_trace_set(ts)
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
    except OSError as exc:
        raise TraceIOError(f"cannot write {path}: {exc}") from exc
