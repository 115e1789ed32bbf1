import copy
import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from diba.traces import (PromptTrace, ResponseSample, TraceMeta, TraceSet, TraceSetError,
                         TraceValidationError, dumps_trace_set, load_trace_set, parse_trace_line,
                         parse_trace_lines, serialize_trace, trace_from_dict, trace_to_dict,
                         write_trace_set)

from conftest import minimal_record


def test_minimal_round_trip(record):
    t = parse_trace_line(json.dumps(record))
    assert json.loads(serialize_trace(t)) == record
    assert parse_trace_line(serialize_trace(t)) == t


def test_key_order_is_normalized(record):
    shuffled = dict(reversed(list(record.items())))
    assert serialize_trace(parse_trace_line(json.dumps(shuffled))) == \
        serialize_trace(parse_trace_line(json.dumps(record)))


def test_length_mismatch(record):
    record["samples_ft"][0]["token_logprobs_ft"] = [-0.1, -0.2, -0.3]
    with pytest.raises(TraceValidationError, match="array-length mismatch") as ei:
        parse_trace_line(json.dumps(record))
    assert ei.value.code == "length_mismatch"
    assert ei.value.prompt_id == "p1"
    assert ei.value.path == "samples_ft[0].token_logprobs_ref"


def test_reward_outside_range(record):
    record["samples_ft"][0]["reward"] = 2
    with pytest.raises(TraceValidationError, match=r"reward outside \{0,1\}") as ei:
        parse_trace_line(json.dumps(record))
    assert ei.value.code == "reward_range"


def test_malformed_json():
    with pytest.raises(TraceValidationError) as ei:
        parse_trace_line("{not json")
    assert ei.value.code == "malformed_json"


def _set(rec, path, value):
    *head, last = path
    for k in head:
        rec = rec[k]
    if value is _DELETE:
        del rec[last]
    else:
        rec[last] = value


_DELETE = object()

# one mutation per invariant; every code must be distinct
MUTATIONS = [
    (("prompt_id",), _DELETE, "missing_field"),
    (("prompt_id",), "", "empty_id"),
    (("label",), "maybe", "label_invalid"),
    (("samples_ft", 0, "reward"), 2, "reward_range"),
    (("samples_ft", 0, "token_logprobs_ft"), [0.1, -0.2], "logprob_positive"),
    (("samples_ft", 0, "token_logprobs_ref"), [-0.3], "length_mismatch"),
    (("samples_ft", 0, "token_logprobs_ft"), [], "empty_logprobs"),
    (("samples_ft", 0, "token_logprobs_ft"), None, "logprob_partial"),
    (("samples_ft", 0, "source"), "ref", "source_mismatch"),
    (("samples_ft", 0, "source"), "gpt", "source_invalid"),
    (("samples_ft", 0, "token_entropies_ft"), [-1.0, 0.5], "entropy_negative"),
    (("samples_ft", 0, "token_entropies_ft"), [0.5], "entropy_length"),
    (("samples_ft", 0, "token_logprobs_ft"), ["a", -0.2], "type_error"),
    (("prompt_seq_logprob_ft",), float("inf"), "non_finite"),
]


@pytest.mark.parametrize("path,value,code", MUTATIONS)
def test_each_invariant_has_distinct_code(record, path, value, code):
    _set(record, path, value)
    with pytest.raises(TraceValidationError) as ei:
        trace_from_dict(record)
    assert ei.value.code == code


def test_mutation_codes_are_distinct():
    codes = [m[2] for m in MUTATIONS]
    assert len(codes) == len(set(codes))


def test_unknown_fields_preserved(record):
    record["custom"] = {"a": 1}
    record["samples_ft"][0]["tag"] = "x"
    t = parse_trace_line(json.dumps(record))
    assert t.extras == {"custom": {"a": 1}}
    assert t.samples_ft[0].extras == {"tag": "x"}
    assert json.loads(serialize_trace(t)) == record


def test_null_logprobs_allowed(record):
    record["samples_ft"][0]["token_logprobs_ft"] = None
    record["samples_ft"][0]["token_logprobs_ref"] = None
    t = parse_trace_line(json.dumps(record))
    assert not t.samples_ft[0].has_logprobs


def _write_lines(tmp_path, lines):
    p = tmp_path / "t.jsonl"
    p.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return p


def test_load_meta_plus_three(tmp_path):
    meta = json.dumps({"_meta": {"generator": "g", "n_samples": 1, "temperature": 0.5,
                                 "seed": 3, "notes": ""}})
    recs = [json.dumps(minimal_record(prompt_id=f"p{i}", label=lab))
            for i, lab in enumerate(["member", "nonmember", "unknown"])]
    ts = load_trace_set(_write_lines(tmp_path, [meta, *recs]))
    assert len(ts) == 3
    assert ts.metadata.seed == 3 and ts.metadata.generator == "g"
    assert ts.label_counts == {"member": 1, "nonmember": 1, "unknown": 1}


def test_duplicate_id_named(tmp_path):
    p = _write_lines(tmp_path, [json.dumps(minimal_record())] * 2)
    with pytest.raises(TraceSetError, match="p1") as ei:
        load_trace_set(p)
    assert ei.value.code == "duplicate_id"


def test_empty_file(tmp_path):
    p = tmp_path / "e.jsonl"
    p.write_text("", encoding="utf-8")
    with pytest.raises(TraceSetError, match="no records"):
        load_trace_set(p)


def test_line_errors_aggregated(tmp_path):
    bad = minimal_record(prompt_id="p2")
    bad["samples_ft"][0]["reward"] = 5
    p = _write_lines(tmp_path, [json.dumps(minimal_record()), json.dumps(bad), "{oops"])
    with pytest.raises(TraceSetError) as ei:
        load_trace_set(p)
    assert [e.line for e in ei.value.errors] == [2, 3]
    assert ei.value.errors[0].prompt_id == "p2"


def test_refuse_empty_write(tmp_path):
    with pytest.raises(TraceSetError):
        write_trace_set(TraceSet([], TraceMeta()), tmp_path / "x.jsonl")


def test_unicode_round_trip(tmp_path):
    t = trace_from_dict(minimal_record(prompt_text="Größe von π · 数学"))
    ts = TraceSet([t], TraceMeta(generator="ü"))
    p = tmp_path / "u.jsonl"
    write_trace_set(ts, p)
    raw = p.read_bytes()
    assert "数学".encode("utf-8") in raw
    assert load_trace_set(p) == ts


_logprob = st.floats(min_value=-50, max_value=0, allow_nan=False)


@st.composite
def samples(draw, source):
    n = draw(st.integers(1, 6))
    has_ent = draw(st.booleans())
    return ResponseSample(
        text=draw(st.text(max_size=20)),
        reward=draw(st.integers(0, 1)),
        token_logprobs_ft=draw(st.lists(_logprob, min_size=n, max_size=n)),
        token_logprobs_ref=draw(st.lists(_logprob, min_size=n, max_size=n)),
        source=source,
        token_entropies_ft=draw(st.lists(st.floats(0, 5), min_size=n, max_size=n)) if has_ent else None,
    )


@st.composite
def traces(draw):
    return PromptTrace(
        prompt_id=draw(st.text(min_size=1, max_size=8)),
        prompt_text=draw(st.text(max_size=30)),
        label=draw(st.sampled_from(["member", "nonmember", "unknown"])),
        samples_ft=draw(st.lists(samples("ft"), max_size=3)),
        samples_ref=draw(st.lists(samples("ref"), max_size=3)),
        prompt_seq_logprob_ft=draw(st.one_of(st.none(), _logprob)),
    )


@settings(max_examples=60, deadline=None)
@given(traces())
def test_round_trip_property(t):
    assert parse_trace_line(serialize_trace(t)) == t


@settings(max_examples=25, deadline=None)
@given(st.lists(traces(), min_size=1, max_size=4, unique_by=lambda t: t.prompt_id))
def test_set_round_trip_property(recs):
    ts = TraceSet(recs, TraceMeta(generator="h", n_samples=2, temperature=0.5, seed=1))
    text = dumps_trace_set(ts)
    assert parse_trace_lines(text.split("\n")) == ts
    assert dumps_trace_set(parse_trace_lines(text.split("\n"))) == text


def test_trace_to_dict_deep_copy_safe(record):
    t = trace_from_dict(copy.deepcopy(record))
    d = trace_to_dict(t)
    d["samples_ft"][0]["text"] = "changed"
    assert t.samples_ft[0].text == "four"
