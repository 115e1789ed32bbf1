"""Toy RLVR simulator: world, sampling, objectives and training."""

import math
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import SMALL
from diba.features import extract_matrix
from diba.pipeline import run_attack
from diba.sim import (
    STOP,
    SimConfig,
    SimConfigError,
    _sample_tokens,
    build_rollout,
    emit_traces,
    gradient_coefficient,
    group_advantages,
    history_csv,
    init_sim,
    load_state,
    next_token_distribution,
    overlong_penalty,
    render,
    score_tokens,
    sample_group,
    surrogate_gradient,
    token_coefficients,
    tokenize,
    train,
    train_step,
    verifier,
    verify_tokens,
)
from diba.sim import apply_update, save_state
from diba.traces import ResponseSample, parse_trace_lines, dumps_trace_set
from oracles import fd_gradient_check


def _pop_stats(r):
    n = len(r)
    mu = sum(r) / n
    sd = math.sqrt(sum((x - mu) ** 2 for x in r) / n)
    return mu, sd


@pytest.fixture(scope="module")
def world():
    return init_sim(SimConfig(**SMALL))


# --- advantages and coefficients -------------------------------------------

def test_advantages_examples():
    assert group_advantages([1, 1, 0, 0]).tolist() == [1, 1, -1, -1]
    assert group_advantages([1, 1, 1, 1]).tolist() == [0, 0, 0, 0]
    r = [1, 0, 0, 0]
    mu, sd = _pop_stats(r)
    want = [(x - mu) / sd for x in r]
    assert group_advantages(r) == pytest.approx(want, abs=1e-12)
    assert want[0] == pytest.approx(math.sqrt(3), abs=1e-12)


def test_advantages_empty():
    with pytest.raises(ValueError):
        group_advantages([])


@given(st.lists(st.integers(0, 1), min_size=1, max_size=32))
def test_advantages_centered_unit_scale(r):
    a = group_advantages(r)
    assert abs(a.sum()) < 1e-9
    if len(set(r)) > 1:
        assert np.mean(a ** 2) == pytest.approx(1.0, abs=1e-9)
    else:
        assert np.all(a == 0)


def test_gradient_coefficient_examples():
    assert gradient_coefficient(1.5, 7.0, 0.0) == 1.5
    assert gradient_coefficient(-0.3, 1.0, 0.001) == -0.3
    assert gradient_coefficient(0.5, 2.0, 0.1) == pytest.approx(0.6, abs=1e-15)
    with pytest.raises(ValueError):
        gradient_coefficient(1.0, 0.0, 0.1)


def test_overlong_penalty_ramp():
    assert overlong_penalty([4, 6, 7, 8], 6, 8).tolist() == [0, 0, -0.5, -1]
    assert overlong_penalty([8], 8, 8).tolist() == [0]


# --- verifier and text -------------------------------------------------------

def test_verify_tokens_cases():
    assert verify_tokens([5, STOP], 5) == 1
    assert verify_tokens([4, STOP], 5) == 0
    assert verify_tokens([3, 2, 5], 5) == 1  # truncated, still verified
    assert verify_tokens([STOP], 5) == 0


def test_verifier_on_samples(world):
    V = world.config.vocab_size
    a = int(world.answers[3])
    other = 1 + a % (V - 1)

    def smp(toks):
        return ResponseSample(text=render(toks, V), reward=0, token_logprobs_ft=None,
                              token_logprobs_ref=None, source="ft")
    assert verifier(smp([a, STOP]), world.prompt_id(3), world) == 1
    assert verifier(smp([other, STOP]), world.prompt_id(3), world) == 0
    assert verifier(smp([other] * (world.config.max_len - 1) + [a]), 3, world) == 1


@given(st.lists(st.integers(1, 15), min_size=1, max_size=7))
def test_render_tokenize_roundtrip(toks):
    assert tokenize(render(toks + [STOP], 16), 16, 8) == toks + [STOP]


# --- init ---------------------------------------------------------------------

def test_member_count_exact():
    st_ = init_sim(SimConfig(n_prompts=100, n_skills=10, member_fraction=0.5))
    assert int(st_.labels.sum()) == 50


def test_init_deterministic():
    a = init_sim(SimConfig(**SMALL))
    b = init_sim(SimConfig(**SMALL))
    assert a.policy.digest() == b.policy.digest()
    assert np.array_equal(a.answers, b.answers) and np.array_equal(a.labels, b.labels)
    assert np.array_equal(a.prompt_tokens, b.prompt_tokens)


def test_base_accuracy_spread():
    # Monte Carlo base accuracy per prompt at the default world size
    cfg = SimConfig()
    st_ = init_sim(cfg)
    G = 64
    rows = np.repeat(np.arange(cfg.n_prompts), G)
    U = np.random.default_rng(0).random((rows.size, cfg.max_len))
    toks = _sample_tokens(st_.ref_policy, rows, cfg.vocab_size, cfg.max_len, 0.5, U)
    last = np.array([[t for t in row if t > STOP][-1:] or [-1] for row in toks])[:, 0]
    acc = (last == st_.answers[rows]).reshape(-1, G).mean(axis=1)
    assert acc.min() < 0.2 and acc.max() > 0.8


def test_config_validation_and_json(tmp_path):
    with pytest.raises(SimConfigError):
        SimConfig(vocab_size=2).validate()
    with pytest.raises(SimConfigError):
        SimConfig(clip_low=0.3, clip_high=0.2).validate()
    with pytest.raises(SimConfigError, match="unknown"):
        SimConfig.from_dict({"bogus": 1})
    cfg = SimConfig(algo="dapo", seed=4)
    assert cfg.effective_beta == 0.0 and cfg.effective_clip_high == 0.28
    assert SimConfig().effective_beta == 0.001
    cfg.to_json(tmp_path / "c.json")
    assert SimConfig.from_json(tmp_path / "c.json") == cfg


# --- sampling -----------------------------------------------------------------

def test_greedy_group_identical(world):
    g = sample_group(world, 5, 6, temperature=0.5, greedy=True)
    assert len({s.text for s in g}) == 1


def test_distribution_normalized(world):
    for pos in range(world.config.max_len):
        for prev in (0, 3):
            p = next_token_distribution(world, 7, pos, prev, temperature=0.7)
            assert abs(p.sum() - 1.0) <= 1e-12


def test_token_frequencies_match_softmax(world):
    cfg = world.config
    n, T = 100_000, 0.5
    rows = np.full(n, 11)
    U = np.random.default_rng(1).random((n, cfg.max_len))
    toks = _sample_tokens(world.policy, rows, cfg.vocab_size, cfg.max_len, T, U)
    # exact softmax recomputed from raw logits
    lg = world.policy.shared_logits[world.policy.skill_of[11], 0, 0] + world.policy.prompt_logits[11, 0, 0]
    z = np.exp((lg - lg.max()) / T)
    p = z / z.sum()
    counts = np.bincount(toks[:, 0], minlength=cfg.vocab_size)
    sigma = np.sqrt(n * p * (1 - p))
    assert np.all(np.abs(counts - n * p) <= 3 * sigma + 1e-9)


def test_sample_logprobs_untempered(world):
    s = sample_group(world, 2, 1, temperature=0.3, rng=np.random.default_rng(0))[0]
    toks = tokenize(s.text, world.config.vocab_size, world.config.max_len)
    prev, total = 0, 0.0
    for pos, t in enumerate(toks):
        total += math.log(next_token_distribution(world, 2, pos, prev, temperature=1.0)[t])
        prev = t
    assert sum(s.token_logprobs_ft) == pytest.approx(total, abs=1e-10)
    assert s.reward == verifier(s, 2, world)


def test_sample_group_errors(world):
    with pytest.raises(ValueError):
        sample_group(world, 0, 2, temperature=0.0)
    with pytest.raises(KeyError):
        sample_group(world, "p99999", 2, temperature=1.0)


# --- objectives and training --------------------------------------------------

def _forced_batch(state, correct: bool):
    cfg = state.config
    G = cfg.group_size
    p = int(state.member_idx[0])
    a = int(state.answers[p])
    tok = a if correct else 1 + a % (cfg.vocab_size - 1)
    toks = np.full((G, cfg.max_len), -1, dtype=np.int64)
    toks[:, 0], toks[:, 1] = tok, STOP
    return build_rollout(state, toks, np.full(G, p), G)


@pytest.mark.parametrize("correct", [True, False])
def test_uniform_group_zero_gradient_grpo(correct):
    st_ = init_sim(SimConfig(n_prompts=20, n_skills=2, beta=0.0))
    gs, gp = surrogate_gradient(st_, _forced_batch(st_, correct))
    assert not gs.any() and not gp.any()


def test_uniform_group_excluded_dapo():
    st_ = init_sim(SimConfig(n_prompts=20, n_skills=2, algo="dapo"))
    b = _forced_batch(st_, True)
    assert b.n_groups_used == 0 and not b.weights.any()
    gs, gp = surrogate_gradient(st_, b)
    assert not gs.any() and not gp.any()


def test_dapo_empty_batch_warns_and_skips():
    st_ = init_sim(SimConfig(n_prompts=20, n_skills=2, algo="dapo",
                             difficulty_low=-60.0, difficulty_high=-60.0))
    before = st_.policy.digest()
    with pytest.warns(RuntimeWarning, match="no update"):
        stats = train_step(st_)
    assert stats.warning == "empty_batch" and stats.n_groups_used == 0
    assert st_.policy.digest() == before


def test_gradient_matches_finite_differences():
    assert fd_gradient_check().max() < 1e-4


def test_gradient_matches_finite_differences_dapo():
    assert fd_gradient_check(seed=2, algo="dapo", beta=0.0).max() < 1e-4


def test_clipped_factor_bounded():
    st_ = init_sim(SimConfig(**SMALL))
    cfg = st_.config
    G = cfg.group_size
    mem = st_.member_idx
    rows = np.repeat(mem, G)
    U = np.random.default_rng(0).random((rows.size, cfg.max_len))
    toks = _sample_tokens(st_.policy, rows, cfg.vocab_size, cfg.max_len, 1.0, U)
    batch = build_rollout(st_, toks, rows, G)
    for _ in range(3):
        apply_update(st_, *surrogate_gradient(st_, batch))
    _, adv = token_coefficients(st_, batch)
    lo, hi = 1 - cfg.clip_low, 1 + cfg.effective_clip_high
    A = np.broadcast_to(batch.advantages[:, None], adv.shape)
    pos = A > 0
    # positive advantages: factor capped at (1 + eps_high) |A|
    assert np.all(np.abs(adv[pos]) <= (batch.weights * hi * A)[pos] * (1 + 1e-12))
    # negative advantages: no push once the ratio fell below 1 - eps_low
    rho = np.exp(score_tokens(st_.policy, batch.rows, batch.toks) - batch.old_lp)
    neg_low = (A < 0) & (rho < lo) & batch.mask
    assert neg_low.any() and not adv[neg_low].any()
    _, unclipped = token_coefficients(st_, batch, clip=False)
    assert np.any(np.abs(unclipped[pos]) > (batch.weights * hi * A)[pos])


def test_training_history_and_ref_immutable(small_run):
    state, _ = small_run
    assert len(state.history) == SMALL["epochs"]
    assert init_sim(state.config).ref_policy.digest() == state.ref_policy.digest()
    assert [h.epoch for h in state.history] == list(range(1, SMALL["epochs"] + 1))
    lines = history_csv(state).splitlines()
    assert lines[0] == "epoch,train_reward,test_reward,mean_abs_param_delta"
    assert len(lines) == SMALL["epochs"] + 1


def test_train_reward_trend(small_run):
    state, _ = small_run
    r = np.array([h.train_reward for h in state.history])
    smooth = np.convolve(r, np.ones(3) / 3, mode="valid")
    assert np.all(np.diff(smooth) >= -0.05)


def test_emitted_traces_valid_and_labeled(small_run):
    state, traces = small_run
    ts = traces[SMALL["epochs"]]
    back = parse_trace_lines(dumps_trace_set(ts).splitlines())
    assert len(back.records) == SMALL["n_prompts"]
    n_mem = sum(r.label == "member" for r in back.records)
    assert n_mem == int(state.labels.sum()) == SMALL["n_prompts"] // 2
    assert all(len(r.samples_ft) == 8 and len(r.samples_ref) == 8 for r in back.records)
    assert back.metadata.temperature == 0.5 and back.metadata.n_samples == 8


def test_trained_member_divergence_positive(small_run):
    state, traces = small_run
    fm = extract_matrix(traces[SMALL["epochs"]])
    div = fm.columns(["divergence"])[:, 0]
    assert np.all(div[fm.y == 1] > 0)


def test_untrained_traces_identity(small_run):
    _, traces = small_run
    fm = extract_matrix(traces[0])
    assert np.all(fm.columns(["divergence", "likelihood", "zlib"]) == 0)


def test_emit_deterministic(small_run):
    state, traces = small_run
    assert dumps_trace_set(emit_traces(state)) == dumps_trace_set(traces[SMALL["epochs"]])


def test_emit_errors(world):
    with pytest.raises(ValueError):
        emit_traces(world, N=0)


def test_state_roundtrip(small_run, tmp_path):
    state, traces = small_run
    save_state(state, tmp_path / "s.npz")
    back = load_state(tmp_path / "s.npz")
    assert back.policy.digest() == state.policy.digest()
    assert back.ref_policy.digest() == state.ref_policy.digest()
    assert back.history == state.history
    assert dumps_trace_set(emit_traces(back)) == dumps_trace_set(traces[SMALL["epochs"]])


def test_dp_decode_keeps_logprobs_clean():
    cfg = SimConfig(**{**SMALL, "epochs": 0, "dp_decode_strength": 0.1})
    st_ = init_sim(cfg)
    s = sample_group(st_, 0, 3, temperature=0.5, rng=np.random.default_rng(0))
    clean = init_sim(SimConfig(**{**SMALL, "epochs": 0}))
    for smp in s:
        toks = tokenize(smp.text, 16, 8)
        prev, total = 0, 0.0
        for pos, t in enumerate(toks):
            total += math.log(next_token_distribution(clean, 0, pos, prev)[t])
            prev = t
        assert sum(smp.token_logprobs_ft) == pytest.approx(total, abs=1e-10)


# --- directional training properties ------------------------------------------

def _run(**over):
    st_ = init_sim(SimConfig(**{**SMALL, **over}))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        train(st_)
    return st_


@pytest.fixture(scope="module")
def strong_kl():
    return _run(beta=10.0, lr_shared=2.0, lr_prompt=0.3)


def test_strong_kl_limits_drift(strong_kl):
    weak = _run(epochs=1, beta=0.001)
    assert strong_kl.history[-1].mean_abs_param_delta < 10 * weak.history[-1].mean_abs_param_delta


@pytest.mark.xfail(strict=True, reason="noise-free simulator: any member-specific drift stays rank-detectable")
def test_strong_kl_attack_near_chance(strong_kl):
    r = run_attack(extract_matrix(emit_traces(strong_kl)), n_trees=50)
    assert 0.45 <= r.auc <= 0.6


def test_generalization_knob():
    lo = _run(lr_shared=20.0, lr_prompt=3.0)
    hi = _run(lr_shared=40.0, lr_prompt=3.0)
    assert hi.history[-1].test_reward > lo.history[-1].test_reward
    auc_lo = run_attack(extract_matrix(emit_traces(lo)), n_trees=50).auc
    auc_hi = run_attack(extract_matrix(emit_traces(hi)), n_trees=50).auc
    assert auc_hi <= auc_lo
