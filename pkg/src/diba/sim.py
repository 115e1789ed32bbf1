"""Toy RLVR world: tabular softmax policies trained with GRPO or DAPO.

Each prompt ``p`` belongs to a skill ``s(p)``. The next-token logits at
position ``pos`` after previous token ``prev`` are::

    theta[p, pos, prev, :] = shared[s(p), pos, prev, :] + prompt[p, pos, prev, :]

Token 0 is the stop token; the first position sees ``prev = 0``. A response is
correct when its last non-stop token equals the prompt's answer token.

Shared parameters carry improvements to held-out prompts of the same skill;
prompt parameters carry prompt-specific (membership) signal. The ratio
``lr_shared : lr_prompt`` sets the train/test reward gap.

All sampling inside training and emission draws from per-prompt RNG streams
keyed by ``(seed, purpose, epoch, prompt_index)``.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import re
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .traces import Neighbor, PromptTrace, ResponseSample, TraceMeta, TraceSet

# RNG stream purposes
_INIT, _ROLLOUT, _TEST, _EMIT_FT, _EMIT_REF, _DP_NOISE, _PROMPT, _GOLD, _ADHOC = range(9)

STOP = 0
STOP_TEXT = "."
_WORDS = (
    "alfa", "bravo", "charlie", "delta", "echo", "foxtrot", "golf", "hotel", "india",
    "juliett", "kilo", "lima", "mike", "november", "oscar", "papa", "quebec", "romeo",
    "sierra", "tango", "uniform", "victor", "whiskey", "xray", "yankee", "zulu",
)


class SimConfigError(ValueError):
    """Invalid simulator configuration."""


@dataclass
class SimConfig:
    """Simulator configuration. Defaults form the acceptance configuration.

    ``beta`` and ``clip_high`` default to the algorithm's convention when left
    as ``None`` (GRPO: 0.001 and 0.2, DAPO: 0 and 0.28).
    """

    vocab_size: int = 16
    max_len: int = 8
    n_prompts: int = 2000
    member_fraction: float = 0.5
    n_skills: int = 200
    group_size: int = 16
    epochs: int = 30
    lr_shared: float = 20.0
    lr_prompt: float = 3.0
    beta: Optional[float] = None
    algo: str = "grpo"
    clip_low: float = 0.2
    clip_high: Optional[float] = None
    minibatches_per_rollout: int = 2
    overlong_soft_limit: int = 6
    overlong_penalty: float = 1.0
    dp_decode_strength: float = 0.0
    train_temperature: float = 1.0
    seed: int = 0
    # world-generation knobs
    answer_coherence: float = 0.5
    style_strength: float = 4.0
    difficulty_low: float = -1.0
    difficulty_high: float = 6.0
    init_noise: float = 0.5
    prompt_noise_ratio: float = 0.3
    stop_bias: float = -2.0
    stop_slope: float = 1.0
    first_stop_logit: float = -6.0
    prompt_words: int = 6
    n_neighbors: int = 8

    @property
    def effective_beta(self) -> float:
        if self.beta is not None:
            return float(self.beta)
        return 0.0 if self.algo == "dapo" else 0.001

    @property
    def effective_clip_high(self) -> float:
        if self.clip_high is not None:
            return float(self.clip_high)
        return 0.28 if self.algo == "dapo" else self.clip_low

    def validate(self) -> "SimConfig":
        errs = []
        if self.vocab_size < 3:
            errs.append("vocab_size must be >= 3")
        if self.max_len < 2:
            errs.append("max_len must be >= 2")
        if not 0.0 < self.member_fraction < 1.0:
            errs.append("member_fraction must lie in (0, 1)")
        if self.n_prompts < 2:
            errs.append("n_prompts must be >= 2")
        if not 1 <= self.n_skills <= self.n_prompts:
            errs.append("n_skills must lie in [1, n_prompts]")
        if self.group_size < 1:
            errs.append("group_size must be >= 1")
        if self.epochs < 0:
            errs.append("epochs must be >= 0")
        if self.lr_shared < 0 or self.lr_prompt < 0:
            errs.append("learning rates must be >= 0")
        if self.algo not in ("grpo", "dapo"):
            errs.append("algo must be 'grpo' or 'dapo'")
        if self.effective_beta < 0:
            errs.append("beta must be >= 0")
        if not 0 <= self.clip_low <= self.effective_clip_high:
            errs.append("need 0 <= clip_low <= clip_high")
        if self.clip_low >= 1:
            errs.append("clip_low must be < 1")
        if self.minibatches_per_rollout < 1:
            errs.append("minibatches_per_rollout must be >= 1")
        if not 0 <= self.overlong_soft_limit <= self.max_len:
            errs.append("overlong_soft_limit must lie in [0, max_len]")
        if self.dp_decode_strength < 0:
            errs.append("dp_decode_strength must be >= 0")
        if self.train_temperature <= 0:
            errs.append("train_temperature must be > 0")
        if not 0 <= self.answer_coherence <= 1:
            errs.append("answer_coherence must lie in [0, 1]")
        if self.difficulty_low > self.difficulty_high:
            errs.append("difficulty_low must be <= difficulty_high")
        if errs:
            raise SimConfigError("; ".join(errs))
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise SimConfigError(f"unknown config keys: {unknown}")
        return cls(**d).validate()

    @classmethod
    def from_json(cls, path) -> "SimConfig":
        with open(path, "r", encoding="utf-8") as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise SimConfigError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise SimConfigError("config must be a JSON object")
        return cls.from_dict(data)

    def to_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


# ---------------------------------------------------------------------------
# policy


def log_softmax(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    z = x - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


@dataclass
class Policy:
    """Shared-plus-prompt tabular logits.

    Attributes:
        shared_logits: ``[skill, position, prev_token, vocab]``.
        prompt_logits: ``[prompt, position, prev_token, vocab]``.
        skill_of: Skill index of each prompt.
    """

    shared_logits: np.ndarray
    prompt_logits: np.ndarray
    skill_of: np.ndarray

    def copy(self) -> "Policy":
        return Policy(self.shared_logits.copy(), self.prompt_logits.copy(), self.skill_of.copy())

    def logits(self, rows: np.ndarray, pos: int, prev: np.ndarray) -> np.ndarray:
        return self.shared_logits[self.skill_of[rows], pos, prev] + self.prompt_logits[rows, pos, prev]

    def effective(self) -> np.ndarray:
        return self.shared_logits[self.skill_of] + self.prompt_logits

    def digest(self) -> str:
        h = hashlib.sha256()
        for a in (self.shared_logits, self.prompt_logits, self.skill_of):
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()


@dataclass
class EpochStats:
    epoch: int
    train_reward: float
    test_reward: float
    mean_abs_param_delta: float
    n_groups_used: int = 0
    warning: str = ""


@dataclass
class SimState:
    config: SimConfig
    policy: Policy
    ref_policy: Policy
    answers: np.ndarray
    labels: np.ndarray
    gold: np.ndarray
    prompt_tokens: np.ndarray
    prompt_lm: np.ndarray
    rng: np.random.Generator
    history: list[EpochStats] = field(default_factory=list)

    @property
    def epoch(self) -> int:
        return len(self.history)

    @property
    def n_prompts(self) -> int:
        return self.answers.size

    def prompt_id(self, p: int) -> str:
        return f"p{p:05d}"

    def prompt_index(self, prompt_id) -> int:
        if isinstance(prompt_id, (int, np.integer)):
            p = int(prompt_id)
        else:
            m = re.fullmatch(r"p(\d+)", str(prompt_id))
            if m is None:
                raise KeyError(f"unknown prompt_id {prompt_id!r}")
            p = int(m.group(1))
        if not 0 <= p < self.n_prompts:
            raise KeyError(f"unknown prompt_id {prompt_id!r}")
        return p

    def stream(self, purpose: int, epoch: int, p: int) -> np.random.Generator:
        return np.random.default_rng(np.random.SeedSequence([self.config.seed, purpose, epoch, p]))

    @property
    def member_idx(self) -> np.ndarray:
        return np.flatnonzero(self.labels)

    @property
    def nonmember_idx(self) -> np.ndarray:
        return np.flatnonzero(~self.labels)


def init_sim(config: SimConfig) -> SimState:
    """Build the toy world deterministically from ``config.seed``.

    Answer tokens are uniform over ``1..V-1`` marginally. With probability
    ``answer_coherence`` a prompt reuses its skill's canonical answer, which
    lets shared learning transfer to held-out prompts. A per-prompt difficulty
    bias on the answer token spreads base accuracies over (0, 1).
    """
    cfg = config.validate()
    V, L, P, S = cfg.vocab_size, cfg.max_len, cfg.n_prompts, cfg.n_skills
    r = np.random.default_rng(np.random.SeedSequence([cfg.seed, _INIT]))
    skill = np.arange(P) % S
    canon = r.integers(1, V, S)
    coherent = r.random(P) < cfg.answer_coherence
    answers = np.where(coherent, canon[skill], r.integers(1, V, P))
    n_mem = int(round(cfg.member_fraction * P))
    n_mem = min(max(n_mem, 1), P - 1)
    labels = np.zeros(P, dtype=bool)
    labels[r.permutation(P)[:n_mem]] = True

    shared = cfg.init_noise * r.standard_normal((S, L, V, V))
    style = r.integers(1, V, (S, L, V))
    np.put_along_axis(shared, style[..., None],
                      np.take_along_axis(shared, style[..., None], -1) + cfg.style_strength, -1)
    shared[..., STOP] = cfg.stop_bias + cfg.stop_slope * np.arange(L)[None, :, None]
    shared[:, 0, :, STOP] = cfg.first_stop_logit
    prompt = cfg.init_noise * cfg.prompt_noise_ratio * r.standard_normal((P, L, V, V))
    bias = r.uniform(cfg.difficulty_low, cfg.difficulty_high, P)
    prompt[np.arange(P), :, :, answers] += bias[:, None, None]

    gold = r.integers(1, V, (P, L))
    gold[:, L - 2] = answers
    gold[:, L - 1] = STOP

    # fixed per-skill unigram prompt model (prompt tokens are never trained)
    prompt_lm = log_softmax(2.0 * r.standard_normal((S, V - 1)))
    ptoks = np.empty((P, cfg.prompt_words), dtype=np.int64)
    for p in range(P):
        g = np.random.default_rng(np.random.SeedSequence([cfg.seed, _PROMPT, 0, p]))
        ptoks[p] = g.choice(V - 1, size=cfg.prompt_words, p=np.exp(prompt_lm[skill[p]]))

    pol = Policy(shared, prompt, skill)
    return SimState(config=cfg, policy=pol, ref_policy=pol.copy(), answers=answers, labels=labels,
                    gold=gold, prompt_tokens=ptoks, prompt_lm=prompt_lm,
                    rng=np.random.default_rng(np.random.SeedSequence([cfg.seed, _ADHOC])))


# ---------------------------------------------------------------------------
# tokens and text


def vocab_words(V: int) -> list[str]:
    """Surface form of each token id; id 0 renders as the stop symbol."""
    words = [STOP_TEXT]
    for i in range(1, V):
        words.append(_WORDS[i - 1] if i - 1 < len(_WORDS) else f"w{i}")
    return words


def render(tokens, V: int) -> str:
    words = vocab_words(V)
    return " ".join(words[t] for t in tokens if t >= 0)


def _levenshtein(a: str, b: str) -> int:
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def tokenize(text: str, V: int, max_len: int) -> list[int]:
    """Map text back to token ids.

    Alphanumeric runs map to the nearest vocabulary word by edit distance
    (lowest id on ties); ``.`` maps to stop. Output stops after the first stop
    token or ``max_len`` tokens.
    """
    words = vocab_words(V)
    lookup = {w: i for i, w in enumerate(words)}
    out: list[int] = []
    for piece in re.findall(r"[A-Za-z0-9]+|\.", text):
        if piece == STOP_TEXT:
            tok = STOP
        else:
            w = piece.lower()
            tok = lookup.get(w)
            if tok is None or tok == STOP:
                dists = [_levenshtein(w, words[i]) for i in range(1, V)]
                tok = 1 + int(np.argmin(dists))
        out.append(tok)
        if tok == STOP or len(out) == max_len:
            break
    return out


def verify_tokens(tokens, answer: int) -> int:
    """1 iff the last non-stop token equals ``answer``."""
    content = [t for t in tokens if t is not None and t > STOP]
    return int(bool(content) and content[-1] == answer)


def verifier(sample: ResponseSample, prompt_id, state: SimState) -> int:
    """Verifier outcome of a response for a prompt (pure)."""
    p = state.prompt_index(prompt_id)
    cfg = state.config
    return verify_tokens(tokenize(sample.text, cfg.vocab_size, cfg.max_len), int(state.answers[p]))


# ---------------------------------------------------------------------------
# sampling and scoring


def _sample_tokens(policy: Policy, rows: np.ndarray, V: int, L: int, temperature: float,
                   uniforms: Optional[np.ndarray], noise: Optional[np.ndarray] = None,
                   greedy: bool = False) -> np.ndarray:
    """Token matrix ``(n, L)`` padded with -1 after the stop token."""
    n = rows.size
    toks = np.full((n, L), -1, dtype=np.int64)
    prev = np.zeros(n, dtype=np.int64)
    alive = np.ones(n, dtype=bool)
    for pos in range(L):
        a = np.flatnonzero(alive)
        if a.size == 0:
            break
        lg = policy.logits(rows[a], pos, prev[a])
        if noise is not None:
            lg = lg + noise[a, pos]
        if greedy:
            t = np.argmax(lg, axis=-1)
        else:
            p = np.exp(log_softmax(lg / temperature))
            t = (np.cumsum(p, axis=-1) < uniforms[a, pos, None]).sum(axis=-1)
            t = np.minimum(t, V - 1)
        toks[a, pos] = t
        prev[a] = t
        alive[a] = t != STOP
    return toks


def score_tokens(policy: Policy, rows: np.ndarray, toks: np.ndarray,
                 entropies: bool = False):
    """Untempered per-token log-probabilities (and optional entropies), 0 on padding."""
    n, L = toks.shape
    lp = np.zeros((n, L))
    H = np.zeros((n, L)) if entropies else None
    prev = np.zeros(n, dtype=np.int64)
    for pos in range(L):
        a = np.flatnonzero(toks[:, pos] >= 0)
        if a.size == 0:
            break
        ls = log_softmax(policy.logits(rows[a], pos, prev[a]))
        lp[a, pos] = ls[np.arange(a.size), toks[a, pos]]
        if entropies:
            H[a, pos] = np.maximum(-(np.exp(ls) * ls).sum(axis=-1), 0.0)
        prev[a] = toks[a, pos]
    return (lp, H) if entropies else lp


def rewards_of(toks: np.ndarray, answers: np.ndarray) -> np.ndarray:
    last = np.full(toks.shape[0], -1, dtype=np.int64)
    for pos in range(toks.shape[1]):
        m = toks[:, pos] > STOP
        last[m] = toks[m, pos]
    return (last == answers).astype(np.float64)


def _stream_uniforms(state: SimState, purpose: int, epoch: int, pidx: np.ndarray, G: int,
                     dp: float = 0.0):
    cfg = state.config
    U = np.empty((pidx.size, G, cfg.max_len))
    noise = np.empty((pidx.size, G, cfg.max_len, cfg.vocab_size)) if dp > 0 else None
    for k, p in enumerate(pidx):
        g = state.stream(purpose, epoch, int(p))
        U[k] = g.random((G, cfg.max_len))
        if noise is not None:
            noise[k] = dp * g.standard_normal((G, cfg.max_len, cfg.vocab_size))
    U = U.reshape(-1, cfg.max_len)
    if noise is not None:
        noise = noise.reshape(-1, cfg.max_len, cfg.vocab_size)
    return U, noise


def next_token_distribution(state: SimState, prompt_id, pos: int, prev: int,
                            temperature: float = 1.0, ref: bool = False) -> np.ndarray:
    pol = state.ref_policy if ref else state.policy
    p = state.prompt_index(prompt_id)
    lg = pol.logits(np.array([p]), pos, np.array([prev]))[0]
    return np.exp(log_softmax(lg / temperature))


def _make_samples(state: SimState, rows: np.ndarray, toks: np.ndarray, source: str) -> list[ResponseSample]:
    cfg = state.config
    lp_ft, H_ft = score_tokens(state.policy, rows, toks, entropies=True)
    lp_ref, H_ref = score_tokens(state.ref_policy, rows, toks, entropies=True)
    R = rewards_of(toks, state.answers[rows])
    lens = (toks >= 0).sum(axis=1)
    out = []
    for i in range(rows.size):
        n = int(lens[i])
        out.append(ResponseSample(
            text=render(toks[i, :n], cfg.vocab_size), reward=int(R[i]),
            token_logprobs_ft=[float(v) for v in lp_ft[i, :n]],
            token_logprobs_ref=[float(v) for v in lp_ref[i, :n]], source=source,
            token_entropies_ft=[float(v) for v in H_ft[i, :n]],
            token_entropies_ref=[float(v) for v in H_ref[i, :n]]))
    return out


def sample_group(state: SimState, prompt_id, G: int, temperature: float, greedy: bool = False,
                 ref: bool = False, rng: Optional[np.random.Generator] = None) -> list[ResponseSample]:
    """Sample ``G`` responses for one prompt from the current (or reference) policy.

    Recorded log-probabilities are untempered and noise-free. DP-decoding noise
    of scale ``dp_decode_strength`` perturbs the fine-tuned policy's sampling
    logits only.

    Raises:
        KeyError: unknown prompt id.
        ValueError: nonpositive temperature.
    """
    if not greedy and not temperature > 0:
        raise ValueError("temperature must be > 0")
    cfg = state.config
    p = state.prompt_index(prompt_id)
    g = rng if rng is not None else state.rng
    rows = np.full(G, p, dtype=np.int64)
    U = g.random((G, cfg.max_len))
    noise = None
    if cfg.dp_decode_strength > 0 and not ref:
        noise = cfg.dp_decode_strength * g.standard_normal((G, cfg.max_len, cfg.vocab_size))
    pol = state.ref_policy if ref else state.policy
    toks = _sample_tokens(pol, rows, cfg.vocab_size, cfg.max_len, temperature, U, noise, greedy)
    return _make_samples(state, rows, toks, "ref" if ref else "ft")


# ---------------------------------------------------------------------------
# advantages and objectives


def group_advantages(rewards) -> np.ndarray:
    """``(r - mean) / std`` with population std; all zeros when std is 0."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.size == 0:
        raise ValueError("empty reward group")
    sd = r.std()
    if sd == 0:
        return np.zeros_like(r)
    return (r - r.mean()) / sd


def _group_advantages_2d(R: np.ndarray) -> np.ndarray:
    mu = R.mean(axis=1, keepdims=True)
    sd = R.std(axis=1, keepdims=True)
    return np.where(sd > 0, (R - mu) / np.where(sd > 0, sd, 1.0), 0.0)


def gradient_coefficient(advantage: float, ratio_ref_over_ft: float, beta: float) -> float:
    """Per-token coefficient ``A + beta * (ratio - 1)`` on ``grad log pi``."""
    if not ratio_ref_over_ft > 0:
        raise ValueError("ratio must be > 0")
    return float(advantage + beta * (ratio_ref_over_ft - 1.0))


def overlong_penalty(lengths, soft_limit: int, max_len: int, lam: float = 1.0) -> np.ndarray:
    """``-lam * max(0, |o| - soft) / (L - soft)``; zero when ``soft == L``."""
    lengths = np.asarray(lengths, dtype=np.float64)
    if soft_limit >= max_len:
        return np.zeros_like(lengths)
    return -lam * np.maximum(0.0, lengths - soft_limit) / (max_len - soft_limit)


@dataclass
class RolloutBatch:
    """One epoch's rollout over member prompts against the ``pi_old`` snapshot."""

    rows: np.ndarray
    toks: np.ndarray
    lens: np.ndarray
    rewards: np.ndarray
    shaped: np.ndarray
    advantages: np.ndarray
    old_lp: np.ndarray
    ref_lp: np.ndarray
    weights: np.ndarray
    n_groups: int
    n_groups_used: int

    @property
    def mask(self) -> np.ndarray:
        return self.toks >= 0


def build_rollout(state: SimState, toks: np.ndarray, rows: np.ndarray, G: int) -> RolloutBatch:
    """Rewards, advantages, token weights and snapshots for a sampled group batch.

    Rows come in consecutive groups of ``G`` per prompt. DAPO drops groups that
    are all-correct or all-wrong and weights tokens by ``1 / sum |o_i|`` per
    group; GRPO weights by ``1 / (G |o_i|)``.
    """
    cfg = state.config
    R = rewards_of(toks, state.answers[rows])
    lens = (toks >= 0).sum(axis=1)
    n_groups = rows.size // G
    Rg = R.reshape(n_groups, G)
    if cfg.algo == "dapo":
        shaped = R + overlong_penalty(lens, cfg.overlong_soft_limit, cfg.max_len, cfg.overlong_penalty)
        correct = Rg.sum(axis=1)
        keep = (correct > 0) & (correct < G)
    else:
        shaped = R.copy()
        keep = np.ones(n_groups, dtype=bool)
    A = _group_advantages_2d(shaped.reshape(n_groups, G))
    A[~keep] = 0.0
    A = A.ravel()
    mask = toks >= 0
    if cfg.algo == "dapo":
        tot = lens.reshape(n_groups, G).sum(axis=1)
        w_row = np.repeat(np.where(keep, 1.0 / np.maximum(tot, 1), 0.0), G)
    else:
        w_row = 1.0 / (G * np.maximum(lens, 1))
    weights = w_row[:, None] * mask
    old = score_tokens(state.policy, rows, toks)
    ref = score_tokens(state.ref_policy, rows, toks)
    return RolloutBatch(rows, toks, lens, R, shaped, A, old, ref, weights, n_groups, int(keep.sum()))


def _clip_bounds(cfg: SimConfig) -> tuple[float, float]:
    return 1.0 - cfg.clip_low, 1.0 + cfg.effective_clip_high


def surrogate_objective(state: SimState, batch: RolloutBatch, policy: Optional[Policy] = None,
                        clip: bool = True) -> float:
    """Clipped surrogate minus ``beta * k3`` summed with the batch token weights."""
    cfg = state.config
    pol = policy or state.policy
    cur = score_tokens(pol, batch.rows, batch.toks)
    rho = np.exp(cur - batch.old_lp)
    A = batch.advantages[:, None]
    if clip:
        lo, hi = _clip_bounds(cfg)
        term = np.minimum(rho * A, np.clip(rho, lo, hi) * A)
    else:
        term = rho * A
    d = batch.ref_lp - cur
    k3 = np.expm1(d) - d
    return float(np.sum(batch.weights * (term - cfg.effective_beta * k3)))


def token_coefficients(state: SimState, batch: RolloutBatch, policy: Optional[Policy] = None,
                       clip: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Per-token derivative of the surrogate w.r.t. ``log pi`` of the sampled token.

    Returns:
        ``(coef, adv_part)`` where ``adv_part`` is the clipped-ratio contribution
        (zero outside the trust region) and ``coef`` adds the KL term.
    """
    cfg = state.config
    pol = policy or state.policy
    cur = score_tokens(pol, batch.rows, batch.toks)
    rho = np.exp(cur - batch.old_lp)
    A = batch.advantages[:, None]
    if clip:
        lo, hi = _clip_bounds(cfg)
        active = np.where(A > 0, rho < hi, rho > lo)
    else:
        active = np.ones_like(rho, dtype=bool)
    adv = batch.weights * rho * A * active
    # d k3 / d log pi = 1 - pi_ref / pi
    kl = batch.weights * cfg.effective_beta * (np.exp(batch.ref_lp - cur) - 1.0)
    return adv + kl, adv


def surrogate_gradient(state: SimState, batch: RolloutBatch, policy: Optional[Policy] = None,
                       clip: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Analytic gradient of :func:`surrogate_objective` w.r.t. (shared, prompt) logits."""
    pol = policy or state.policy
    coef, _ = token_coefficients(state, batch, pol, clip)
    g_prompt = np.zeros_like(pol.prompt_logits)
    g_shared = np.zeros_like(pol.shared_logits)
    rows, toks = batch.rows, batch.toks
    prev = np.zeros(rows.size, dtype=np.int64)
    for pos in range(toks.shape[1]):
        a = np.flatnonzero(toks[:, pos] >= 0)
        if a.size == 0:
            break
        pi = np.exp(log_softmax(pol.logits(rows[a], pos, prev[a])))
        glog = -pi
        glog[np.arange(a.size), toks[a, pos]] += 1.0
        contrib = coef[a, pos, None] * glog
        np.add.at(g_prompt, (rows[a], pos, prev[a]), contrib)
        np.add.at(g_shared, (pol.skill_of[rows[a]], pos, prev[a]), contrib)
        prev[a] = toks[a, pos]
    return g_shared, g_prompt


def apply_update(state: SimState, g_shared: np.ndarray, g_prompt: np.ndarray) -> None:
    """Gradient ascent; the shared step averages over each skill's member prompts."""
    cfg = state.config
    pol = state.policy
    cnt = np.bincount(pol.skill_of[state.member_idx], minlength=pol.shared_logits.shape[0])
    cnt = np.maximum(cnt, 1).astype(np.float64)
    pol.prompt_logits += cfg.lr_prompt * g_prompt
    pol.shared_logits += cfg.lr_shared * g_shared / cnt[:, None, None, None]


def mean_abs_param_delta(state: SimState) -> float:
    d = (state.policy.effective() - state.ref_policy.effective())
    return float(np.mean(np.abs(d)))


def test_reward(state: SimState, epoch: int) -> float:
    cfg = state.config
    nm = state.nonmember_idx
    G = cfg.group_size
    U, _ = _stream_uniforms(state, _TEST, epoch, nm, G)
    rows = np.repeat(nm, G)
    toks = _sample_tokens(state.policy, rows, cfg.vocab_size, cfg.max_len, cfg.train_temperature, U)
    return float(rewards_of(toks, state.answers[rows]).mean())


def train_step(state: SimState, algo: Optional[str] = None) -> EpochStats:
    """One rollout over member prompts followed by the configured update passes."""
    cfg = state.config
    if algo is not None and algo != cfg.algo:
        cfg = SimConfig.from_dict({**cfg.to_dict(), "algo": algo})
        state.config = cfg
    epoch = state.epoch
    G = cfg.group_size
    mem = state.member_idx
    U, _ = _stream_uniforms(state, _ROLLOUT, epoch, mem, G)
    rows = np.repeat(mem, G)
    toks = _sample_tokens(state.policy, rows, cfg.vocab_size, cfg.max_len, cfg.train_temperature, U)
    batch = build_rollout(state, toks, rows, G)
    warning = ""
    if batch.n_groups_used == 0:
        warning = "empty_batch"
        warnings.warn(f"epoch {epoch}: no groups left after dynamic sampling; no update", RuntimeWarning)
    else:
        for _ in range(cfg.minibatches_per_rollout):
            g_shared, g_prompt = surrogate_gradient(state, batch)
            apply_update(state, g_shared, g_prompt)
    stats = EpochStats(epoch=epoch + 1, train_reward=float(batch.rewards.mean()),
                       test_reward=test_reward(state, epoch),
                       mean_abs_param_delta=mean_abs_param_delta(state),
                       n_groups_used=batch.n_groups_used, warning=warning)
    state.history.append(stats)
    return stats


def train(state: SimState, epochs: Optional[int] = None,
          callback: Optional[Callable[[SimState], None]] = None) -> SimState:
    """Run ``epochs`` train steps (default: ``config.epochs``)."""
    n = state.config.epochs if epochs is None else epochs
    for _ in range(n):
        train_step(state)
        if callback is not None:
            callback(state)
    return state


# ---------------------------------------------------------------------------
# emission


def _prompt_text(state: SimState, p: int) -> str:
    words = vocab_words(state.config.vocab_size)
    skill = int(state.policy.skill_of[p])
    body = " ".join(words[t + 1] for t in state.prompt_tokens[p])
    return f"skill {skill:03d} task {p:05d}: {body}"


def _prompt_logprob(state: SimState, p: int) -> float:
    skill = int(state.policy.skill_of[p])
    return float(state.prompt_lm[skill, state.prompt_tokens[p]].sum())


def _neighbors(state: SimState, p: int) -> list[Neighbor]:
    k = state.config.n_neighbors
    skill = state.policy.skill_of
    same = np.flatnonzero(skill == skill[p])
    order = np.roll(same, -int(np.searchsorted(same, p)))[1:k + 1]
    out = []
    for q in order:
        lp = _prompt_logprob(state, int(q))
        out.append(Neighbor(text=_prompt_text(state, int(q)), seq_logprob_ft=lp, seq_logprob_ref=lp))
    return out


def emit_traces(state: SimState, N: int = 8, temperature: float = 0.5, source_both: bool = True,
                baseline_fields: bool = True) -> TraceSet:
    """Sample ``N`` responses per prompt from the fine-tuned (and reference) policy.

    Args:
        N: Samples per model per prompt.
        temperature: Sampling temperature (log-probabilities stay untempered).
        source_both: Also sample from the reference policy.
        baseline_fields: Attach the gold answer, neighbors and prompt scores.

    Raises:
        ValueError: ``N < 1`` or nonpositive temperature.
    """
    if N < 1:
        raise ValueError("N must be >= 1")
    if not temperature > 0:
        raise ValueError("temperature must be > 0")
    cfg = state.config
    P = state.n_prompts
    allp = np.arange(P)
    rows = np.repeat(allp, N)
    ep = state.epoch
    U, noise = _stream_uniforms(state, _EMIT_FT, ep, allp, N, cfg.dp_decode_strength)
    toks_ft = _sample_tokens(state.policy, rows, cfg.vocab_size, cfg.max_len, temperature, U, noise)
    ft_samples = _make_samples(state, rows, toks_ft, "ft")
    ref_samples: list[ResponseSample] = []
    if source_both:
        U, _ = _stream_uniforms(state, _EMIT_REF, ep, allp, N)
        toks_ref = _sample_tokens(state.ref_policy, rows, cfg.vocab_size, cfg.max_len, temperature, U)
        ref_samples = _make_samples(state, rows, toks_ref, "ref")
    gold_samples = _make_samples(state, allp, state.gold, "ref") if baseline_fields else []
    records = []
    for p in range(P):
        rec = PromptTrace(
            prompt_id=state.prompt_id(p),
            prompt_text=_prompt_text(state, p),
            label="member" if state.labels[p] else "nonmember",
            samples_ft=ft_samples[p * N:(p + 1) * N],
            samples_ref=ref_samples[p * N:(p + 1) * N] if source_both else [],
        )
        if baseline_fields:
            gs = gold_samples[p]
            gs.extras["origin"] = "gold"
            rec.reference_answer = gs
            rec.neighbors = _neighbors(state, p)
            rec.prompt_seq_logprob_ft = _prompt_logprob(state, p)
            rec.prompt_seq_logprob_ref = _prompt_logprob(state, p)
        rec.extras["skill"] = int(state.policy.skill_of[p])
        records.append(rec)
    meta = TraceMeta(
        generator="diba.sim",
        n_samples=N,
        temperature=float(temperature),
        seed=cfg.seed,
        notes=f"{cfg.algo} epochs={state.epoch}",
        extras={"logprob_unit": "nats", "logprobs_tempered": False, "sim_config": cfg.to_dict(),
                "epoch": state.epoch},
    )
    return TraceSet(records=records, metadata=meta)


def rescore_traceset(state: SimState, ts: TraceSet) -> TraceSet:
    """Re-tokenize every sample text and score it under both policies.

    Rewards are re-verified. Used after text perturbation, where the stored
    log-probabilities no longer describe the text.
    """
    cfg = state.config
    out_records = []
    for rec in ts.records:
        p = state.prompt_index(rec.prompt_id)
        new = {}
        for key in ("samples_ft", "samples_ref"):
            samples = getattr(rec, key)
            toks = np.full((len(samples), cfg.max_len), -1, dtype=np.int64)
            for i, s in enumerate(samples):
                t = tokenize(s.text, cfg.vocab_size, cfg.max_len) or [STOP]
                toks[i, :len(t)] = t
            rows = np.full(len(samples), p, dtype=np.int64)
            src = "ft" if key == "samples_ft" else "ref"
            scored = _make_samples(state, rows, toks, src) if samples else []
            for s_old, s_new in zip(samples, scored):
                s_new.text = s_old.text
                s_new.source = s_old.source
                s_new.extras = dict(s_old.extras)
            new[key] = scored
        out_records.append(PromptTrace(
            prompt_id=rec.prompt_id, prompt_text=rec.prompt_text, label=rec.label,
            samples_ft=new["samples_ft"], samples_ref=new["samples_ref"],
            reference_answer=rec.reference_answer, neighbors=rec.neighbors,
            prompt_seq_logprob_ft=rec.prompt_seq_logprob_ft,
            prompt_seq_logprob_ref=rec.prompt_seq_logprob_ref, extras=dict(rec.extras)))
    meta = TraceMeta(**{**asdict(ts.metadata), "extras": {**ts.metadata.extras, "rescored": True}})
    return TraceSet(out_records, meta)


# ---------------------------------------------------------------------------
# persistence


def history_csv(state: SimState) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "train_reward", "test_reward", "mean_abs_param_delta"])
    for h in state.history:
        w.writerow([h.epoch, repr(h.train_reward), repr(h.test_reward), repr(h.mean_abs_param_delta)])
    return buf.getvalue()


def save_state(state: SimState, path) -> None:
    """Save policies, world and history to ``.npz``."""
    hist = json.dumps([asdict(h) for h in state.history])
    with open(path, "wb") as fh:
        np.savez_compressed(
            fh, config=np.array(json.dumps(state.config.to_dict(), sort_keys=True)),
            shared=state.policy.shared_logits, prompt=state.policy.prompt_logits,
            ref_shared=state.ref_policy.shared_logits, ref_prompt=state.ref_policy.prompt_logits,
            skill_of=state.policy.skill_of, answers=state.answers, labels=state.labels,
            gold=state.gold, prompt_tokens=state.prompt_tokens, prompt_lm=state.prompt_lm,
            history=np.array(hist))


def load_state(path) -> SimState:
    with np.load(Path(path), allow_pickle=False) as z:
        cfg = SimConfig.from_dict(json.loads(str(z["config"])))
        skill = z["skill_of"]
        st = SimState(
            config=cfg, policy=Policy(z["shared"].copy(), z["prompt"].copy(), skill.copy()),
            ref_policy=Policy(z["ref_shared"].copy(), z["ref_prompt"].copy(), skill.copy()),
            answers=z["answers"].copy(), labels=z["labels"].copy(), gold=z["gold"].copy(),
            prompt_tokens=z["prompt_tokens"].copy(), prompt_lm=z["prompt_lm"].copy(),
            rng=np.random.default_rng(np.random.SeedSequence([cfg.seed, _ADHOC])),
            history=[EpochStats(**h) for h in json.loads(str(z["history"]))])
    return st


def run_simulation(config: SimConfig, checkpoints=(), N: int = 8, temperature: float = 0.5,
                   ) -> tuple[SimState, dict[int, TraceSet]]:
    """Init, train for ``config.epochs`` and emit traces at the requested epochs."""
    state = init_sim(config)
    want = sorted(set(int(c) for c in checkpoints))
    out: dict[int, TraceSet] = {}
    if 0 in want:
        out[0] = emit_traces(state, N, temperature)

    def cb(st: SimState) -> None:
        if st.epoch in want:
            out[st.epoch] = emit_traces(st, N, temperature)

    train(state, callback=cb)
    return state, out


def reward_gap(state: SimState) -> float:
    if not state.history:
        return 0.0
    h = state.history[-1]
    return h.train_reward - h.test_reward


__all__ = [
    "SimConfig", "SimConfigError", "Policy", "SimState", "EpochStats", "RolloutBatch",
    "init_sim", "sample_group", "verifier", "group_advantages", "gradient_coefficient",
    "overlong_penalty", "build_rollout", "surrogate_objective", "surrogate_gradient",
    "token_coefficients", "train_step", "train", "emit_traces", "rescore_traceset",
    "history_csv", "save_state", "load_state", "run_simulation", "tokenize", "render",
    "verify_tokens", "score_tokens", "reward_gap", "next_token_distribution",
]
