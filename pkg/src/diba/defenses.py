"""Defenses: character perturbation of responses and local-DP feature noise.

Training-side defenses (KL strength, DP decoding) are simulator settings, see
:class:`diba.sim.SimConfig`.
"""

from __future__ import annotations

import hashlib
import json
import math
import shlex
import subprocess
from dataclasses import asdict, dataclass, field, replace
from importlib import resources
from typing import Callable, Optional, Sequence

import numpy as np

from .features import FEATURE_NAMES, FeatureMatrix, FeatureVector, feature_matrix
from .traces import ResponseSample, TraceMeta, TraceSet

DEFAULT_WEIGHTS = {
    "swap": 0.20,
    "delete": 0.10,
    "typo": 0.10,
    "case": 0.30,
    "punct_insert": 0.10,
    "punct_remove": 0.10,
    "double_space": 0.10,
}
PUNCTUATION = ".,;:!?'-"


def qwerty_adjacency() -> dict[str, str]:
    """Lower-case QWERTY key neighbors shipped as package data."""
    data = json.loads(resources.files("diba").joinpath("data/qwerty.json").read_text("utf-8"))
    return data["adjacency"]


_QWERTY = qwerty_adjacency()


@dataclass
class PerturbConfig:
    strength: float = 0.05
    weights: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_WEIGHTS))
    seed: int = 0

    def validate(self) -> "PerturbConfig":
        if not 0.0 <= self.strength <= 1.0:
            raise ValueError("strength must lie in [0, 1]")
        unknown = set(self.weights) - set(DEFAULT_WEIGHTS)
        if unknown:
            raise ValueError(f"unknown perturbation ops {sorted(unknown)}")
        if any(w < 0 for w in self.weights.values()):
            raise ValueError("weights must be >= 0")
        if abs(sum(self.weights.values()) - 1.0) > 1e-9:
            raise ValueError("perturbation weights must sum to 1")
        return self


def n_operations(text: str, strength: float) -> int:
    """Perturbation budget ``ceil(strength * len(text))``."""
    return int(math.ceil(strength * len(text) - 1e-12))


def _applicable(chars: list[str], op: str) -> bool:
    n = len(chars)
    if op in ("swap", "delete"):
        return n >= 2
    if op == "typo":
        return any(c.lower() in _QWERTY for c in chars)
    if op == "case":
        return any(c.swapcase() != c for c in chars)
    if op == "punct_remove":
        return n >= 2 and any(c in PUNCTUATION for c in chars)
    return True


def _pick(rng: np.random.Generator, idx: list[int]) -> int:
    return idx[int(rng.integers(0, len(idx)))]


def _apply_op(chars: list[str], op: str, rng: np.random.Generator) -> None:
    n = len(chars)
    if op == "swap":
        i = int(rng.integers(0, n - 1))
        chars[i], chars[i + 1] = chars[i + 1], chars[i]
    elif op == "delete":
        del chars[int(rng.integers(0, n))]
    elif op == "typo":
        i = _pick(rng, [i for i, c in enumerate(chars) if c.lower() in _QWERTY])
        nb = _QWERTY[chars[i].lower()]
        new = nb[int(rng.integers(0, len(nb)))]
        chars[i] = new.upper() if chars[i].isupper() else new
    elif op == "case":
        i = _pick(rng, [i for i, c in enumerate(chars) if c.swapcase() != c])
        chars[i] = chars[i].swapcase()
    elif op == "punct_insert":
        chars.insert(int(rng.integers(0, n + 1)), PUNCTUATION[int(rng.integers(0, len(PUNCTUATION)))])
    elif op == "punct_remove":
        del chars[_pick(rng, [i for i, c in enumerate(chars) if c in PUNCTUATION])]
    elif op == "double_space":
        spaces = [i for i, c in enumerate(chars) if c == " "]
        chars.insert(_pick(rng, spaces) if spaces else int(rng.integers(0, n + 1)), " ")
    else:
        raise ValueError(f"unknown op {op!r}")


def perturb_text(text: str, cfg: PerturbConfig, rng: Optional[np.random.Generator] = None) -> str:
    """Apply exactly ``ceil(strength * len)`` seeded character operations.

    Op types come from the weight table renormalized over the ops applicable
    to the current text, so every draw edits something.
    """
    cfg.validate()
    k = n_operations(text, cfg.strength)
    if k == 0 or not text:
        return text
    g = rng if rng is not None else np.random.default_rng(np.random.SeedSequence([cfg.seed]))
    names = sorted(n for n, w in cfg.weights.items() if w > 0)
    base = np.array([cfg.weights[n] for n in names])
    chars = list(text)
    for _ in range(k):
        ok = np.array([_applicable(chars, n) for n in names])
        w = base * ok
        if w.sum() <= 0:
            break
        _apply_op(chars, names[int(g.choice(len(names), p=w / w.sum()))], g)
    return "".join(chars)


def record_stream(seed: int, prompt_id: str, sample_index: int, source: str) -> np.random.Generator:
    """RNG for one sample derived from ``(seed, prompt_id, sample_index)``."""
    h = int.from_bytes(hashlib.sha256(prompt_id.encode("utf-8")).digest()[:8], "little")
    return np.random.default_rng(np.random.SeedSequence(
        [int(seed), h, int(sample_index), 0 if source == "ft" else 1]))


def _transform_sample(s: ResponseSample, new_text: str) -> ResponseSample:
    if new_text == s.text:
        return s
    # stored scores describe the old text; drop them
    return replace(s, text=new_text, token_logprobs_ft=None, token_logprobs_ref=None,
                   token_entropies_ft=None, token_entropies_ref=None,
                   extras={**s.extras, "transformed": True})


def transform_traceset(ts: TraceSet, fn: Callable[[str, np.random.Generator], str],
                       seed: int = 0, sources: Sequence[str] = ("ft",), note: str = "") -> TraceSet:
    """Rewrite sample texts with ``fn``; changed samples lose their log-probabilities."""
    records = []
    for rec in ts.records:
        groups = {}
        for src in ("ft", "ref"):
            samples = getattr(rec, f"samples_{src}")
            if src in sources:
                samples = [_transform_sample(s, fn(s.text, record_stream(seed, rec.prompt_id, i, src)))
                           for i, s in enumerate(samples)]
            groups[src] = list(samples)
        records.append(replace(rec, samples_ft=groups["ft"], samples_ref=groups["ref"]))
    meta = TraceMeta(**{**asdict(ts.metadata),
                        "notes": (ts.metadata.notes + "; " if ts.metadata.notes else "") + note})
    return TraceSet(records, meta)


def perturb_traceset(ts: TraceSet, cfg: PerturbConfig, sources: Sequence[str] = ("ft", "ref")) -> TraceSet:
    """Perturb every sample text of the given sources.

    Rewards are kept (re-verification needs the producer's verifier). Use
    :func:`diba.sim.rescore_traceset` to rescore inside the simulator.
    """
    cfg.validate()
    return transform_traceset(ts, lambda t, g: perturb_text(t, cfg, g), cfg.seed, sources,
                              note=f"perturbed strength={cfg.strength} seed={cfg.seed}")


def command_transform(command: str | Sequence[str], timeout: float = 60.0) -> Callable[[str, object], str]:
    """Text transform backed by an external command (text on stdin, replacement on stdout).

    Hook for paraphrase-style defenses. A trailing newline is stripped.
    """
    argv = shlex.split(command) if isinstance(command, str) else list(command)

    def run(text: str, _rng=None) -> str:
        proc = subprocess.run(argv, input=text, capture_output=True, text=True, timeout=timeout,
                              check=True)
        out = proc.stdout
        return out[:-1] if out.endswith("\n") else out

    return run


# ---------------------------------------------------------------------------
# local differential privacy on features


@dataclass
class DpParams:
    """Noise mechanism on clipped feature vectors.

    Attributes:
        mechanism: ``gaussian`` (clip in l2) or ``laplace`` (clip in l1).
        clip: Norm bound C (or C1).
        scale: Noise std ``sigma`` or Laplace scale ``b``.
        delta: Failure probability (gaussian only).
    """

    mechanism: str = "gaussian"
    clip: float = 1.0
    scale: float = 0.1
    delta: float = 1e-5

    def validate(self) -> "DpParams":
        if self.mechanism not in ("gaussian", "laplace"):
            raise ValueError("mechanism must be 'gaussian' or 'laplace'")
        if not self.clip > 0 or not self.scale > 0:
            raise ValueError("clip and scale must be > 0")
        if self.mechanism == "gaussian" and not 0.0 < self.delta < 1.0:
            raise ValueError("delta must lie in (0, 1)")
        return self

    @property
    def epsilon(self) -> float:
        self.validate()
        if self.mechanism == "gaussian":
            return gaussian_epsilon(self.clip, self.delta, self.scale)
        return laplace_epsilon(self.clip, self.scale)


def gaussian_epsilon(C: float, delta: float, sigma: float) -> float:
    """``eps = 2 C sqrt(2 ln(1.25 / delta)) / sigma`` (sensitivity 2C)."""
    if not (C > 0 and sigma > 0 and 0 < delta < 1):
        raise ValueError("need C > 0, sigma > 0 and 0 < delta < 1")
    return 2.0 * C * math.sqrt(2.0 * math.log(1.25 / delta)) / sigma


def laplace_epsilon(C1: float, b: float) -> float:
    """``eps = 2 C1 / b`` (l1 sensitivity 2 C1)."""
    if not (C1 > 0 and b > 0):
        raise ValueError("need C1 > 0 and b > 0")
    return 2.0 * C1 / b


NOISE_REFERENCES = ("range", "std")


@dataclass
class FeatureScaler:
    """Per-feature affine map under which noise ``scale`` is relative.

    ``range`` maps the observed span to [0, 1]; ``std`` standardizes.
    """

    lo: np.ndarray
    span: np.ndarray
    reference: str = "range"

    @classmethod
    def fit(cls, X: np.ndarray, reference: str = "range") -> "FeatureScaler":
        if reference not in NOISE_REFERENCES:
            raise ValueError(f"reference must be one of {NOISE_REFERENCES}")
        X = np.asarray(X, dtype=np.float64)
        with np.errstate(all="ignore"):
            if np.isnan(X).all(axis=0).any():
                keep = ~np.isnan(X).all(axis=0)
            else:
                keep = np.ones(X.shape[1], dtype=bool)
            lo = np.zeros(X.shape[1])
            span = np.ones(X.shape[1])
            if keep.any():
                Xk = X[:, keep]
                if reference == "range":
                    a, b = np.nanmin(Xk, axis=0), np.nanmax(Xk, axis=0)
                    lo[keep], width = a, b - a
                else:
                    lo[keep], width = np.nanmean(Xk, axis=0), np.nanstd(Xk, axis=0)
                span[keep] = np.where(width > 0, width, 1.0)
        return cls(lo, span, reference)

    def forward(self, X: np.ndarray) -> np.ndarray:
        return (X - self.lo) / self.span

    def inverse(self, U: np.ndarray) -> np.ndarray:
        return U * self.span + self.lo


def clip_rows(U: np.ndarray, bound: float, ord: int = 2) -> np.ndarray:
    """Project each row onto the ``ord``-norm ball of radius ``bound`` (NaN ignored)."""
    Z = np.nan_to_num(U, nan=0.0)
    norms = np.linalg.norm(Z, ord=ord, axis=1)
    f = np.where(norms > bound, bound / np.where(norms > 0, norms, 1.0), 1.0)
    return U * f[:, None]


def add_feature_noise(features: FeatureMatrix | Sequence[FeatureVector], params: DpParams,
                      seed: int = 0, noiseless: bool = False, reference: str = "range",
                      scaler: Optional[FeatureScaler] = None):
    """Clip each normalized feature vector, then add i.i.d. noise per coordinate.

    Features are first mapped by a :class:`FeatureScaler`, so ``params.scale``
    is the noise level relative to each feature's range (or std). Missing
    values stay missing.

    Returns:
        ``(noised, info)`` where ``noised`` has the input's type and original
        units, and ``info`` carries epsilon and the noise mapping.
    """
    params.validate()
    as_list = not isinstance(features, FeatureMatrix)
    fm = feature_matrix(features) if as_list else features
    X = np.asarray(fm.X, dtype=np.float64)
    sc = scaler or FeatureScaler.fit(X, reference)
    U = clip_rows(sc.forward(X), params.clip, 2 if params.mechanism == "gaussian" else 1)
    if not noiseless:
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 31]))
        if params.mechanism == "gaussian":
            noise = rng.normal(0.0, params.scale, size=U.shape)
        else:
            noise = rng.laplace(0.0, params.scale, size=U.shape)
        U = U + noise
    Xn = sc.inverse(U)
    info = {"mechanism": params.mechanism, "clip": params.clip, "scale": params.scale,
            "delta": params.delta if params.mechanism == "gaussian" else None,
            "epsilon": params.epsilon, "relative_noise": params.scale,
            "noise_reference": sc.reference, "noiseless": noiseless,
            "absolute_scale": [float(params.scale * w) for w in sc.span]}
    vecs = [replace(v, **{n: float(Xn[i, j]) for j, n in enumerate(FEATURE_NAMES)})
            for i, v in enumerate(fm.vectors)] if fm.vectors else []
    if as_list:
        return vecs, info
    return replace(fm, X=Xn, vectors=vecs), info
