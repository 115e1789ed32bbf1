"""Acceptance criteria. Each test prints one PASS/FAIL line with its measurements."""

import math
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE, DEFAULT_CHECKPOINTS
from diba.baselines import compute_baselines
from diba.cli import main
from diba.defenses import DpParams, PerturbConfig, add_feature_noise, gaussian_epsilon, laplace_epsilon, perturb_traceset
from diba.features import extract_matrix, k3_terms
from diba.hardness import stratified_attack
from diba.metrics import auc
from diba.pipeline import run_attack, single_feature_table
from diba.sim import SimConfig, init_sim, reward_gap, run_simulation, surrogate_gradient
from oracles import fd_gradient_check
from test_sim import _forced_batch

SEEDS = (0, 1, 2, 3, 4)
E = SimConfig().epochs


def verdict(name, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} {name}: {detail}"
    print(line)
    ACCEPTANCE.append(line)
    assert ok, line


@pytest.fixture(autouse=True)
def _record_errors(request):
    before = len(ACCEPTANCE)
    yield
    if len(ACCEPTANCE) == before:
        ACCEPTANCE.append(f"FAIL {request.node.name}: raised before a verdict")


def pair_count_auc(m, n):
    diff = m[:, None] - n[None, :]
    return ((diff > 0).sum() + 0.5 * (diff == 0).sum()) / (m.size * n.size)


def test_k3_unbiased():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    pairs = [
        (np.array([0.7, 0.3]), np.array([0.5, 0.5])),
        (rng.dirichlet(np.ones(16)), rng.dirichlet(np.ones(16))),
        (np.r_[0.85, np.full(15, 0.01)], np.full(16, 1 / 16)),
    ]
    details, ok = [], True
    for p, q in pairs:
        kl = float(np.sum(p * np.log(p / q)))
        x = rng.choice(p.size, size=100_000, p=p)
        terms = k3_terms(np.log(p[x]), np.log(q[x]))
        se = terms.std(ddof=1) / math.sqrt(terms.size)
        z = abs(terms.mean() - kl) / se
        ok &= z <= 3.0
        details.append(f"kl={kl:.5f} z={z:.2f}")
    elapsed = time.perf_counter() - t0
    ok &= elapsed < 5.0
    verdict("k3 unbiasedness", ok, "; ".join(details) + f"; {elapsed:.2f}s")


def test_auc_oracle_equivalence():
    t0 = time.perf_counter()
    rng = np.random.default_rng(99)
    worst = 0.0
    for i in range(1000):
        nm, nn = rng.integers(1, 201, size=2)
        if i % 2:
            m, n = rng.integers(0, 8, nm).astype(float), rng.integers(0, 8, nn).astype(float)
        else:
            m, n = rng.normal(0.5, 1, nm), rng.normal(0, 1, nn)
        worst = max(worst, abs(auc(m, n) - pair_count_auc(m, n)))
    elapsed = time.perf_counter() - t0
    verdict("AUC oracle equivalence", worst <= 1e-12 and elapsed < 10.0,
            f"max |diff|={worst:.2e}; {elapsed:.2f}s")


def test_gradient_check():
    err = fd_gradient_check(n_coords=20)
    verdict("gradient check", err.size == 20 and err.max() < 1e-4,
            f"{err.size} coords, max rel err={err.max():.2e}")


def test_zero_gradient_invariants():
    checks = {}
    for correct in (True, False):
        st_ = init_sim(SimConfig(n_prompts=20, n_skills=2, beta=0.0))
        b = _forced_batch(st_, correct)
        gs, gp = surrogate_gradient(st_, b)
        checks[f"grpo reward={int(correct)}"] = not b.advantages.any() and not gs.any() and not gp.any()
    st_ = init_sim(SimConfig(n_prompts=20, n_skills=2, algo="dapo"))
    b = _forced_batch(st_, True)
    gs, gp = surrogate_gradient(st_, b)
    checks["dapo excluded"] = b.n_groups_used == 0 and not b.weights.any() and not gs.any() and not gp.any()
    verdict("zero-gradient invariants", all(checks.values()),
            ", ".join(f"{k}={'ok' if v else 'nonzero'}" for k, v in checks.items()))


@pytest.fixture(scope="module")
def seed_runs():
    t0 = time.perf_counter()
    out = {}
    for s in SEEDS:
        state, traces = run_simulation(SimConfig(seed=s), checkpoints=(E,))
        fm = extract_matrix(traces[E])
        out[s] = {"gap": reward_gap(state), "diba": run_attack(fm, seed=s),
                  "single": single_feature_table(fm, seed=s)}
    return out, time.perf_counter() - t0


def test_end_to_end_band(seed_runs):
    runs, elapsed = seed_runs
    aucs = [r["diba"].auc for r in runs.values()]
    mean_auc = float(np.mean(aucs))
    diba_tpr = float(np.mean([r["diba"].aggregate["tpr_at"]["0.01"] for r in runs.values()]))
    single = {n: float(np.mean([r["single"][n].aggregate["tpr_at"]["0.01"] for r in runs.values()]))
              for n in runs[SEEDS[0]]["single"]}
    gaps = [r["gap"] for r in runs.values()]
    ok = 0.70 <= mean_auc <= 0.95 and all(diba_tpr >= v for v in single.values())
    ok &= min(gaps) >= 0.3 and elapsed <= 15 * 60
    best = max(single, key=single.get)
    verdict("end-to-end attack band", ok,
            f"mean AUC={mean_auc:.4f} (seeds {', '.join(f'{a:.3f}' for a in aucs)}); "
            f"TPR@1% diba={diba_tpr:.4f} vs best single {best}={single[best]:.4f}; "
            f"min reward gap={min(gaps):.3f}; {elapsed:.0f}s")


def test_training_dynamics(default_run):
    _, traces = default_run
    aucs = [run_attack(extract_matrix(traces[e])).auc for e in DEFAULT_CHECKPOINTS]
    mono = all(b >= a - 0.03 for a, b in zip(aucs, aucs[1:]))
    verdict("training dynamics", mono and 0.45 <= aucs[0] <= 0.55,
            ", ".join(f"epoch {e}: {a:.4f}" for e, a in zip(DEFAULT_CHECKPOINTS, aucs)))


def test_hardness_ordering(default_run):
    _, traces = default_run
    ts = traces[E]
    out = stratified_attack(extract_matrix(ts), traces=ts.records)
    got = {k: out[k]["metrics"]["auc"] if out[k]["available"] else float("nan") for k in out}
    ok = all(got["residual"] - got[k] >= 0.05 for k in ("all0", "all1"))
    verdict("hardness ordering", ok, ", ".join(f"{k}={v:.4f} (n={out[k]['n']})" for k, v in got.items()))


def test_baseline_failure(default_run):
    _, traces = default_run
    ts = traces[E]
    diba = run_attack(extract_matrix(ts)).auc
    tab = compute_baselines(ts)
    y = np.array([lab == "member" for lab in tab.labels])
    aucs = {}
    for name in tab.raw:
        for kind, d in (("raw", tab.raw), ("cal", tab.calibrated)):
            s = d[name]
            if not np.isnan(s).all():
                aucs[f"{name}/{kind}"] = auc(s[y], s[~y])
    best = max(aucs, key=aucs.get)
    verdict("baseline failure", all(v <= diba - 0.05 for v in aucs.values()),
            f"diba={diba:.4f}; best baseline {best}={aucs[best]:.4f}; {len(aucs)} scored")


def test_dp_accounting():
    want = 2 * math.sqrt(2 * math.log(1.25 / 1e-5))
    g = gaussian_epsilon(1, 1e-5, 1)
    lap = laplace_epsilon(1, 0.5)
    sweep = np.geomspace(0.05, 5.0, 10)
    ge = [gaussian_epsilon(1, 1e-5, s) for s in sweep]
    le = [laplace_epsilon(1, s) for s in sweep]
    mono = all(a > b for a, b in zip(ge, ge[1:])) and all(a > b for a, b in zip(le, le[1:]))
    ok = abs(g - 9.690) <= 1e-3 and abs(g - want) <= 1e-12 and lap == 4.0 and mono
    verdict("DP accounting", ok, f"gaussian={g:.6f} (formula {want:.6f}), laplace={lap!r}, "
            f"monotone over 10 scales={mono}")


def test_defense_direction(default_run):
    _, traces = default_run
    ts = traces[E]
    fm = extract_matrix(ts)
    before = run_attack(fm)
    noised, _ = add_feature_noise(fm, DpParams("gaussian", clip=math.sqrt(5), scale=0.2), seed=0)
    drop = before.auc - run_attack(noised).auc
    same = run_attack(extract_matrix(perturb_traceset(ts, PerturbConfig(0.0)))).aggregate
    noop = same == before.aggregate
    verdict("defense robustness direction", drop <= 0.05 and noop,
            f"AUC {before.auc:.4f} -> drop {drop:.4f} under 20% range noise; strength-0 no-op={noop}")


def test_determinism(tmp_path):
    for k in (1, 2):
        d = tmp_path / str(k)
        d.mkdir()
        assert main(["simulate", "--out", str(d / "t.jsonl"), "--seed", "0"]) == 0
        assert main(["attack", str(d / "t.jsonl"), "--out", str(d / "r.json"), "--baselines",
                     "--svg", str(d / "r.svg"), "--seed", "0"]) == 0
    names = ("t.jsonl", "t.history.csv", "r.json", "r.svg")
    same = {n: (tmp_path / "1" / n).read_bytes() == (tmp_path / "2" / n).read_bytes() for n in names}
    verdict("determinism", all(same.values()), ", ".join(f"{n} identical={v}" for n, v in same.items()))
