"""Command-line interface: ``diba simulate | attack | baselines | defend | transfer | report``.

Exit codes: 0 success, 2 validation error, 3 I/O error, 4 insufficient data.
"""

from __future__ import annotations

import argparse
import json
import subprocess
import sys
from dataclasses import fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .baselines import METHOD_NAMES, compute_baselines
from .classifier import InsufficientDataError, fit_stacking, predict_proba
from .defenses import (NOISE_REFERENCES, DpParams, PerturbConfig, add_feature_noise,
                       command_transform, perturb_traceset, transform_traceset)
from .features import FEATURE_NAMES, FeatureMatrix, extract_matrix, features_from_csv, features_to_csv
from .hardness import stratified_attack
from .metrics import DEFAULT_FPR_TARGETS, metric_block, roc_curve, split_by_label
from .pipeline import pareto_flags, run_attack, single_feature_table
from .report import (EvalReport, attack_block, baseline_block, defense_block, emit_log_roc_svg,
                     metrics_csv, percentile_diagnostics, provenance, scores_block, sha256_file,
                     single_feature_block)
from .sim import SimConfig, SimConfigError, history_csv, load_state, rescore_traceset, run_simulation, save_state
from .traces import TraceError, TraceIOError, TraceSet, load_trace_set, write_trace_set

EXIT_OK, EXIT_VALIDATION, EXIT_IO, EXIT_INSUFFICIENT = 0, 2, 3, 4


class UsageError(ValueError):
    """Bad flag values detected after parsing."""


# ---------------------------------------------------------------------------
# helpers


def _floats(text: str) -> list[float]:
    try:
        vals = [float(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


def _ints(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _targets(args) -> list[float]:
    for t in args.fpr_targets:
        if not 0.0 < t < 1.0:
            raise UsageError(f"FPR target {t} outside (0, 1)")
    return list(args.fpr_targets)


def _seed(args) -> int:
    return 0 if args.seed is None else int(args.seed)


def _load_inputs(path: str, source: str) -> tuple[Optional[TraceSet], FeatureMatrix]:
    """Traces JSONL, or a features CSV (no traces then)."""
    if path.endswith(".csv"):
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise TraceIOError(f"cannot read {path}: {exc}") from exc
        try:
            fm = features_from_csv(text)
        except (KeyError, ValueError) as exc:
            raise UsageError(f"{path}: not a feature CSV ({exc})") from exc
        return None, fm
    ts = load_trace_set(path)
    return ts, extract_matrix(ts, source)


def _flags(args, **extra) -> dict:
    out = {"seed": _seed(args), "folds": args.folds, "source": args.source,
           "fpr_targets": list(args.fpr_targets), "n_trees": args.n_trees, "f_max": args.f_max}
    out.update(extra)
    return out


def _write_text(path: str, text: str) -> None:
    Path(path).write_text(text, encoding="utf-8", newline="\n")


def _emit(report: EvalReport, out: Optional[str]) -> None:
    if out:
        report.write(out)
    else:
        sys.stdout.write(report.to_json())


def _check_source(ts: Optional[TraceSet], fm: FeatureMatrix, source: str) -> None:
    if ts is None and fm.source != source:
        raise UsageError(f"feature CSV source {fm.source!r} does not match --source {source!r}")


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(args) -> int:
    cfg = SimConfig.from_json(args.config) if args.config else SimConfig()
    over = {}
    for item in args.set or []:
        key, _, raw = item.partition("=")
        if key not in {f.name for f in fields(SimConfig)}:
            raise SimConfigError(f"unknown config key {key!r}")
        try:
            over[key] = json.loads(raw)
        except json.JSONDecodeError:
            over[key] = raw
    if args.epochs is not None:
        over["epochs"] = args.epochs
    if args.algo is not None:
        over["algo"] = args.algo
    if args.seed is not None:
        over["seed"] = args.seed
    cfg = SimConfig.from_dict({**cfg.to_dict(), **over})
    checkpoints = set(args.checkpoints or ())
    if checkpoints and not args.checkpoint_dir:
        raise UsageError("--checkpoints needs --checkpoint-dir")
    state, traces = run_simulation(cfg, checkpoints | {cfg.epochs}, args.n_samples, args.temperature)
    write_trace_set(traces[cfg.epochs], args.out)
    history = args.history or str(Path(args.out).with_suffix("")) + ".history.csv"
    _write_text(history, history_csv(state))
    if args.checkpoint_dir:
        d = Path(args.checkpoint_dir)
        d.mkdir(parents=True, exist_ok=True)
        for epoch in sorted(checkpoints):
            if epoch > cfg.epochs:
                raise UsageError(f"checkpoint {epoch} beyond epochs={cfg.epochs}")
            write_trace_set(traces[epoch], d / f"traces_epoch{epoch:03d}.jsonl")
    if args.save_state:
        save_state(state, args.save_state)
    return EXIT_OK


def _attack_report(args, ts: Optional[TraceSet], fm: FeatureMatrix, inputs: dict) -> tuple[EvalReport, dict]:
    seed, targets = _seed(args), _targets(args)
    feats = args.feature_only or list(FEATURE_NAMES)
    for f in feats:
        if f not in FEATURE_NAMES:
            raise UsageError(f"unknown feature {f!r}")
    if fm.labeled_mask.sum() == 0:
        raise InsufficientDataError("all records are labeled unknown")
    res = run_attack(fm, args.folds, seed, targets, feats, args.n_trees, args.f_max)
    blocks = {"attack": attack_block(res), "scores": scores_block(fm, res),
              "diagnostics": percentile_diagnostics(fm, res, targets)}
    curves = {"diba": roc_curve(*split_by_label(res.oof, res.y))}
    unknown = ~fm.labeled_mask
    if unknown.any():
        lab = fm.subset(fm.labeled_mask)
        model = fit_stacking(lab.columns(feats), lab.y, args.folds, seed, args.n_trees, feats)
        unk = fm.subset(unknown)
        probs = predict_proba(model, unk.columns(feats), feats)
        blocks["unknown_scores"] = [{"prompt_id": p, "score": float(s)}
                                    for p, s in zip(unk.prompt_ids, probs)]
    if not args.feature_only and not args.no_single_feature:
        table = single_feature_table(fm, args.folds, seed, targets, args.n_trees, args.f_max)
        key = next(iter(res.aggregate["tpr_at"]))
        flags = pareto_flags({**table, "diba": res}, key)
        blocks["single_feature"] = single_feature_block(table, flags)
        blocks["attack"]["pareto"] = flags["diba"]
        for name, r in table.items():
            curves[name] = roc_curve(*split_by_label(r.oof, r.y))
    if not args.no_hardness:
        traces = ts.records if ts is not None else None
        blocks["hardness"] = stratified_attack(fm, None, args.folds, seed, targets, traces,
                                               args.hardness_tol, args.n_trees)
    if args.baselines:
        if ts is None:
            raise UsageError("--baselines needs a traces file")
        table = compute_baselines(ts, args.baselines_on)
        blocks["baselines"] = baseline_block(table, fm.y, targets, args.f_max)
    cfg = _flags(args, features=feats, hardness_tol=args.hardness_tol)
    if ts is not None:
        cfg["traces_meta"] = {"generator": ts.metadata.generator, "seed": ts.metadata.seed,
                              "n_samples": ts.metadata.n_samples,
                              "temperature": ts.metadata.temperature,
                              "extras": ts.metadata.extras}
    rep = EvalReport("attack", cfg, provenance(seed, inputs), blocks)
    return rep, curves


def cmd_attack(args) -> int:
    ts, fm = _load_inputs(args.traces, args.source)
    _check_source(ts, fm, args.source)
    rep, curves = _attack_report(args, ts, fm, {"traces": sha256_file(args.traces)})
    if args.features_csv:
        _write_text(args.features_csv, features_to_csv(fm))
    if args.svg:
        emit_log_roc_svg(curves, args.svg)
    if args.metrics_csv:
        _write_text(args.metrics_csv, metrics_csv(rep.to_dict()))
    _emit(rep, args.out)
    return EXIT_OK


def cmd_baselines(args) -> int:
    ts = load_trace_set(args.traces)
    targets = _targets(args)
    methods = args.methods or list(METHOD_NAMES)
    table = compute_baselines(ts, args.on, methods)
    y = np.array([{"member": 1, "nonmember": 0}.get(r.label, -1) for r in ts.records])
    if (y >= 0).sum() == 0:
        raise InsufficientDataError("all records are labeled unknown")
    blocks = {"baselines": baseline_block(table, y, targets, args.f_max)}
    if args.csv:
        _write_text(args.csv, table.to_csv())
    rep = EvalReport("baselines", _flags(args, on=args.on, methods=methods),
                     provenance(_seed(args), {"traces": sha256_file(args.traces)}), blocks)
    _emit(rep, args.out)
    return EXIT_OK


def cmd_defend(args) -> int:
    ts, fm = _load_inputs(args.traces, args.source)
    _check_source(ts, fm, args.source)
    seed, targets = _seed(args), _targets(args)

    def attack(m: FeatureMatrix) -> dict:
        return run_attack(m, args.folds, seed, targets, None, args.n_trees, args.f_max).aggregate

    before = attack(fm)
    out = []
    for scale in args.ldp or ():
        params = DpParams(args.mechanism, args.clip, scale, args.delta)
        noised, info = add_feature_noise(fm, params, seed, reference=args.noise_reference)
        out.append(defense_block("ldp", {k: info[k] for k in
                                         ("mechanism", "clip", "scale", "delta", "noise_reference",
                                          "absolute_scale")},
                                 before, attack(noised), info["epsilon"]))
    needs_traces = bool(args.perturb) or bool(args.command)
    if needs_traces and ts is None:
        raise UsageError("text defenses need a traces file")
    state = load_state(args.state) if args.state else None
    for strength in args.perturb or ():
        p = perturb_traceset(ts, PerturbConfig(strength=strength, seed=seed))
        if state is not None:
            p = rescore_traceset(state, p)
        out.append(defense_block("perturb", {"strength": strength, "rescored": state is not None},
                                 before, attack(extract_matrix(p, args.source))))
    if args.command:
        p = transform_traceset(ts, command_transform(args.command), seed, note="command transform")
        if state is not None:
            p = rescore_traceset(state, p)
        out.append(defense_block("command", {"command": args.command, "rescored": state is not None},
                                 before, attack(extract_matrix(p, args.source))))
    if not out:
        raise UsageError("no defense requested (use --ldp, --perturb or --command)")
    inputs = {"traces": sha256_file(args.traces)}
    if args.state:
        inputs["state"] = sha256_file(args.state)
    cfg = _flags(args, ldp=args.ldp, mechanism=args.mechanism, clip=args.clip, delta=args.delta,
                 noise_reference=args.noise_reference, perturb=args.perturb, command=args.command)
    rep = EvalReport("defend", cfg, provenance(seed, inputs), {"defenses": out})
    _emit(rep, args.out)
    return EXIT_OK


def _schema_key(fm: FeatureMatrix) -> tuple:
    return tuple(fm.feature_names), fm.source


def cmd_transfer(args) -> int:
    seed, targets = _seed(args), _targets(args)
    loaded = {}
    for path in list(args.train) + list(args.eval):
        if path not in loaded:
            ts, fm = _load_inputs(path, args.source)
            loaded[path] = (sha256_file(path), fm)
    keys = {_schema_key(fm) for _, fm in loaded.values()}
    if len(keys) > 1:
        raise UsageError(f"mismatched feature schemas across inputs: {sorted(keys)}")
    feats = list(FEATURE_NAMES)
    cells = []
    for tr in args.train:
        tr_hash, tr_fm = loaded[tr]
        lab_tr = tr_fm.subset(tr_fm.labeled_mask)
        model = None
        for ev in args.eval:
            ev_hash, ev_fm = loaded[ev]
            if ev_hash == tr_hash:
                res = run_attack(tr_fm, args.folds, seed, targets, feats, args.n_trees, args.f_max)
                metrics, protocol = res.aggregate, "cross_validation"
            else:
                if model is None:
                    if len(lab_tr) < 2 * args.folds:
                        raise InsufficientDataError(f"{tr}: need at least {2 * args.folds} labeled records")
                    model = fit_stacking(lab_tr.columns(feats), lab_tr.y, args.folds, seed,
                                         args.n_trees, feats)
                lab_ev = ev_fm.subset(ev_fm.labeled_mask)
                if len(set(lab_ev.y.tolist())) < 2:
                    raise InsufficientDataError(f"{ev}: evaluation set needs both labels")
                probs = predict_proba(model, lab_ev.columns(feats), feats)
                metrics, protocol = metric_block(probs, lab_ev.y, targets, args.f_max), "fit_then_score"
            cells.append({"train": Path(tr).name, "eval": Path(ev).name, "train_sha256": tr_hash,
                          "eval_sha256": ev_hash, "protocol": protocol, "metrics": metrics})
    inputs = {Path(p).name: h for p, (h, _) in loaded.items()}
    cfg = _flags(args, train=[Path(p).name for p in args.train], eval=[Path(p).name for p in args.eval])
    rep = EvalReport("transfer", cfg, provenance(seed, inputs), {"transfer": cells})
    _emit(rep, args.out)
    return EXIT_OK


def _summary(rep: dict) -> str:
    lines = [f"run {rep.get('run_id')} ({rep.get('command')})"]
    att = rep.get("attack")
    if att:
        a = att["aggregate"]
        tprs = " ".join(f"TPR@{k}={v:.4f}" for k, v in sorted(a["tpr_at"].items()))
        lines.append(f"diba        AUC={a['auc']:.4f} {tprs}")
    for name, r in sorted((rep.get("single_feature") or {}).items()):
        lines.append(f"{name:<12}AUC={r['aggregate']['auc']:.4f}")
    for name, m in sorted(((rep.get("baselines") or {}).get("methods") or {}).items()):
        if not m["available"]:
            lines.append(f"{name:<12}unavailable: {m['reason']}")
            continue
        parts = [f"{k}={m[k]['auc']:.4f}" for k in ("raw", "calibrated") if m.get(k)]
        lines.append(f"{name:<12}" + " ".join(parts))
    for name, h in (rep.get("hardness") or {}).items():
        auc = h["metrics"]["auc"] if h.get("available") else None
        lines.append(f"split {name:<9}n={h['n']} AUC={'n/a' if auc is None else f'{auc:.4f}'}")
    for d in rep.get("defenses") or []:
        lines.append(f"defense {d['defense']} {json.dumps(d['params'], sort_keys=True)} "
                     f"AUC {d['before']['auc']:.4f} -> {d['after']['auc']:.4f}")
    for c in rep.get("transfer") or []:
        lines.append(f"transfer {c['train']} -> {c['eval']} AUC={c['metrics']['auc']:.4f}")
    return "\n".join(lines) + "\n"


def cmd_report(args) -> int:
    try:
        rep = json.loads(Path(args.report).read_text(encoding="utf-8"))
    except OSError as exc:
        raise TraceIOError(f"cannot read {args.report}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"{args.report}: not JSON ({exc})") from exc
    if args.validate:
        try:
            import jsonschema
        except ImportError as exc:
            raise UsageError("--validate needs the jsonschema package") from exc
        from .report import load_schema
        try:
            jsonschema.validate(rep, load_schema())
        except jsonschema.ValidationError as exc:
            raise UsageError(f"report does not match schema: {exc.message}") from exc
    if args.svg:
        scores = rep.get("scores")
        if not scores:
            raise UsageError("report has no per-prompt scores to plot")
        s = np.array([r["score"] for r in scores])
        y = np.array([r["label"] for r in scores])
        emit_log_roc_svg({"diba": roc_curve(*split_by_label(s, y))}, args.svg)
    if args.csv:
        _write_text(args.csv, metrics_csv(rep))
    sys.stdout.write(_summary(rep))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="master seed (default 0)")
    common.add_argument("--folds", type=int, default=5, help="cross-validation folds")
    common.add_argument("--source", choices=("ft", "ref"), default="ft",
                        help="which sample group feeds the features")
    common.add_argument("--fpr-targets", type=_floats, default=list(DEFAULT_FPR_TARGETS),
                        help="comma-separated FPR targets")
    common.add_argument("--n-trees", type=int, default=100, help="forest size")
    common.add_argument("--f-max", type=float, default=0.001, help="upper FPR for pAUC/KS-tail")

    p = argparse.ArgumentParser(prog="diba", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="train the toy policy and emit traces")
    s.add_argument("--config", help="SimConfig JSON")
    s.add_argument("--out", required=True, help="traces JSONL (final epoch)")
    s.add_argument("--history", help="per-epoch CSV (default <out>.history.csv)")
    s.add_argument("--epochs", type=int)
    s.add_argument("--algo", choices=("grpo", "dapo"))
    s.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field")
    s.add_argument("-N", "--n-samples", type=int, default=8, help="responses per prompt")
    s.add_argument("--temperature", type=float, default=0.5, help="emission temperature")
    s.add_argument("--checkpoints", type=_ints, help="epochs to also emit, e.g. 0,7,15")
    s.add_argument("--checkpoint-dir")
    s.add_argument("--save-state", help="write simulator state (npz) for later rescoring")
    s.set_defaults(func=cmd_simulate)

    a = sub.add_parser("attack", parents=[common], help="cross-validated DIBA attack")
    a.add_argument("traces", help="traces JSONL or features CSV")
    a.add_argument("--out", help="report JSON (default stdout)")
    a.add_argument("--feature-only", type=lambda t: t.split(","), help="restrict to these features")
    a.add_argument("--no-single-feature", action="store_true")
    a.add_argument("--no-hardness", action="store_true")
    a.add_argument("--hardness-tol", type=float, default=0.0)
    a.add_argument("--baselines", action="store_true", help="include the baseline block")
    a.add_argument("--baselines-on", choices=("reference", "ft-samples"), default="reference")
    a.add_argument("--features-csv")
    a.add_argument("--metrics-csv")
    a.add_argument("--svg", help="log-scale ROC plot")
    a.set_defaults(func=cmd_attack)

    b = sub.add_parser("baselines", parents=[common], help="memorization baselines")
    b.add_argument("traces")
    b.add_argument("--on", choices=("reference", "ft-samples"), default="reference")
    b.add_argument("--methods", type=lambda t: t.split(","))
    b.add_argument("--out")
    b.add_argument("--csv", help="per-prompt score table")
    b.set_defaults(func=cmd_baselines)

    d = sub.add_parser("defend", parents=[common], help="apply defenses and rerun the attack")
    d.add_argument("traces")
    d.add_argument("--ldp", type=_floats, help="relative noise scales, e.g. 0.05,0.1,0.2")
    d.add_argument("--mechanism", choices=("gaussian", "laplace"), default="gaussian")
    d.add_argument("--clip", type=float, default=float(np.sqrt(len(FEATURE_NAMES))),
                   help="norm bound on normalized features")
    d.add_argument("--delta", type=float, default=1e-5)
    d.add_argument("--noise-reference", choices=NOISE_REFERENCES, default="range")
    d.add_argument("--perturb", type=_floats, help="perturbation strengths, e.g. 0,0.02,0.05")
    d.add_argument("--command", help="external text transform (stdin -> stdout)")
    d.add_argument("--state", help="simulator state npz used to rescore transformed text")
    d.add_argument("--out")
    d.set_defaults(func=cmd_defend)

    t = sub.add_parser("transfer", parents=[common], help="fit on one set, score another")
    t.add_argument("--train", nargs="+", required=True)
    t.add_argument("--eval", nargs="+", required=True)
    t.add_argument("--out")
    t.set_defaults(func=cmd_transfer)

    r = sub.add_parser("report", parents=[common], help="summarize or re-render a report")
    r.add_argument("report")
    r.add_argument("--svg")
    r.add_argument("--csv")
    r.add_argument("--validate", action="store_true", help="check against the shipped schema")
    r.set_defaults(func=cmd_report)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.folds < 2:
            raise UsageError("--folds must be >= 2")
        return args.func(args)
    except InsufficientDataError as exc:
        print(f"diba: insufficient data: {exc}", file=sys.stderr)
        return EXIT_INSUFFICIENT
    except (TraceIOError, OSError, subprocess.SubprocessError) as exc:
        print(f"diba: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (TraceError, ValueError) as exc:
        print(f"diba: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
