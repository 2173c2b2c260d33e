"""``moshpit-lab`` command line entry point."""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from ..allreduce import BandwidthProfile, balance_partition
from ..core import FailureModel, GridConfig, Rng
from ..optimizer import (
    LogisticRegression,
    OptimizerConfig,
    Quadratic,
    RosenbrockLike,
    run_moshpit_sgd,
    theoretical_iteration_bound,
)
from .config import ConfigError, experiment_from_dict, load_yaml, sgd_from_dict
from .experiment import build_id, run_experiment, write_outputs
from .theory_suite import run_theory_suite, summary_lines

EXIT_OK, EXIT_FAILED, EXIT_CONFIG = 0, 1, 2


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not serializable: {type(obj).__name__}")


def dump_json(data) -> str:
    return json.dumps(data, indent=2, sort_keys=True, default=_json_default) + "\n"


def _cmd_average(args) -> int:
    cfg = experiment_from_dict(load_yaml(args.config), seed=args.seed, out=args.out, jobs=args.jobs)
    rows, records = run_experiment(cfg)
    paths = write_outputs(cfg, rows, records)
    for row in rows:
        print(f"{row.protocol:<18} N={row.N:<5} p={row.p:<6g} thr={row.threshold:<6g} rounds={row.mean_rounds:.3g}")
    print(f"wrote {paths['csv']}")
    return EXIT_OK


def _objective(settings, seed: int):
    if settings.objective == "quadratic":
        star = Rng(seed, "objective").stream("star").standard_normal(settings.dim)
        return Quadratic(settings.dim, settings.L, settings.mu, star)
    if settings.objective == "logistic":
        gen = Rng(seed, "objective").stream("data")
        return LogisticRegression.synthetic(gen, settings.samples, settings.dim, settings.reg)
    return RosenbrockLike(settings.dim, settings.b)


def _cmd_sgd(args) -> int:
    s = sgd_from_dict(load_yaml(args.config), seed=args.seed, out=args.out, jobs=args.jobs)
    try:
        cfg = OptimizerConfig(
            gamma=s.gamma,
            tau=s.tau,
            steps=s.steps,
            grid=GridConfig(s.M, s.d),
            sigma=s.sigma,
            n_peers=s.n_peers,
            failure=FailureModel(s.p),
            inner_rounds=s.inner_rounds,
            init_spread=s.init_spread,
            churn=s.churn,
        )
        objective = _objective(s, s.seed_base)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    runs = [run_moshpit_sgd(cfg, objective, Rng(s.seed_base, "sgd", seed)) for seed in range(s.seeds)]
    f_gap = np.mean([r.f_gap for r in runs], axis=0)
    V = np.mean([r.diagnostics.V for r in runs], axis=0)
    lines = ["step,mean_f_gap,mean_V,active"]
    for k, (gap, v) in enumerate(zip(f_gap, V)):
        lines.append("%d,%.6g,%.6g,%d" % (k, gap, v, runs[0].active_counts[k]))
    out = Path(s.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text("\n".join(lines) + "\n", encoding="utf-8")
    diags = [asdict(r.diagnostics) | {"V": None, "V_sync": None} for r in runs]
    try:
        bound = theoretical_iteration_bound(objective, cfg, runs[0].diagnostics, s.epsilon)
    except ValueError:
        bound = None
    meta = {
        "config": asdict(s),
        "build": build_id(),
        "final_f_gap": float(f_gap[-1]),
        "weighted_f_gap": float(np.mean([r.weighted_f_gap for r in runs])),
        "iteration_bound_order_units": bound,
        "diagnostics": diags,
    }
    out.with_suffix(".json").write_text(dump_json(meta), encoding="utf-8")
    print(f"final mean f - f* = {f_gap[-1]:.6g}; wrote {out}")
    return EXIT_OK


def _cmd_theory(args) -> int:
    data = load_yaml(args.config).get("theory", {}) if args.config else {}
    if not isinstance(data, dict):
        raise ConfigError("'theory' must be a mapping")
    quick = bool(data.get("quick", False)) or args.quick
    seed = args.seed if args.seed is not None else int(data.get("seed", 0))
    result = run_theory_suite(quick=quick, seed=seed)
    for line in summary_lines(result):
        print(line)
    out = args.out or data.get("out")
    if out:
        path = Path(out)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(dump_json(result), encoding="utf-8")
    return EXIT_OK if result["passed"] else EXIT_FAILED


def _cmd_balance(args) -> int:
    bandwidths = args.bandwidths
    if bandwidths is None:
        data = load_yaml(args.config).get("balance", {}) if args.config else {}
        bandwidths = data.get("bandwidths") if isinstance(data, dict) else None
    if not bandwidths:
        raise ConfigError("balance needs bandwidths (config 'balance.bandwidths' or --bandwidths)")
    try:
        profile = BandwidthProfile(tuple(float(b) for b in bandwidths))
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    weights, objective = balance_partition(profile)
    result = {"bandwidths": list(profile.b), "weights": list(weights.w), "objective": objective}
    text = dump_json(result)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    print(" ".join("%.6g" % w for w in weights.w))
    print("objective %.6g" % objective)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="moshpit-lab", description="Moshpit averaging simulation lab")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, func, help_text in (
        ("average", _cmd_average, "run an averaging benchmark matrix"),
        ("sgd", _cmd_sgd, "run Moshpit SGD on a synthetic objective"),
        ("theory", _cmd_theory, "run the theory oracle suite"),
        ("balance", _cmd_balance, "solve the bandwidth-aware partition"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=name in ("average", "sgd"), help="YAML config file")
        p.add_argument("--seed", type=int, default=None, help="seed base (overrides MOSHPIT_SEED and file)")
        p.add_argument("--out", default=None, help="output path")
        p.add_argument("--jobs", type=int, default=None, help="worker processes")
        p.set_defaults(func=func)
    sub.choices["theory"].add_argument("--quick", action="store_true", help="smaller sample sizes")
    sub.choices["balance"].add_argument("--bandwidths", type=float, nargs="+", default=None)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
