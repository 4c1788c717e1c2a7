"""Command-line entry point: secest <subcommand> --config FILE --out PREFIX [--seed N]."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .detect import alarm_rate, detect_statistics, learn_eta, precompute_subset_covariances
from .harness import (
    ConfigError,
    ExperimentConfig,
    clean_stream,
    export_report,
    resolve_system,
    run_constrained_sweep,
    run_estimation_experiment,
    run_roc,
)
from .kalman import riccati_fixed_point
from .process_model import generate_random_system, simulate


def _load(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc


def _experiment(cfg: dict, seed: int | None) -> ExperimentConfig:
    if seed is not None:
        cfg = {**cfg, "seeds": [seed]}
    return ExperimentConfig.from_dict(cfg)


def _write_json(path: str, obj) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def cmd_gen_system(cfg, args):
    try:
        q, N, k, n0 = (int(cfg[key]) for key in ("q", "N", "k", "n0"))
    except KeyError as exc:
        raise ConfigError(f"gen-system config is missing {exc}") from exc
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    try:
        model = generate_random_system(q, N, k, n0, seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    out = {**model.to_dict(), "steady_state": riccati_fixed_point(model).to_dict()}
    _write_json(args.out + "system.json", out)


def cmd_simulate(cfg, args):
    if "system" not in cfg:
        raise ConfigError("simulate needs a 'system' entry")
    try:
        model = resolve_system(cfg["system"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    horizon = int(cfg.get("horizon", 1000))
    if horizon < 1:
        raise ConfigError("horizon must be >= 1")
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    try:
        traj = simulate(model, horizon, seed=seed, x0=cfg.get("x0"))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    Path(args.out + "trajectory.csv").parent.mkdir(parents=True, exist_ok=True)
    traj.to_csv(args.out + "trajectory.csv")


def cmd_estimate(cfg, args):
    export_report(run_estimation_experiment(_experiment(cfg, args.seed)), args.out)


def cmd_sweep_xi(cfg, args):
    export_report(run_constrained_sweep(_experiment(cfg, args.seed)), args.out)


def cmd_roc(cfg, args):
    export_report(run_roc(_experiment(cfg, args.seed)), args.out)


def cmd_learn_eta(cfg, args):
    if "system" not in cfg:
        raise ConfigError("learn-eta needs a 'system' entry")
    model = resolve_system(cfg["system"])
    J = int(cfg.get("J", 10))
    alpha = float(cfg.get("alpha", 0.05))
    if not 0 < alpha <= 1 or J < 1:
        raise ConfigError("need 0 < alpha <= 1 and J >= 1")
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    horizon = int(cfg.get("horizon", 100_000))
    table = precompute_subset_covariances(model, horizon=int(cfg.get("table_horizon", 101_000)),
                                          seed=seed)
    stats, _ = detect_statistics(model, table, clean_stream(model, seed, 10, horizon), J)
    state = learn_eta(stats, alpha)
    val, _ = detect_statistics(model, table, clean_stream(model, seed, 11, horizon), J)
    _write_json(args.out + "eta.json", {
        "alpha": alpha,
        "J": J,
        "eta": state.eta,
        "validation_P_F": alarm_rate(val, state.eta),
        "table": table.to_dict(),
    })


COMMANDS = {
    "gen-system": cmd_gen_system,
    "simulate": cmd_simulate,
    "estimate": cmd_estimate,
    "sweep-xi": cmd_sweep_xi,
    "roc": cmd_roc,
    "learn-eta": cmd_learn_eta,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="secest", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON configuration file")
        p.add_argument("--out", default="./", help="output path prefix")
        p.add_argument("--seed", type=int, default=None, help="overrides the seed in the config")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        COMMANDS[args.command](_load(args.config), args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
