"""Command-line front end for reproducible design, simulation, ingestion,
and concentration-probe runs.

Exit codes: 0 success, 1 input error, 2 degraded success (non-converged
solve or partial simulation failures).  Every command that writes to an
output directory also writes a provenance record with the fully resolved
configuration and seed.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

from . import __version__
from .design import Objective, kw_certificate, solve_design
from .ingest import fit_semisynthetic, load_csv, make_threshold_policy, subsample_actions
from .model import (
    FIXTURE_BUILDERS,
    load_fixture,
    save_environment,
    save_policy,
)
from .sim import (
    SimConfig,
    concentration_probe,
    empirical_regret,
    mse_experiment,
    write_report_csv,
)

SEED_ENV_VAR = "PE_DESIGN_SEED"


class CliError(Exception):
    """Input error: reported with exit code 1."""


def _resolve_seed(value) -> int:
    if value is not None:
        return int(value)
    env_value = os.environ.get(SEED_ENV_VAR)
    if env_value is not None:
        return int(env_value)
    return 0


def _write_provenance(out_dir: Path, command: str, config: dict, seed: int | None) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    record = {
        "tool": "pedesign",
        "version": __version__,
        "command": command,
        "seed": seed,
        "config": config,
    }
    (out_dir / "provenance.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")


def _load_env_and_policy(args, policy_required: bool):
    if getattr(args, "fixture", None):
        return load_fixture(args.fixture)
    if getattr(args, "env", None):
        from .model import load_environment, load_policy

        env = load_environment(args.env)
        policy_path = getattr(args, "policy", None)
        if policy_path:
            return env, load_policy(policy_path)
        if policy_required:
            raise CliError("this objective needs a target policy: pass --policy")
        return env, None
    raise CliError("pass either --fixture or --env")


def cmd_solve(args) -> int:
    env, pi = _load_env_and_policy(args, policy_required=args.objective == "pe")
    objective = Objective(args.objective, heteroscedastic=args.objective == "pe")
    variances = env.variances() if objective.heteroscedastic else None
    result = solve_design(
        objective,
        env.features,
        variances,
        pi if args.objective == "pe" else None,
        epsilon=args.epsilon,
        max_iter=args.max_iter,
    )
    certificate = kw_certificate(result.weights, env.features, variances)
    payload = {
        "objective": args.objective,
        "weights": result.weights.probs.tolist(),
        "gap": result.gap,
        "iterations": result.iterations,
        "converged": result.converged,
        "kw": {
            "weighted_avg_norm": certificate.weighted_avg_norm,
            "max_norm": certificate.max_norm,
            "support_size": certificate.support_size,
            "trace_inverse": certificate.trace_inverse,
        },
    }
    text = json.dumps(payload, indent=2) + "\n"
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "design.json").write_text(text)
        config = {k: v for k, v in vars(args).items() if k != "func"}
        _write_provenance(out_dir, "solve", config, None)
    sys.stdout.write(text)
    return 0 if result.converged else 2


def cmd_simulate(args) -> int:
    config_path = Path(args.config)
    if not config_path.exists():
        raise CliError(f"config file not found: {config_path}")
    try:
        payload = json.loads(config_path.read_text())
    except json.JSONDecodeError as exc:
        raise CliError(f"malformed config: {exc}") from exc
    if args.seed is not None:
        payload["master_seed"] = int(args.seed)
    if args.workers is not None:
        payload["workers"] = int(args.workers)
    try:
        cfg = SimConfig.from_dict(payload)
    except (KeyError, ValueError) as exc:
        raise CliError(f"invalid simulation config: {exc}") from exc

    report = mse_experiment(cfg)
    regret = empirical_regret(report) if cfg.compute_regret else None

    out_dir = Path(args.out or "sim-out")
    out_dir.mkdir(parents=True, exist_ok=True)
    write_report_csv(out_dir / "report.csv", report, regret)
    sidecar = {
        "config": cfg.to_dict(),
        "true_value": report.true_value,
        "errors": {
            f"{cell.agent}@{cell.n}": cell.error
            for cell in report.cells
            if cell.error is not None
        },
    }
    (out_dir / "report.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    _write_provenance(out_dir, "simulate", cfg.to_dict(), cfg.master_seed)
    print(f"wrote {out_dir / 'report.csv'}")
    return 2 if report.has_errors else 0


def cmd_ingest(args) -> int:
    feature_cols = [c.strip() for c in args.features.split(",") if c.strip()]
    if not feature_cols:
        raise CliError("no feature columns given")
    try:
        table = load_csv(args.csv, feature_cols, args.target, normalize=args.normalize)
        if args.subsample is not None:
            table = subsample_actions(table, args.subsample, _resolve_seed(args.seed))
        env = fit_semisynthetic(table, iters=args.iters)
        policy = make_threshold_policy(env, tau=args.tau, p_low=args.p_low)
    except (ValueError, FileNotFoundError) as exc:
        raise CliError(str(exc)) from exc

    out_dir = Path(args.out or "ingest-out")
    out_dir.mkdir(parents=True, exist_ok=True)
    save_environment(env, out_dir / "environment.json")
    save_policy(policy, out_dir / "policy.json")
    _write_provenance(
        out_dir,
        "ingest",
        {k: v for k, v in vars(args).items() if k != "func"},
        _resolve_seed(args.seed),
    )
    variances = env.variances()
    n_high = int((variances > args.tau).sum())
    print(
        f"ingested {table.n_rows} actions (dropped {table.n_dropped} rows): "
        f"d={env.dim}, A={env.n_actions}, variance range "
        f"[{variances.min():.4g}, {variances.max():.4g}], {n_high} above tau={args.tau:g}"
    )
    return 0


def cmd_probe(args) -> int:
    env, _ = _load_env_and_policy(args, policy_required=False)
    gammas = [int(g.strip()) for g in args.gammas.split(",") if g.strip()]
    if not gammas:
        raise CliError("no exploration lengths given")
    seed = _resolve_seed(args.seed)
    try:
        rows = concentration_probe(env, gammas, args.reps, seed)
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    out_dir = Path(args.out or "probe-out")
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "probe.csv", "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["gamma", "mean_error", "q90_error"])
        for row in rows:
            writer.writerow([row["gamma"], f"{row['mean_error']:.17g}", f"{row['q90_error']:.17g}"])
    _write_provenance(out_dir, "probe", {k: v for k, v in vars(args).items() if k != "func"}, seed)
    for row in rows:
        print(f"gamma={row['gamma']}: mean={row['mean_error']:.6g} q90={row['q90_error']:.6g}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pedesign",
        description="Optimal data collection for policy evaluation in heteroscedastic linear bandits",
    )
    parser.add_argument("--version", action="version", version=f"pedesign {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    fixtures = ", ".join(sorted(FIXTURE_BUILDERS))

    solve = sub.add_parser("solve", help="solve a design objective for an environment")
    solve.add_argument("--fixture", help=f"bundled fixture name ({fixtures})")
    solve.add_argument("--env", help="environment JSON file")
    solve.add_argument("--policy", help="policy JSON file (with --env)")
    solve.add_argument("--objective", required=True, choices=["pe", "a", "g", "d"])
    solve.add_argument("--epsilon", type=float, default=1e-7, help="duality-gap tolerance")
    solve.add_argument("--max-iter", type=int, default=100000, dest="max_iter")
    solve.add_argument("--out", help="output directory")
    solve.set_defaults(func=cmd_solve)

    simulate = sub.add_parser("simulate", help="run a Monte Carlo MSE/regret experiment")
    simulate.add_argument("config", help="simulation config JSON")
    simulate.add_argument("--seed", type=int, help="override the master seed")
    simulate.add_argument("--workers", type=int, help="parallel worker count")
    simulate.add_argument("--out", help="output directory")
    simulate.set_defaults(func=cmd_simulate)

    ingest = sub.add_parser("ingest", help="build a semi-synthetic environment from a CSV")
    ingest.add_argument("csv", help="input CSV path (header row required)")
    ingest.add_argument("--features", required=True, help="comma-separated feature columns")
    ingest.add_argument("--target", required=True, help="target column")
    ingest.add_argument("--tau", type=float, required=True, help="variance threshold")
    ingest.add_argument("--p-low", type=float, default=0.1, dest="p_low")
    ingest.add_argument("--subsample", type=int, help="subsample this many action rows")
    ingest.add_argument("--iters", type=int, default=2, help="alternating fit passes")
    ingest.add_argument("--normalize", action=argparse.BooleanOptionalAction, default=True)
    ingest.add_argument("--seed", type=int, help="subsample seed")
    ingest.add_argument("--out", help="output directory")
    ingest.set_defaults(func=cmd_ingest)

    probe = sub.add_parser("probe", help="covariance-estimate concentration probe")
    probe.add_argument("--fixture", help=f"bundled fixture name ({fixtures})")
    probe.add_argument("--env", help="environment JSON file")
    probe.add_argument("--policy", help="policy JSON file (with --env)")
    probe.add_argument("--gammas", default="200,400,800", help="comma-separated exploration lengths")
    probe.add_argument("--reps", type=int, default=200)
    probe.add_argument("--seed", type=int, help="probe seed")
    probe.add_argument("--out", help="output directory")
    probe.set_defaults(func=cmd_probe)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors; report them as input errors
        return 1 if exc.code not in (0, None) else 0
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (KeyError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run()
