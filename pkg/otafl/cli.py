"""Command-line interface: optimize | train | bounds | sweep | oracle.

Exit codes: 0 ok, 1 config error, 2 solver or run failure, 3 bound violation.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Sequence

from otafl.artifacts import (SOLVER_FILE, load_traces, write_json, write_means, write_report,
                             write_trace)
from otafl.bounds import BoundInputs, verify_lemma1, verify_lemma2
from otafl.errors import ConfigError, InvalidArgumentError, SolverFailure
from otafl.experiment import Experiment, build_experiment
from otafl.logs import configure_logging
from otafl.optimizer import case2_qmax_zero_floor, oracle_Z, solve_Z
from otafl.settings import (ExperimentConfig, describe_schema, load_config, max_workers,
                            parse_config)
from otafl.sweep import make_jobs, sweep
from otafl.trainer import paired_sign_test

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_SOLVER = 2
EXIT_VIOLATION = 3
ORACLE_MAX_DEVICES = 3


def banner(title: str) -> None:
    print("=" * 70)
    print(title)
    print("=" * 70)


def _overrides(pairs: Sequence[str]) -> dict[str, str]:
    out = {}
    for pair in pairs:
        key, sep, value = pair.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        out[key.strip()] = value
    return out


def _config(args: argparse.Namespace) -> ExperimentConfig:
    overrides = _overrides(args.set or [])
    if args.strategy:
        overrides["strategy"] = args.strategy
    if args.config:
        return load_config(args.config, overrides)
    return parse_config("", overrides)


def _out_dir(args: argparse.Namespace, config: ExperimentConfig) -> Path:
    return Path(args.out) if getattr(args, "out", None) else config.output_path()


def _solver_document(exp: Experiment) -> dict:
    return {
        "fingerprint": exp.config.fingerprint(),
        "config": exp.config.to_dict(),
        "channel": exp.chan.to_dict(),
        "artifacts": exp.artifacts.to_dict(),
        "plans": {label: plan.to_dict() for label, plan in exp.plans.items()},
    }


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_optimize(args: argparse.Namespace) -> int:
    config = _config(args)
    banner(f"OPTIMIZE: Case {config.case}, K={config.num_devices}, task={config.task}")
    exp = build_experiment(config)
    art = exp.artifacts
    plan = exp.primary_plan
    print(f"Z          = {art.Z:.12g}")
    print(f"r*         = {art.r_star:.12g}  ({art.iterations} bisection steps)")
    print(f"sum h b*   = {plan.effective_gain(exp.chan):.6g}")
    print(f"a          = {plan.a:.6g}")
    prov = plan.provenance
    if config.case == "I":
        print(f"S          = {prov.S:.6g}")
    else:
        print(f"s = q_max  = {prov.s:.6g}")
        print(f"eps        = {prov.eps:.6g}")
        print(f"eps floor  = {case2_qmax_zero_floor(exp.chan, exp.b_max, exp.task, artifacts=art):.6g}"
              "  (q_max = 0)")
    if args.oracle:
        _print_oracle(exp, args.grid)
    path = write_json(_out_dir(args, config) / SOLVER_FILE, _solver_document(exp))
    print(f"\nArtifacts: {path.resolve()}")
    return EXIT_OK


def _print_oracle(exp: Experiment, grid: int) -> None:
    if exp.chan.num_devices > ORACLE_MAX_DEVICES:
        print(f"[SKIP] oracle - K={exp.chan.num_devices} exceeds {ORACLE_MAX_DEVICES}")
        return
    ref = oracle_Z(exp.chan, exp.b_max, grid)
    rel = abs(exp.artifacts.Z - ref) / ref
    print(f"oracle Z   = {ref:.12g}  (grid {grid}/axis, relative difference {rel:.3e})")


def cmd_oracle(args: argparse.Namespace) -> int:
    config = _config(args)
    banner(f"ORACLE: K={config.num_devices}, grid {args.grid}/axis")
    if config.num_devices > ORACLE_MAX_DEVICES:
        raise ConfigError(f"the grid oracle handles at most {ORACLE_MAX_DEVICES} devices",
                          key="num_devices")
    exp = build_experiment(config)
    solved = solve_Z(exp.chan, exp.b_max)
    ref = oracle_Z(exp.chan, exp.b_max, args.grid)
    rel = abs(solved.Z - ref) / ref
    print(f"solve_Z    = {solved.Z:.12g}")
    print(f"oracle_Z   = {ref:.12g}")
    print(f"relative   = {rel:.3e}")
    return EXIT_OK


def _run_and_write(config: ExperimentConfig, out_dir: Path, all_cases: bool,
                   workers: int) -> tuple[dict, int]:
    jobs = make_jobs([config], all_cases=all_cases)
    print(f"Runs: {len(jobs)} ({len(config.seeds)} seeds), workers: {workers}\n")
    result = sweep(jobs, workers=workers)
    groups = result.by_group(jobs)
    for traces in groups.values():
        for trace in traces:
            write_trace(out_dir, trace)
    if groups:
        write_means(out_dir, groups)
    write_json(out_dir / SOLVER_FILE, _solver_document(build_experiment(config, all_cases)))
    return groups, len(result.failures)


def cmd_train(args: argparse.Namespace) -> int:
    config = _config(args)
    out_dir = _out_dir(args, config)
    banner(f"TRAIN: Case {config.case}, strategies {', '.join(config.strategy)}")
    groups, failed = _run_and_write(config, out_dir, False, args.workers)
    _print_summary(groups, failed, out_dir)
    return EXIT_SOLVER if failed else EXIT_OK


def cmd_sweep(args: argparse.Namespace) -> int:
    """Every applicable plan and strategy; paired comparisons of final losses."""
    config = _config(args)
    out_dir = _out_dir(args, config)
    banner("SWEEP: plans x strategies x seeds")
    groups, failed = _run_and_write(config, out_dir, True, args.workers)

    print("\n" + "=" * 70)
    print("PAIRED COMPARISONS (final loss, one-sided sign test)")
    print("=" * 70)
    comparisons = []
    for group, traces in sorted(groups.items()):
        plan, strategy = group.split("/")
        pairs = []
        if strategy == "normalized":
            pairs = [g for g in groups if g.startswith(f"{plan}/") and g != group]
            if not plan.endswith("-unoptimized"):
                pairs += [g for g in groups if g == f"{plan}-unoptimized/{strategy}"]
        for other in sorted(pairs):
            mine = {tr.seed: tr.final_loss for tr in traces}
            theirs = {tr.seed: tr.final_loss for tr in groups[other]}
            common = sorted(set(mine) & set(theirs))
            test = paired_sign_test([mine[s] for s in common], [theirs[s] for s in common])
            comparisons.append({"better": group, "than": other, "wins": test.wins,
                                "losses": test.losses, "ties": test.ties,
                                "p_value": test.p_value})
            tag = "[OK]" if test.significant() else "[--]"
            print(f"{tag} {group} < {other}: {test.wins}/{test.wins + test.losses} "
                  f"p={test.p_value:.3g}")
    write_json(out_dir / "comparison.json", {"comparisons": comparisons})
    _print_summary(groups, failed, out_dir)
    return EXIT_SOLVER if failed else EXIT_OK


def _print_summary(groups: dict, failed: int, out_dir: Path) -> None:
    print("\n" + "=" * 70)
    print("SUMMARY")
    print("=" * 70)
    for group, traces in sorted(groups.items()):
        mean_final = sum(tr.final_loss for tr in traces) / len(traces)
        print(f"  {group:<40} seeds={len(traces):<4} mean final loss={mean_final:.6g}")
    print(f"  Failed runs:           {failed}")
    print(f"  Output:                {out_dir.resolve()}")
    print("=" * 70)


def cmd_bounds(args: argparse.Namespace) -> int:
    config = _config(args)
    if config.channel_mode != "static":
        raise ConfigError("bounds assume a static channel", key="channel_mode")
    trace_dir = Path(args.traces) if args.traces else _out_dir(args, config)
    groups = load_traces(trace_dir, fingerprint=config.fingerprint())
    if not groups:
        raise ConfigError(f"no traces found under {trace_dir}")
    banner(f"BOUNDS: {sum(len(v) for v in groups.values())} traces from {trace_dir}")

    exp = build_experiment(config)
    labels = {g.split("/")[0] for g in groups}
    if not labels <= set(exp.plans):
        exp = build_experiment(config, True)
    out_dir = _out_dir(args, config)
    violated = False
    for group, traces in sorted(groups.items()):
        label, strategy = group.split("/")
        if strategy != "normalized" or config.batch_size > 0:
            print(f"[SKIP] {group} - bounds cover full-gradient normalized aggregation only")
            continue
        plan = exp.plans[label]
        inputs = BoundInputs.from_plan(plan, exp.chan, exp.task, traces[0].rounds)
        try:
            if plan.eta.kind == "power":
                report = verify_lemma1(traces, inputs)
            else:
                report = verify_lemma2(traces, inputs)
        except InvalidArgumentError as exc:
            violated = True
            print(f"[FAIL] {group} - {exc}")
            continue
        write_report(out_dir, f"{label}-{strategy}-{report.lemma}", report)
        suffix = " (conditional on angles away from the optimum)" if report.details["conditional"] else ""
        if report.passed:
            print(f"[OK] {group} - {report.lemma} bound holds at {report.T.size} horizons, "
                  f"min margin {float(report.margin.min()):.4g}{suffix}")
        else:
            violated = True
            print(f"[FAIL] {group} - {len(report.violations)} violations, "
                  f"first at T={report.violations[0]}{suffix}")
        measured = report.details["theta_measured_max"]
        print(f"       theta used {report.theta_used:.4g}, measured max "
              f"{'n/a' if measured is None else format(measured, '.4g')}, "
              f"{report.details['theta_breaches']} of {report.details['angle_rounds']} "
              f"rounds above theta_th")
    return EXIT_VIOLATION if violated else EXIT_OK


def cmd_schema(args: argparse.Namespace) -> int:
    sys.stdout.write(describe_schema())
    return EXIT_OK


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="otafl", description="Over-the-air federated learning simulator and optimizer")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    parser.add_argument("-q", "--quiet", action="store_true", help="warnings only")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override one config key (repeatable)")
        p.add_argument("--strategy", help="comma-separated strategies, overrides the config")
        p.add_argument("--out", help="output directory (default: config output_dir or $OTAFL_OUTPUT_ROOT)")

    p = sub.add_parser("optimize", help="solve Z and the Case I/II parameters")
    common(p)
    p.add_argument("--oracle", action="store_true", help="compare Z with a grid search (K <= 3)")
    p.add_argument("--grid", type=int, default=200, help="oracle grid points per axis")
    p.set_defaults(func=cmd_optimize)

    for name, func, text in (("train", cmd_train, "run the configured case over all seeds"),
                             ("sweep", cmd_sweep, "run every plan and strategy, compare them")):
        p = sub.add_parser(name, help=text)
        common(p)
        p.add_argument("--workers", type=int, default=max_workers(), help="worker processes")
        p.set_defaults(func=func)

    p = sub.add_parser("bounds", help="check saved traces against the convergence bounds")
    common(p)
    p.add_argument("--traces", help="directory with traces (default: the output directory)")
    p.set_defaults(func=cmd_bounds)

    p = sub.add_parser("oracle", help="compare solve_Z with the grid oracle")
    common(p)
    p.add_argument("--grid", type=int, default=200, help="grid points per axis")
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("schema", help="print every config key with its default")
    p.set_defaults(func=cmd_schema)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(1 if args.verbose else -1 if args.quiet else 0)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InvalidArgumentError as exc:
        print(f"invalid setting: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SolverFailure as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
