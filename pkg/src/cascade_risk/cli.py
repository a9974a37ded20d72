"""Command-line entry point: ``cascade-risk <subcommand> ...``.

Exit codes: 0 success, 2 configuration error, 3 dispatch solver failure
or non-convergence, 4 cascade non-termination.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .cascade_sim import CascadeConfig, CascadeNonTermination, simulate_cascade
from .dispatch import DispatchError, proportional_dispatch, solve_scdcopf, write_dispatch
from .grid_model import CaseParseError, CaseValidationError, adjust_limits_for_feasibility, load_case, scale_load
from .harness import ConfigError, ExperimentConfig, SweepError, resolve_case_path, run_sweep
from .risk_mc import (
    POLISH_BINS,
    RTS_BINS,
    build_outage_model,
    choose_max_k,
    exhaustive_risk,
    risk_csv,
    run_monte_carlo,
)

EXIT_CONFIG = 2
EXIT_SOLVER = 3
EXIT_CASCADE = 4


def parse_levels(text: str) -> tuple[int, ...]:
    """``A:B`` (inclusive), ``A:B:step`` or a comma list of integer percents."""
    try:
        if ":" in text:
            parts = [int(p) for p in text.split(":")]
            if len(parts) == 2:
                a, b, step = parts[0], parts[1], 1
            elif len(parts) == 3:
                a, b, step = parts
            else:
                raise ValueError
            levels = list(range(a, b + 1, step))
            if levels and levels[-1] != b:
                levels.append(b)
            return tuple(levels)
        return tuple(int(p) for p in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad level spec {text!r}") from None


def parse_bins(text: str) -> tuple[float, ...]:
    named = {"rts": RTS_BINS, "polish": POLISH_BINS}
    if text in named:
        return named[text]
    try:
        return tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad bin spec {text!r}") from None


def parse_level(text: str) -> int:
    try:
        return int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"load levels are integer percentages, got {text!r}") from None


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--case", default="rts96", help="case file path or builtin name (rts96, polish)")
    p.add_argument("--adjust-limits", action="store_true", help="raise ratings to 1.05x worst n-1 flow at 110%% load")
    p.add_argument("--out", help="output file or directory")


def _cascade_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--trip-threshold", choices=["short", "long"], default="short")
    p.add_argument("--ramp-limit", type=float, default=float("inf"), help="MW per generator per tier")
    p.add_argument("--rebalance", choices=["min_shed", "pro_rata"], default="min_shed")
    p.add_argument("--max-tiers", type=int, default=200)


def _dispatch_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--policy", choices=["scdcopf", "proportional"], default="scdcopf")
    p.add_argument("--anchor", type=parse_level, default=None, help="anchor level for proportional dispatch")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cascade-risk", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("dispatch", help="n-1 secure dispatch at one load level")
    _common(p)
    _dispatch_args(p)
    p.add_argument("--level", type=parse_level, default=100)

    p = sub.add_parser("cascade", help="simulate one contingency")
    _common(p)
    _dispatch_args(p)
    _cascade_args(p)
    p.add_argument("--level", type=parse_level, default=100)
    p.add_argument("--branches", required=True, help="comma list of 0-based branch indices")
    p.add_argument("--events", action="store_true", help="print the per-tier event log")

    for name, helptext in (("mc", "Monte Carlo risk at one level"), ("sweep", "risk across load levels")):
        p = sub.add_parser(name, help=helptext)
        _common(p)
        _dispatch_args(p)
        _cascade_args(p)
        if name == "mc":
            p.add_argument("--level", type=parse_level, default=100)
        else:
            p.add_argument("--levels", type=parse_levels, default=parse_levels("50:119"))
        p.add_argument("--iterations", type=int, default=100_000)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--workers", type=int, default=1)
        p.add_argument("--bins", type=parse_bins, default=RTS_BINS)
        p.add_argument("--simulate-single", action="store_true", help="simulate single-branch draws too")

    p = sub.add_parser("oracle", help="exact risk by enumerating outage sets")
    _common(p)
    _dispatch_args(p)
    _cascade_args(p)
    p.add_argument("--level", type=parse_level, default=100)
    p.add_argument("--max-k", type=int, default=None, help="highest outage order (default: auto)")
    p.add_argument("--bins", type=parse_bins, default=RTS_BINS)
    p.add_argument("--probability-form", choices=["full", "product_only"], default="full")
    p.add_argument("--simulate-single", action="store_true")
    return parser


def _cascade_config(args) -> CascadeConfig:
    return CascadeConfig(
        trip_threshold=args.trip_threshold,
        gen_ramp_limit=args.ramp_limit,
        rebalance=args.rebalance,
        max_tiers=args.max_tiers,
        record_events=getattr(args, "events", False),
    )


def _case(args):
    case = load_case(resolve_case_path(args.case))
    if args.adjust_limits:
        case = adjust_limits_for_feasibility(case)
    return case


def _dispatch(case, args, level):
    if args.policy == "scdcopf":
        return solve_scdcopf(scale_load(case, level / 100))
    anchor = args.anchor if args.anchor is not None else level
    if anchor < level:
        raise ConfigError(f"anchor level {anchor} below requested level {level}")
    return proportional_dispatch(solve_scdcopf(scale_load(case, anchor / 100)), level / 100)


def _emit(text: str, out) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _run(args) -> int:
    if args.command == "sweep":
        config = ExperimentConfig(
            case_path=args.case,
            load_levels=args.levels,
            dispatch_policy=args.policy,
            anchor_level=args.anchor,
            n_iterations=args.iterations,
            master_seed=args.seed,
            bins=args.bins,
            workers=args.workers,
            cascade=_cascade_config(args),
            output_dir=args.out or "sweep_out",
            adjust_limits=args.adjust_limits,
            simulate_single_outages=args.simulate_single,
        )
        result = run_sweep(config)
        for level, r in sorted(result.levels.items()):
            print(f"{level:4d}%  risk {r.risk.expected_blackout_mw:.6g} MW  shed {r.shed_total:.3g} MW")
        print(f"outputs in {config.output_dir}")
        return 0

    case = _case(args)
    level = args.level
    scaled = scale_load(case, level / 100)
    sol = _dispatch(case, args, level)
    if args.command == "dispatch":
        _emit(write_dispatch(sol, scaled), args.out)
        return 0
    if args.command == "cascade":
        ids = [int(v) for v in args.branches.split(",") if v.strip()]
        res = simulate_cascade(scaled, sol, ids, _cascade_config(args))
        if args.events:
            sys.stdout.write(res.event_log())
        tripped = " ".join(f"{t}:{k}" for t, k in res.trip_sequence)
        print(f"blackout_mw {res.blackout_mw!r}\ntiers {res.tiers}\nislands {res.final_islands}\ntrips {tripped}")
        return 0
    model = build_outage_model(scaled)
    if args.command == "mc":
        if args.iterations < 1:
            raise ConfigError("--iterations must be >= 1")
        est = run_monte_carlo(
            scaled, sol, model, args.iterations, args.seed, args.bins, _cascade_config(args),
            workers=args.workers, simulate_single_outages=args.simulate_single,
        )
        _emit(risk_csv({level: est}), args.out)
        return 0
    if args.command == "oracle":
        max_k = args.max_k if args.max_k is not None else choose_max_k(model)
        est = exhaustive_risk(
            scaled, sol, model, max_k, args.bins, _cascade_config(args),
            probability_form=args.probability_form, simulate_single_outages=args.simulate_single,
        )
        _emit(risk_csv({level: est}), args.out)
        print(f"# max_k {max_k}, unenumerated mass {est.unenumerated_mass:.3e}", file=sys.stderr)
        return 0
    raise ConfigError(f"unknown command {args.command}")


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) and EXIT_CONFIG
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s"
    )
    try:
        return _run(args)
    except (ConfigError, CaseParseError, CaseValidationError, FileNotFoundError, ValueError, OverflowError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SweepError as exc:
        print(f"error: {exc}", file=sys.stderr)
        if isinstance(exc.__cause__, CascadeNonTermination):
            return EXIT_CASCADE
        return EXIT_SOLVER
    except DispatchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except CascadeNonTermination as exc:
        print(f"error: {exc} (contingency {list(exc.contingency)})", file=sys.stderr)
        return EXIT_CASCADE


if __name__ == "__main__":
    sys.exit(main())
