#!/usr/bin/env python3
"""
aofusion - Main Entry Point
Fits constrained, linearly coupled matrix/CP/PARAFAC2 models with AO-ADMM
"""

import argparse
import logging
import sys
from pathlib import Path

# Add parent directory to path for imports
sys.path.insert(0, str(Path(__file__).parent.parent))

from aofusion.config.analyzer import RunConfig, load_run_config
from aofusion.config.parser import ConfigError
from aofusion.driver.ao import AllStartsDivergedError, DegenerateDatasetError, OuterSettings, multi_start_fit
from aofusion.driver.bench import run_bench
from aofusion.metrics.scores import fit_percent, fms, parafac2_residual
from aofusion.model.spec import DecompositionKind, MODE_B
from aofusion.model.validator import ModelValidationError
from aofusion.runtime.serialization import (
    BundleFormatError, read_datasets, read_factors, write_datasets, write_factors, write_json, write_trace,
)
from aofusion.synth.generators import EXPERIMENTS, UnknownExperimentError, make_problem


def add_solver_flags(parser: argparse.ArgumentParser):
    parser.add_argument("--seed", type=int, default=None, help="Base seed (start i uses seed + i)")
    parser.add_argument("--threads", type=int, default=None, help="Parallel starts or replicates")
    parser.add_argument("--out", type=str, default=None, help="Output directory")
    parser.add_argument("--starts", type=int, default=None, help="Number of random starts")
    parser.add_argument("--max-outer", type=int, default=None, help="Outer iteration budget")
    parser.add_argument("--inner-tol", type=float, default=None, help="Inner ADMM absolute and relative tolerance")
    parser.add_argument("--outer-abs-tol", type=float, default=None, help="Outer absolute tolerance")
    parser.add_argument("--outer-rel-tol", type=float, default=None, help="Outer relative tolerance")
    parser.add_argument("-v", "--verbose", action="store_true", help="Verbose output")


def apply_overrides(settings: OuterSettings, args) -> OuterSettings:
    """Copy of settings with the command-line flags applied"""
    options = settings.as_dict()
    admm = settings.admm
    flags = {
        "seed": args.seed, "threads": args.threads, "n_starts": args.starts, "max_outer_iters": args.max_outer,
        "outer_abs_tol": args.outer_abs_tol, "outer_rel_tol": args.outer_rel_tol,
    }
    options.update({k: v for k, v in flags.items() if v is not None})
    if args.inner_tol is not None:
        admm = type(admm)(
            abs_tol=args.inner_tol, rel_tol=args.inner_tol, max_inner_iters=admm.max_inner_iters,
            projection_max_rounds=admm.projection_max_rounds, projection_tol=admm.projection_tol,
            weighted_projection=admm.weighted_projection,
        )
    for key in ("inner_abs_tol", "inner_rel_tol", "max_inner_iters"):
        options.pop(key)
    return OuterSettings(admm=admm, **options)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="AO-ADMM for constrained, linearly coupled matrix, CP and PARAFAC2 factorizations"
    )
    commands = parser.add_subparsers(dest="command", required=True)

    run = commands.add_parser("run", help="Fit the model described by a config file")
    run.add_argument("config", type=str, help="Path to a run config (.cfg)")
    add_solver_flags(run)

    bench = commands.add_parser("bench", help="Run replicates of a synthetic experiment")
    bench.add_argument("experiment", type=str, help=f"One of {', '.join(EXPERIMENTS)}")
    bench.add_argument("--replicates", type=int, default=20, help="Replicates per arm (default: 20)")
    add_solver_flags(bench)

    metrics = commands.add_parser("metrics", help="Compare fitted factors with a ground truth")
    metrics.add_argument("factors", type=str, help="Fitted factors bundle (factors.bin)")
    metrics.add_argument("truth", type=str, help="Ground-truth factors bundle (truth.bin)")
    metrics.add_argument("--data", type=str, default=None, help="Datasets bundle for fit percentages")
    metrics.add_argument("-v", "--verbose", action="store_true", help="Verbose output")

    gen = commands.add_parser("gen", help="Write a synthetic experiment's data and truth to disk")
    gen.add_argument("experiment", type=str, help=f"One of {', '.join(EXPERIMENTS)}")
    gen.add_argument("--seed", type=int, default=0, help="Generator seed")
    gen.add_argument("--out", type=str, default=None, help="Output directory")
    gen.add_argument("-v", "--verbose", action="store_true", help="Verbose output")
    return parser


def cmd_run(args) -> int:
    if args.verbose:
        print("==> Reading config...")
    config: RunConfig = load_run_config(args.config)
    settings = apply_overrides(config.settings, args)
    output = Path(args.out) if args.out else config.output

    if args.verbose:
        print("==> Building problem...")
    model, truth = config.resolve()
    names = [d.name for d in model.decompositions]

    if args.verbose:
        print(f"==> Fitting ({settings.n_starts} starts, {settings.threads} threads)...")
    result = multi_start_fit(model, settings)
    best = result.best

    if args.verbose:
        print(f"==> Writing results to {output}...")
    output.mkdir(parents=True, exist_ok=True)
    write_factors(output / "factors.bin", best.factors, names)
    write_trace(output / "trace.csv", model, best.records)
    if truth is not None:
        write_factors(output / "truth.bin", truth, names)
    if config.is_synthetic:
        write_datasets(output / "data.bin", model.datasets, names)

    final = best.final
    summary = {
        "status": best.status,
        "message": best.message,
        "best_start": best.start_id,
        "seed": best.seed,
        "schedule": best.schedule,
        "iterations": final.iteration,
        "function_value": final.function_value,
        "fits": dict(zip(names, final.fits)),
        "parafac2_residuals": {names[d]: r for d, r in final.parafac2_residuals.items()},
        "coupling_residuals": final.coupling_residuals,
        "feasibility_gap": final.feasibility_gap,
        "infeasible_modes": best.infeasible,
        "seconds": final.seconds,
        "settings": settings.as_dict(),
        "starts": [
            {"start": r.start_id, "seed": r.seed, "status": r.status,
             "function_value": r.function_value, "iterations": r.final.iteration if r.records else 0}
            for r in result.reports
        ],
    }
    if truth is not None:
        summary["fms"] = fms(truth, best.factors, model).as_dict()
    write_json(output / "metrics.json", summary)

    print(f"Best start {best.start_id}: {best.status}, f = {final.function_value:.6e}, "
          f"fits = {', '.join(f'{n} {f:.2f}%' for n, f in zip(names, final.fits))}")
    if truth is not None:
        print(f"FMS = {summary['fms']['total']:.4f}")
    return 0


def cmd_bench(args) -> int:
    settings = apply_overrides(OuterSettings(), args)
    output = Path(args.out) if args.out else Path("runs") / f"bench_{args.experiment}"
    if args.verbose:
        print(f"==> Benchmarking {args.experiment} ({args.replicates} replicates)...")
    replicates, summary = run_bench(args.experiment, args.replicates, settings.seed, settings)

    output.mkdir(parents=True, exist_ok=True)
    replicates.to_csv(output / "replicates.csv", index=False)
    summary.to_csv(output / "summary.csv", index=False)
    write_json(output / "summary.json", {"experiment": args.experiment, "rows": summary.to_dict(orient="records")})
    print(summary.to_string(index=False))
    return 0


def cmd_metrics(args) -> int:
    factors, names = read_factors(args.factors)
    truth, _ = read_factors(args.truth)
    score = fms(truth, factors, names=names)

    print(f"FMS total: {score.total:.6f}")
    for name, value in score.per_decomposition.items():
        print(f"  {name}: {value:.6f}")
    for key, value in score.per_mode.items():
        print(f"  {key}: {value:.6f}")
    for name, decomposition in zip(names, factors):
        if decomposition.kind == DecompositionKind.PARAFAC2:
            print(f"PARAFAC2 residual {name}: {parafac2_residual(decomposition[MODE_B]):.3e}")
    if args.data:
        datasets, data_names = read_datasets(args.data)
        for name, data, decomposition in zip(data_names, datasets, factors):
            print(f"Fit {name}: {fit_percent(data, decomposition.reconstruct()):.4f}%")
    return 0


def cmd_gen(args) -> int:
    problem = make_problem(args.experiment, args.seed)
    output = Path(args.out) if args.out else Path("data") / f"{args.experiment}_seed{args.seed}"
    names = [d.name for d in problem.model.decompositions]
    output.mkdir(parents=True, exist_ok=True)
    write_datasets(output / "data.bin", problem.datasets, names)
    write_factors(output / "truth.bin", problem.truth, names)
    extra = {"experiment": problem.name, "seed": problem.seed, "names": names}
    if problem.labels is not None:
        extra["labels"] = problem.labels
    if problem.sharing is not None:
        extra["sharing"] = problem.sharing
    write_json(output / "problem.json", extra)
    print(f"Wrote {args.experiment} (seed {args.seed}) to {output}")
    return 0


COMMANDS = {"run": cmd_run, "bench": cmd_bench, "metrics": cmd_metrics, "gen": cmd_gen}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return COMMANDS[args.command](args)
    except ConfigError as e:
        print(f"Config error: {e}", file=sys.stderr)
    except ModelValidationError as e:
        print(f"Validation error: {e}", file=sys.stderr)
    except AllStartsDivergedError as e:
        print(f"Error: {e}", file=sys.stderr)
    except (DegenerateDatasetError, UnknownExperimentError, BundleFormatError) as e:
        print(f"Error: {e}", file=sys.stderr)
    except FileNotFoundError as e:
        print(f"Error: File '{e.filename}' not found", file=sys.stderr)
    except ValueError as e:
        print(f"Error: {e}", file=sys.stderr)
    return 1


if __name__ == "__main__":
    sys.exit(main())
