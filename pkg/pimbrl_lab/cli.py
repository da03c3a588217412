"""Command-line entry point: ``pimbrl run|eval|report|sweep|serve``."""

import argparse
import asyncio
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Dict, Optional, Sequence

import numpy as np

from pimbrl_lab import __version__
from pimbrl_lab.config import load_config
from pimbrl_lab.environments import ENVIRONMENT_REGISTRY
from pimbrl_lab.errors import ConfigurationError, PimbrlError
from pimbrl_lab.orchestrator import ALGORITHM_REGISTRY, evaluate_checkpoint, run_experiment

logger = logging.getLogger(__name__)

DEFAULT_LOG_LEVEL = "INFO"


def configure_logging() -> None:
    level = os.getenv("PIMBRL_LOG_LEVEL", DEFAULT_LOG_LEVEL).upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


def _parse_value(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def _run_overrides(args: argparse.Namespace) -> Dict[str, Any]:
    overrides: Dict[str, Any] = {
        "env.id": args.env,
        "algo": getattr(args, "algo", None),
        "seed": getattr(args, "seed", None),
        "loop.total_steps": args.steps,
        "model.rollout_length": getattr(args, "rollout_length", None),
        "model.threshold": getattr(args, "threshold", None),
        "loop.eval_every": getattr(args, "eval_every", None),
        "loop.eval_episodes": getattr(args, "eval_episodes", None),
        "loop.resume_from": getattr(args, "resume", None),
    }
    if getattr(args, "out", None) is not None:
        overrides["output_dir"] = str(args.out)
    for item in getattr(args, "set", None) or []:
        key, _, raw = item.partition("=")
        overrides[key] = _parse_value(raw)
    return overrides


def _cmd_run(args: argparse.Namespace) -> int:
    config = load_config(args.config, _run_overrides(args))
    artifacts = run_experiment(config)
    print(f"metrics: {artifacts.metrics_path}")
    print(f"checkpoint: {artifacts.checkpoint_dir}")
    return 0


def _cmd_eval(args: argparse.Namespace) -> int:
    stats = evaluate_checkpoint(args.checkpoint, args.episodes, args.seed)
    print(f"eval: {Path(args.checkpoint) / 'eval.csv'} ({len(stats.returns)} episodes)")
    return 0


def _cmd_report(args: argparse.Namespace) -> int:
    from pimbrl_lab import reports

    out = Path(args.out)
    if args.report == "curves":
        path = out if out.suffix == ".csv" else out / "curves.csv"
        reports.emit_curve_data(args.metrics, path)
        print(f"curves: {path}")
    elif args.report == "model-error":
        config, model = reports.load_checkpoint_model(args.checkpoint)
        held_out = reports.collect_random_transitions(
            model.env, args.steps, np.random.default_rng(args.seed)
        ).contents()
        reports.emit_model_error_report(
            model, held_out, reports.load_training_states(args.checkpoint), out, n_bins=args.bins
        )
        print(f"model-error: {out}")
    elif args.report == "model-compare":
        config = load_config(
            args.config, {"env.id": args.env, "seed": args.seed, "output_dir": str(out)}
        )
        comparison = reports.compare_models(
            config, args.steps, out, updates=args.updates, held_out_steps=args.held_out
        )
        print(f"model-compare: {out / 'model_compare.csv'} (threshold {comparison.threshold:g})")
    elif args.report == "rollout-snapshots":
        config, model = reports.load_checkpoint_model(args.checkpoint)
        path = out / f"rollout_snapshots_l{args.length}.csv"
        reports.rollout_snapshots(model, args.length, args.starts, args.seed, path)
        print(f"rollout-snapshots: {path}")
    return 0


def _cmd_sweep(args: argparse.Namespace) -> int:
    from pimbrl_lab.queue import ExperimentQueue, run_sweep

    out = Path(args.out)
    base = load_config(args.config, {**_run_overrides(args), "output_dir": str(out)})
    parameter = args.parameter if "." in args.parameter else f"model.{args.parameter}"
    values = [_parse_value(v) for v in args.values]

    async def sweep() -> Dict[Any, Path]:
        queue = ExperimentQueue(max_concurrent_runs=int(os.getenv("MAX_CONCURRENT_RUNS", "2")))
        return await run_sweep(queue, base, parameter, values, args.seeds, out)

    tables = asyncio.run(sweep())
    for value, path in tables.items():
        print(f"{parameter}={value}: {path}")
    return 0 if len(tables) == len(values) else 1


def _cmd_serve(args: argparse.Namespace) -> int:
    import uvicorn

    uvicorn.run("pimbrl_lab.server:app", host=args.host, port=args.port)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pimbrl", description="PiMBRL Lab experiments")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    commands = parser.add_subparsers(dest="command", required=True)

    def add_run_arguments(sub: argparse.ArgumentParser) -> None:
        sub.add_argument("--env", choices=sorted(ENVIRONMENT_REGISTRY), required=True)
        sub.add_argument("--algo", choices=sorted(ALGORITHM_REGISTRY))
        sub.add_argument("--steps", type=int, help="Real environment steps")
        sub.add_argument("--rollout-length", type=int, help="Model rollout length l_M")
        sub.add_argument("--threshold", type=float, help="Accuracy gate lambda")
        sub.add_argument("--eval-every", type=int)
        sub.add_argument("--eval-episodes", type=int)
        sub.add_argument("--config", type=Path, help="JSON config file")
        sub.add_argument(
            "--set", action="append", metavar="KEY=VALUE", help="Dotted config override"
        )
        sub.add_argument("--out", type=Path, required=True)

    run = commands.add_parser("run", help="Train one agent")
    add_run_arguments(run)
    run.add_argument("--seed", type=int)
    run.add_argument("--resume", type=str, help="Checkpoint directory to resume from")
    run.set_defaults(handler=_cmd_run)

    evaluate = commands.add_parser("eval", help="Evaluate a checkpointed agent")
    evaluate.add_argument("--checkpoint", type=Path, required=True)
    evaluate.add_argument("--episodes", type=int, default=100)
    evaluate.add_argument("--seed", type=int)
    evaluate.set_defaults(handler=_cmd_eval)

    report = commands.add_parser("report", help="Write plot-ready report tables")
    kinds = report.add_subparsers(dest="report", required=True)
    curves = kinds.add_parser("curves", help="Cross-seed performance curves")
    curves.add_argument("--metrics", type=Path, nargs="+", required=True)
    curves.add_argument("--out", type=Path, required=True)
    model_error = kinds.add_parser("model-error", help="Model prediction-error histograms")
    model_error.add_argument("--checkpoint", type=Path, required=True)
    model_error.add_argument("--steps", type=int, default=1000, help="Held-out transitions")
    model_error.add_argument("--bins", type=int, default=20)
    model_error.add_argument("--seed", type=int, default=1)
    model_error.add_argument("--out", type=Path, required=True)
    compare = kinds.add_parser("model-compare", help="Data-only vs physics-informed model")
    compare.add_argument("--env", choices=sorted(ENVIRONMENT_REGISTRY), required=True)
    compare.add_argument("--steps", type=int, required=True, help="Real transitions collected")
    compare.add_argument("--updates", type=int, default=500)
    compare.add_argument("--held-out", type=int, default=200)
    compare.add_argument("--seed", type=int, default=0)
    compare.add_argument("--config", type=Path)
    compare.add_argument("--out", type=Path, required=True)
    snapshots = kinds.add_parser("rollout-snapshots", help="Model rollouts vs ground truth")
    snapshots.add_argument("--checkpoint", type=Path, required=True)
    snapshots.add_argument("--length", type=int, default=8)
    snapshots.add_argument("--starts", type=int, default=10)
    snapshots.add_argument("--seed", type=int, default=0)
    snapshots.add_argument("--out", type=Path, required=True)
    report.set_defaults(handler=_cmd_report)

    sweep = commands.add_parser("sweep", help="Vary one parameter over values and seeds")
    add_run_arguments(sweep)
    sweep.add_argument("--parameter", required=True, help="e.g. rollout_length or model.threshold")
    sweep.add_argument("--values", nargs="+", required=True)
    sweep.add_argument("--seeds", type=int, nargs="+", default=[0])
    sweep.set_defaults(handler=_cmd_sweep)

    serve = commands.add_parser("serve", help="Start the run service")
    serve.add_argument("--host", default="0.0.0.0")
    serve.add_argument("--port", type=int, default=8000)
    serve.set_defaults(handler=_cmd_serve)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    configure_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except ConfigurationError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except PimbrlError as e:
        logger.error("%s: %s", type(e).__name__, e)
        return 1


if __name__ == "__main__":
    sys.exit(main())
