# app/main.py
"""
Command-line entry point.

  python -m app.main train    --config configs/ring_cesslgan.ini [--out DIR] [--seed N] [--reps N] [--preset desk]
  python -m app.main sweep    --config configs/sweep.ini
  python -m app.main eval     --generator G.json --discriminator D.json [--config RUN.ini]
  python -m app.main gen-data --config configs/blob_cesslgan.ini --out data/blob

Logging is configured before anything else runs; library exceptions are
turned into exit codes here and nowhere else.
"""
from __future__ import annotations

import argparse
import json
import sys
from typing import Any, Sequence

from core.config import settings
from core.exceptions import handle_cli_exception
from core.logging import get_logger, setup_logging

setup_logging()
logger = get_logger(__name__)

from app.runner import (  # noqa: E402
    evaluate_checkpoint,
    generate_dataset,
    load_run_config,
    load_sweep_spec,
    run_experiment,
    run_sweep,
)


def _overrides(args: argparse.Namespace) -> dict[str, dict[str, Any]]:
    run = {"out": args.out, "seed": args.seed, "reps": args.reps, "workers": getattr(args, "workers", None)}
    return {"run": {k: v for k, v in run.items() if v is not None}}


def _cmd_train(args: argparse.Namespace) -> int:
    config = load_run_config(args.config, args.preset, _overrides(args))
    result = run_experiment(config)
    for metric, stats in result.summary.items():
        print(f"{metric:>15}  " + "  ".join(f"{k}={v:.6g}" for k, v in stats.items()))
    print(f"results: {result.out_dir}")
    return 0


def _cmd_sweep(args: argparse.Namespace) -> int:
    base = load_run_config(args.config, args.preset, _overrides(args))
    result = run_sweep(load_sweep_spec(args.config), base)
    failed = [row["combo"] for row in result.index if row["status"] != "ok"]
    print(f"{len(result.index)} combinations, {len(failed)} failed; results: {result.out_dir}")
    return 0


def _cmd_eval(args: argparse.Namespace) -> int:
    config = load_run_config(args.config, args.preset, _overrides(args))
    record = evaluate_checkpoint(args.generator, args.discriminator, config.dataset, seed=config.run.seed,
                                 w1_points=config.eval.w1_points, with_fid=config.eval.fid)
    print(json.dumps(record.model_dump()))
    return 0


def _cmd_gen_data(args: argparse.Namespace) -> int:
    config = load_run_config(args.config, args.preset, _overrides(args))
    path = generate_dataset(config.dataset, args.out or settings.RESULTS_DIR, seed=config.run.seed)
    print(f"dataset: {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="coevo-sslgan", description="Co-evolutionary semi-supervised GAN training")
    parser.add_argument("--version", action="version", version=f"%(prog)s {settings.APP_VERSION}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> argparse.ArgumentParser:
        p.add_argument("--config", metavar="PATH", help="INI run file")
        p.add_argument("--out", metavar="DIR", help="output directory")
        p.add_argument("--seed", type=int, metavar="N", help="master seed")
        p.add_argument("--reps", type=int, metavar="N", help="repetitions")
        p.add_argument("--preset", choices=("paper", "desk"), help="parameter preset (default from settings)")
        return p

    train = common(sub.add_parser("train", help="run one experiment"))
    train.add_argument("--workers", type=int, metavar="N", help="worker processes")
    train.set_defaults(handler=_cmd_train)

    sweep = common(sub.add_parser("sweep", help="run a parameter sweep ([sweep] section of --config)"))
    sweep.add_argument("--workers", type=int, metavar="N", help="worker processes per combination")
    sweep.set_defaults(handler=_cmd_sweep)

    evaluate = common(sub.add_parser("eval", help="evaluate a checkpoint pair on a dataset"))
    evaluate.add_argument("--generator", required=True, metavar="PATH")
    evaluate.add_argument("--discriminator", required=True, metavar="PATH")
    evaluate.set_defaults(handler=_cmd_eval)

    gen_data = common(sub.add_parser("gen-data", help="write a dataset as train.csv / test.csv"))
    gen_data.set_defaults(handler=_cmd_gen_data)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "sweep" and not args.config:
        logger.error("sweep needs --config with a [sweep] section")
        return 2
    logger.info("Command started", extra={"command": args.command, "environment": settings.ENVIRONMENT,
                                          "version": settings.APP_VERSION})
    try:
        return args.handler(args)
    except BaseException as exc:  # noqa: BLE001
        if isinstance(exc, SystemExit):
            raise
        return handle_cli_exception(exc)


if __name__ == "__main__":
    sys.exit(main())
