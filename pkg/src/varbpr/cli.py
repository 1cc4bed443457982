"""Command-line entry points.

Verbs: train, evaluate, sweep, ablate, robustness, scale. Each takes
--config <path> plus optional --out and --seed overrides. Exit codes:
0 success, 2 configuration error, 3 numeric failure during training.
"""

from __future__ import annotations

import argparse
import sys

from .config import ConfigError, ExperimentConfig, load_config
from .experiments import (
    ROBUSTNESS_RATES,
    SCALE_BAG_SIZES,
    cmd_ablate,
    cmd_evaluate,
    cmd_robustness,
    cmd_scale,
    cmd_sweep,
    cmd_train,
)
from .learning import TrainingDivergedError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def _apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    if args.out is not None:
        cfg = cfg.replace(output=type(cfg.output)(directory=args.out))
    if args.seed is not None:
        model = type(cfg.model)(**{**cfg.model.__dict__, "seed": args.seed})
        cfg = cfg.replace(model=model)
    return cfg


def _float_list(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated floats, got {text!r}")


def _int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated ints, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="varbpr", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="path to the JSON experiment config")
        p.add_argument("--out", default=None, help="override output.directory")
        p.add_argument("--seed", type=int, default=None, help="override model.seed")

    common(sub.add_parser("train", help="train one model; writes epochs.csv/report.json/checkpoint.bin"))

    p_eval = sub.add_parser("evaluate", help="evaluate a stored checkpoint on the configured split")
    common(p_eval)
    p_eval.add_argument("--checkpoint", required=True, help="path to a checkpoint.bin")

    p_sweep = sub.add_parser("sweep", help="direction-strength exposure sweep; writes pareto.csv")
    common(p_sweep)
    p_sweep.add_argument(
        "--direction-grid",
        action="store_true",
        help="cross positive and negative direction steps instead of moving them in lockstep",
    )

    common(sub.add_parser("ablate", help="full/no-prior/no-vi/no-plugin table; writes table.csv"))

    p_rob = sub.add_parser("robustness", help="noise-rate likelihood trajectories; writes likelihood.csv")
    common(p_rob)
    p_rob.add_argument("--rates", type=_float_list, default=ROBUSTNESS_RATES, help="comma-separated noise rates")

    p_scale = sub.add_parser("scale", help="wall-clock vs bag size; writes timing.csv")
    common(p_scale)
    p_scale.add_argument("--bag-sizes", type=_int_list, default=SCALE_BAG_SIZES, help="comma-separated M+N values")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _apply_overrides(load_config(args.config), args).validate()
        if args.command == "train":
            out = cmd_train(cfg)
        elif args.command == "evaluate":
            out = cmd_evaluate(cfg, args.checkpoint)
        elif args.command == "sweep":
            out = cmd_sweep(cfg, direction_grid=args.direction_grid)
        elif args.command == "ablate":
            out = cmd_ablate(cfg)
        elif args.command == "robustness":
            out = cmd_robustness(cfg, rates=args.rates)
        else:
            out = cmd_scale(cfg, bag_sizes=args.bag_sizes)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDivergedError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    print(f"wrote results to {out}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
