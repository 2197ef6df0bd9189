"""Command-line entry point: ``sdanet train | eval | predict``.

Exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys

from .checkpoint import load_checkpoint
from .data import load_dataset, load_image
from .errors import DataError, NumericalError
from .inference import evaluate, export_heatmap, predict_array, write_density
from .train import TrainConfig, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 by default, which collides with the data-error code
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="sdanet", description="Crowd counting with shallow-feature attention.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train a model from a JSON config")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--out", default="run")
    t.add_argument("--data", help="dataset index; overrides the config's 'data'")
    t.add_argument("--steps", type=int)
    for flag in ("amg", "dense", "refine"):
        t.add_argument(f"--no-{flag}", action="store_true", help=f"disable the {flag} component")

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--report")

    p = sub.add_parser("predict", help="predict a density map for one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--heatmap")
    p.add_argument("--density-out")
    return ap


def _train(args) -> int:
    try:
        cfg = TrainConfig.from_json(args.config)
    except OSError as exc:
        raise DataError(f"cannot read config {args.config}: {exc}") from exc
    except (json.JSONDecodeError, TypeError, ValueError) as exc:
        raise DataError(f"invalid config {args.config}: {exc}") from exc
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.steps is not None:
        overrides["steps"] = args.steps
    if args.data is not None:
        overrides["data"] = os.path.abspath(args.data)
    flags = {f"use_{k}": False for k in ("amg", "dense", "refine") if getattr(args, f"no_{k}")}
    if flags:
        overrides["model"] = dataclasses.replace(cfg.model, **flags)
    try:
        cfg = dataclasses.replace(cfg, **overrides)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    if cfg.data is None:
        raise UsageError("no dataset: pass --data or set 'data' in the config")
    samples = load_dataset(cfg.data, "train", cfg.model.input_channels)
    if not samples:
        raise DataError(f"training split of {cfg.data} is empty")
    _, train_log = train(cfg, samples, out_dir=args.out)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "config.json"), "w", encoding="utf-8") as f:
        json.dump(cfg.to_dict(), f, indent=1)
    last = train_log.entries[-1]
    print(json.dumps({"checkpoint": os.path.join(args.out, "final.ckpt"),
                      "steps": last["step"], "total": last["total"]}))
    return EXIT_OK


def _eval(args) -> int:
    report = evaluate(args.checkpoint, args.data, args.split, args.report)
    print(json.dumps(report.to_dict()["summary"]))
    return EXIT_OK


def _predict(args) -> int:
    params, config = load_checkpoint(args.checkpoint)
    pred = predict_array(params, load_image(args.image, config.input_channels))
    if args.heatmap:
        export_heatmap(pred.density, args.heatmap)
    if args.density_out:
        write_density(args.density_out, pred.density)
    print(json.dumps({"count": pred.count, "per_tile_counts": pred.per_tile_counts}))
    return EXIT_OK


COMMANDS = {"train": _train, "eval": _eval, "predict": _predict}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ValueError) as exc:
        # remaining I/O and input-shape problems are data problems
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
