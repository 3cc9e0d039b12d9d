"""Command line entry point: gen-data, train, upsample, eval.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from .autodiff import ConfigError
from .config import TrainConfig
from .dataset import DatasetConfig, gen_dataset, load_dataset
from .metrics import evaluate
from .model import load_checkpoint
from .pcio import read_point_cloud, write_point_cloud
from .sampler import UpsampleRequest, target_count, upsample
from .surfaces import parse_surface
from .train import train

log = logging.getLogger("neuralpoints")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _load_json(path) -> dict:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    return data


def cmd_gen_data(args) -> int:
    data = _load_json(args.config)
    if args.output:
        data["output"] = args.output
    if "output" not in data:
        raise ConfigError("dataset config needs an output directory")
    manifest = gen_dataset(DatasetConfig.from_dict(data))
    log.info("wrote %d samples to %s", len(manifest["samples"]), data["output"])
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = TrainConfig.from_dict(_load_json(args.config))
    dataset = args.dataset or cfg.dataset
    output = Path(args.output or cfg.output or ".")
    if not dataset:
        raise ConfigError("no dataset given (config 'dataset' or --dataset)")
    output.mkdir(parents=True, exist_ok=True)
    samples = load_dataset(dataset)

    def progress(row):
        if row["iter"] % 50 == 0 or row["iter"] == cfg.iterations:
            log.info("iter %d total %.6g lr %.3g", row["iter"], row["total"], row["lr"])

    result = train(cfg, samples, log_path=output / "train_log.csv",
                   checkpoint_path=output / "checkpoint.npck", progress=progress)
    log.info("trained %d iterations in %.1f s", cfg.iterations, result.seconds)
    return EXIT_OK


def cmd_upsample(args) -> int:
    if (args.factor is None) == (args.count is None):
        raise UsageError("give exactly one of --factor or --count")
    cloud = read_point_cloud(args.input)
    j = target_count(len(cloud), factor=args.factor, count=args.count)
    ckpt = load_checkpoint(args.checkpoint)
    out = upsample(UpsampleRequest(cloud, j), ckpt.model, seed=args.seed,
                   patch_size=args.patch_size, anchors=args.anchors)
    write_point_cloud(args.output, out)
    log.info("wrote %d points to %s", len(out), args.output)
    return EXIT_OK


def cmd_eval(args) -> int:
    surface = parse_surface(args.surface) if args.surface else None
    pred = read_point_cloud(args.pred)
    gt = read_point_cloud(args.gt)
    report = evaluate(pred, gt, surface).to_dict()
    print(json.dumps(report))
    if args.csv:
        path = Path(args.csv)
        new = not path.exists()
        with open(path, "a", newline="") as fh:
            writer = csv.writer(fh)
            if new:
                writer.writerow(["pred", "gt", "cd", "hd", "p2f"])
            writer.writerow([args.pred, args.gt, repr(report["cd"]), repr(report["hd"]),
                             "" if report["p2f"] is None else repr(report["p2f"])])
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="neuralpoints", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="sample surfaces into a training dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--output")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model on a dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--dataset")
    p.add_argument("--output")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("upsample", help="resample a point cloud at any factor")
    p.add_argument("--input", required=True)
    p.add_argument("--factor", type=float)
    p.add_argument("--count", type=int)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--patch-size", type=int, default=256)
    p.add_argument("--anchors", type=int, help="anchor patches for inputs above the patch size")
    p.set_defaults(func=cmd_upsample)

    p = sub.add_parser("eval", help="CD / HD / P2F of a prediction")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--surface", help='analytic reference, e.g. "sphere" or "torus:major=1,minor=0.3"')
    p.add_argument("--csv", help="append the metrics to this CSV file")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
