"""Command-line entry points.

Exit codes: 0 success, 2 configuration problems, 3 data problems,
4 numerical failures.
"""

import argparse
import sys
from pathlib import Path

from .errors import ConfigError, DataError, NumericError


def _add_gen_data(sub):
    p = sub.add_parser("gen-data", help="write a synthetic driving dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--samples", type=int, default=500)
    p.add_argument("--sources", type=int, default=2,
                   help="number of pseudo-label sources per frame")
    p.add_argument("--size", default="64x64", help="HxW, multiples of 16")


def _add_train(sub):
    p = sub.add_parser("train", help="fit the attention pipeline")
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="checkpoint directory")


def _add_eval(sub):
    p = sub.add_parser("eval", help="score a checkpoint against ground truth")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--report", help="optional path for the per-sample report")


def _add_infer(sub):
    p = sub.add_parser("infer", help="predict attention for a single frame")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--frame", required=True, help="PPM/PGM image")
    p.add_argument("--out", required=True, help="output raster path")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="attnmine",
        description="unsupervised driver-attention model: data, training, "
                    "evaluation, inference",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    _add_gen_data(sub)
    _add_train(sub)
    _add_eval(sub)
    _add_infer(sub)
    sub.add_parser("selftest", help="run built-in numeric sanity checks")
    return parser


def _run(args, out=print) -> int:
    if args.command == "gen-data":
        from .synth import SynthConfig, write_dataset
        from .train import parse_resolution

        h, w = parse_resolution(args.size)
        cfg = SynthConfig(height=h, width=w, samples=args.samples,
                          sources=args.sources)
        man = write_dataset(cfg, args.out, seed=args.seed)
        counts = {s: len(man.split(s)) for s in ("train", "val", "test")}
        out(f"wrote {len(man.entries)} samples to {args.out} "
            f"(train {counts['train']}, val {counts['val']}, "
            f"test {counts['test']})")
        return 0

    if args.command == "train":
        from .train import TrainConfig, parse_config_file, train

        cfg = (parse_config_file(args.config) if args.config
               else TrainConfig().validate())
        res = train(cfg, args.data, args.out, log=out)
        out(f"best epoch {res.best_epoch} -> {res.best_checkpoint}")
        out(f"ground-truth reads during training: "
            f"{res.gt_reads_during_training}")
        return 0

    if args.command == "eval":
        from .train import evaluate

        res = evaluate(args.ckpt, args.data, args.split)
        report = res.report_text() + res.summary_text()
        if args.report:
            Path(args.report).write_text(report)
            out(f"report written to {args.report}")
        else:
            out(report.rstrip("\n"))
        return 0

    if args.command == "infer":
        from .train import infer

        pred = infer(args.ckpt, args.frame, args.out)
        out(f"wrote {args.out} ({pred.width}x{pred.height}, "
            f"preview {Path(args.out).with_suffix('.pgm')})")
        return 0

    if args.command == "selftest":
        from .selftest import run_selftest

        return run_selftest(out)

    raise ConfigError(f"unknown command {args.command!r}")


def main(argv=None, out=print) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _run(args, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
