"""Command-line driver: gen-data, train, eval, ablate, predict, gradcheck.

Exit codes: 0 success, 1 usage or input error, 2 numerical failure.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from . import checkpoint
from .checkpoint import CheckpointError
from .data import FormatError, SynthSpec, read_ppm, write_dataset, write_pgm, write_ppm
from .losses import format_table
from .tensor import ShapeError
from .train import (ConfigError, NumericalError, RunConfig, TrainState, ablate, evaluate, format_ablation, gradcheck,
                    load_config, model_params, parse_config_text, predict, train)

EXIT_USAGE = 1
EXIT_NUMERICAL = 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="PATH", help="flat key = value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key (repeatable)")
    p.add_argument("--seed", type=int, help="random seed")
    p.add_argument("--out", metavar="DIR", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="msaseg", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write the synthetic dataset")
    _common(p)
    p.add_argument("--count", type=int, default=64)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--noise", type=float, default=0.05)

    p = sub.add_parser("train", help="train with the poly schedule")
    _common(p)
    p.add_argument("--resume", metavar="CKPT", help="continue from a checkpoint")

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", metavar="CKPT")
    p.add_argument("--split", choices=("train", "val", "all"), default="val")

    p = sub.add_parser("ablate", help="train and compare the ablation rows")
    _common(p)
    p.add_argument("--seeds", default="0", help="comma-separated seeds; the median mIoU is reported")

    p = sub.add_parser("predict", help="segment one PPM image")
    _common(p)
    p.add_argument("--checkpoint", metavar="CKPT")
    p.add_argument("image", help="input .ppm")

    p = sub.add_parser("gradcheck", help="finite-difference check of the full loss")
    _common(p)
    p.add_argument("--samples", type=int, default=50)
    p.add_argument("--epsilon", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--float32", action="store_true",
                   help="check 32-bit gradients against 64-bit differences")
    return parser


def _overrides(args) -> dict[str, str]:
    pairs = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        pairs[key.strip()] = value
    if args.seed is not None:
        pairs["seed"] = str(args.seed)
    return pairs


def _config(args, ckpt_path: str | None = None) -> RunConfig:
    """Config from --config, else the run.cfg saved next to the checkpoint."""
    pairs = {}
    path = args.config
    if path is None and ckpt_path:
        sidecar = os.path.join(os.path.dirname(os.path.abspath(ckpt_path)), "run.cfg")
        path = sidecar if os.path.exists(sidecar) else None
    if path:
        with open(path, encoding="utf-8") as f:
            pairs = parse_config_text(f.read())
    pairs.update(_overrides(args))
    return RunConfig.from_pairs(pairs)


def _checkpoint_path(args, cfg) -> str:
    path = args.checkpoint or cfg.checkpoint
    if not path:
        raise ConfigError("no checkpoint given (use --checkpoint or the 'checkpoint' config key)")
    return path


def _write(path: str, data: bytes) -> None:
    with open(path, "wb") as f:
        f.write(data)


def run(args) -> int:
    if args.command == "gen-data":
        cfg = load_config(args.config, _overrides(args))
        spec = SynthSpec(size=args.size, noise=args.noise, seed=cfg.seed, n_class=cfg.n_class)
        out = args.out or cfg.data
        write_dataset(spec, args.count, out)
        print(f"wrote {args.count} samples to {out}")
        return 0

    if args.command == "train":
        resume = None
        if args.resume:
            cfg = _config(args, args.resume)
            resume = TrainState.from_tensors(checkpoint.load(args.resume))
        else:
            cfg = load_config(args.config, _overrides(args))
        out = args.out or "runs/train"
        state = train(cfg, out_dir=out, resume=resume)
        last = state.log_rows[-1] if state.log_rows else None
        if last:
            print(f"iter {last[0]} loss_total {last[2]:.4f}")
        print(f"checkpoint: {os.path.join(out, 'model.msat')}")
        return 0

    if args.command == "eval":
        ckpt = args.checkpoint
        cfg = _config(args, ckpt)
        params = model_params(checkpoint.load(_checkpoint_path(args, cfg)))
        report = evaluate(params, cfg, split=args.split, out_dir=args.out)
        sys.stdout.write(format_table(report))
        return 0

    if args.command == "ablate":
        cfg = load_config(args.config, _overrides(args))
        seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
        results = ablate(cfg, seeds=seeds, out_dir=args.out)
        sys.stdout.write(format_ablation(results))
        return 0

    if args.command == "predict":
        cfg = _config(args, args.checkpoint)
        params = model_params(checkpoint.load(_checkpoint_path(args, cfg)))
        with open(args.image, "rb") as f:
            image = read_ppm(f.read())
        pred = predict(params, cfg, image)
        out = args.out or "predictions"
        os.makedirs(out, exist_ok=True)
        _write(os.path.join(out, "mask.pgm"), write_pgm(pred.mask))
        _write(os.path.join(out, "colorized.ppm"), write_ppm(pred.colorized))
        for k, m in enumerate(pred.attention):
            _write(os.path.join(out, f"attention_s{k + 1}.pgm"), write_pgm(m))
        for c, m in enumerate(pred.recalibration):
            _write(os.path.join(out, f"recalib_c{c}.pgm"), write_pgm(m))
        print(f"wrote predictions to {out}")
        return 0

    if args.command == "gradcheck":
        cfg = load_config(args.config, _overrides(args))
        dtype = np.float32 if args.float32 else np.float64
        report = gradcheck(cfg, sample_count=args.samples, epsilon=args.epsilon, seed=cfg.seed, dtype=dtype,
                           fd_dtype=np.float64)
        print(f"max relative error {report.max_rel_err:.3e} at {report.worst_param}[{report.worst_index}] "
              f"over {len(report.entries)} coordinates")
        if not report.passed(args.tol):
            print(f"FAILED: tolerance {args.tol:g}", file=sys.stderr)
            return EXIT_NUMERICAL
        print("ok")
        return 0
    raise AssertionError(args.command)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return run(args)
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ConfigError, CheckpointError, FormatError, ShapeError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
