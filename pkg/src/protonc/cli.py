"""Command-line surface: convert | synth | train | eval | nc | plot.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numerical
failure. Every training/eval run writes its resolved config next to its
logs, and command-line flags override config-file values.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import collapse, episodes, plots, trainer
from .tensor import ContractError, NumericalError, ShapeError


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would sys.exit(2); keep codes ours
        raise UsageError(message)


def _backbone_args(value: str) -> tuple[str, tuple[int, ...]]:
    if value in ("convnet4", "resnet18"):
        return value, ()
    if value.startswith("mlp:"):
        try:
            widths = tuple(int(w) for w in value[4:].split(",") if w)
        except ValueError as exc:
            raise UsageError(f"bad mlp widths in {value!r}") from exc
        if not widths:
            raise UsageError("mlp backbone needs at least one width, e.g. mlp:64,32")
        return "mlp", widths
    raise UsageError(f"unknown backbone {value!r} (convnet4 | resnet18 | mlp:W1,W2,...)")


def _load_config(args) -> trainer.TrainConfig:
    if args.config:
        config = trainer.TrainConfig.from_json(Path(args.config).read_text())
    else:
        config = trainer.TrainConfig()
    if args.dataset:
        config.dataset = args.dataset
    if args.out:
        config.out_dir = args.out
    if args.seed is not None:
        config.init_seed = args.seed
        config.sampler_seed = args.seed
    if args.backbone:
        arch, widths = _backbone_args(args.backbone)
        config.backbone = arch
        if widths:
            config.mlp_widths = widths
    if args.distance:
        config.distance = args.distance
    if args.nc2:
        config.nc2_centering = {"paper": "paper", "centered": "centered"}[args.nc2]
    if args.epochs is not None:
        config.epochs = args.epochs
    if args.decay_factor is not None:
        config.decay_factor = args.decay_factor
    if not config.dataset:
        raise UsageError("a dataset path is required (--dataset or config file)")
    return config


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file; flags override its values")
    p.add_argument("--dataset", help="dataset file (FSDS)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int, help="sets both init and sampler seeds")
    p.add_argument("--backbone", help="convnet4 | resnet18 | mlp:W1,W2,...")
    p.add_argument("--distance", choices=("squared", "plain"))
    p.add_argument("--nc2", choices=("paper", "centered"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--decay-factor", dest="decay_factor", type=float)


def _cmd_convert(args) -> int:
    summary = episodes.convert_image_dir(
        args.src, args.dst, invert=not args.no_invert, rotations=args.rotations
    )
    for warning in summary.warnings:
        print(f"warning: {warning}", file=sys.stderr)
    print(json.dumps({"classes": summary.classes, "samples": summary.samples}))
    return 0


def _cmd_synth(args) -> int:
    try:
        spec = tuple(int(v) for v in args.shape.split(","))
        if len(spec) != 3:
            raise ValueError
    except ValueError:
        raise UsageError(f"--shape must be C,H,W, got {args.shape!r}")
    ds = episodes.synth_gaussian(
        args.classes, spec, args.sigma, args.separation, args.samples, args.seed
    )
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    episodes.save_dataset(ds, args.out)
    print(json.dumps({"classes": ds.n_classes, "samples_per_class": args.samples}))
    return 0


def _cmd_train(args) -> int:
    config = _load_config(args)
    out = trainer.train(config)
    print(out)
    return 0


def _cmd_eval(args) -> int:
    config = _load_config(args)
    report = trainer.evaluate(config, args.checkpoint, split=args.split, out_dir=args.out)
    print(json.dumps(report.__dict__, sort_keys=True))
    return 0


def _cmd_nc(args) -> int:
    feats, labels, n, k = collapse.load_features(args.features)
    stats = collapse.class_statistics(feats, labels)
    rcond = args.rcond
    result = {
        "n": n,
        "k": k,
        "dim": int(feats.shape[1]),
        "nc1": collapse.nc1(stats, rcond),
        "nc2_paper": collapse.nc2(stats.class_means, "paper", stats.global_mean),
        "nc2_centered": collapse.nc2(stats.class_means, "centered", stats.global_mean),
        "rcond": rcond if rcond is not None else collapse.default_rcond(feats.shape[1]),
    }
    print(json.dumps(result, sort_keys=True))
    return 0


def _cmd_plot(args) -> int:
    written = plots.plot_run(args.log, args.out)
    for path in written:
        print(path)
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="protonc", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("convert", help="convert an image class directory to FSDS")
    p.add_argument("--src", required=True)
    p.add_argument("--dst", required=True)
    p.add_argument("--no-invert", action="store_true", help="keep ink = 0 convention")
    p.add_argument("--rotations", action="store_true", help="add 90/180/270 rotation classes")
    p.set_defaults(func=_cmd_convert)

    p = sub.add_parser("synth", help="write a synthetic Gaussian dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--shape", default="1,1,16", help="C,H,W")
    p.add_argument("--sigma", type=float, default=0.5)
    p.add_argument("--separation", type=float, default=4.0)
    p.add_argument("--samples", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("train", help="run episodic training")
    _add_run_flags(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    _add_run_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="val")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("nc", help="collapse metrics for a FEAT feature dump")
    p.add_argument("--features", required=True)
    p.add_argument("--rcond", type=float)
    p.set_defaults(func=_cmd_nc)

    p = sub.add_parser("plot", help="render SVG charts from a per-epoch CSV")
    p.add_argument("--log", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_plot)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (FileNotFoundError, IsADirectoryError, PermissionError, ContractError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except (NumericalError, ShapeError, np.linalg.LinAlgError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return 3


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
