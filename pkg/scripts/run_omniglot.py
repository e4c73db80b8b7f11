"""Reduced-scale character-image run with the convnet4 backbone.

Expects a raw image directory (class folders of grayscale PNGs, e.g. an
Omniglot checkout's images_background tree). Converts it to the binary
dataset format, optionally restricted to the first N classes, then
trains 20-way 5-shot and reports error and collapse trends.

Example:
    python scripts/run_omniglot.py --src /data/omniglot/images_background \
        --out runs/omniglot --classes 200 --epochs 20
"""

import argparse
from pathlib import Path

from protonc import episodes, plots, trainer
from protonc.episodes import EpisodeSpec


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--src", help="raw image directory (omit if --dataset exists)")
    parser.add_argument("--dataset", default=None, help="existing FSDS file to reuse")
    parser.add_argument("--out", default="runs/omniglot")
    parser.add_argument("--classes", type=int, default=200, help="subset size, 0 = all")
    parser.add_argument("--epochs", type=int, default=20)
    parser.add_argument("--episodes-per-epoch", type=int, default=100)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.dataset:
        dataset_path = Path(args.dataset)
    else:
        if not args.src:
            parser.error("either --src or --dataset is required")
        dataset_path = out / "omniglot.fsds"
        summary = episodes.convert_image_dir(args.src, dataset_path, invert=True)
        print(f"converted {summary.classes} classes, {summary.samples} samples")

    full = episodes.load_dataset(dataset_path)
    if args.classes and full.n_classes > args.classes:
        subset = episodes.Dataset(
            full.class_names[: args.classes],
            full.samples[: args.classes],
            full.image_spec,
        )
        dataset_path = out / f"subset{args.classes}.fsds"
        episodes.save_dataset(subset, dataset_path)

    config = trainer.TrainConfig(
        dataset=str(dataset_path),
        backbone="convnet4",
        split_fractions=(0.8, 0.2, 0.0),
        split_seed=args.seed,
        train_spec=EpisodeSpec(20, 5, 5),
        eval_spec=EpisodeSpec(20, 5, 15),
        episodes_per_epoch=args.episodes_per_epoch,
        epochs=args.epochs,
        init_seed=args.seed,
        sampler_seed=args.seed + 1,
        out_dir=str(out / "run"),
    )
    def progress(report):
        print(
            f"epoch {report.epoch:3d} {report.split:5s} loss {report.loss:.4f} "
            f"error {report.error:.4f} nc1(s) {report.nc1_support:.4f} "
            f"nc2(s) {report.nc2_support:.4f}",
            flush=True,
        )

    run_dir = trainer.train(config, on_epoch=progress)
    rows = plots.read_epoch_log(run_dir / "per_epoch.csv")
    for split in ("train", "val"):
        sel = [r for r in rows if r["split"] == split]
        if not sel:
            continue
        first, last = sel[0], sel[-1]
        print(
            f"{split}: error {float(first['error']):.4f} -> {float(last['error']):.4f}, "
            f"NC1(s) {float(first['nc1_support']):.4f} -> {float(last['nc1_support']):.4f}, "
            f"NC2(s) {float(first['nc2_support']):.4f} -> {float(last['nc2_support']):.4f}"
        )
    for path in plots.plot_run(run_dir / "per_epoch.csv", out / "plots"):
        print(f"wrote {path}")


if __name__ == "__main__":
    main()
