"""Desk-scale synthetic benchmark: train, report collapse trends, plot.

Twenty Gaussian classes in a 16-dim flat image space, 5-way 5-shot MLP
training. Prints the first/last-epoch NC1 comparison and the
support/query agreement, and renders the SVG chart set.
"""

import argparse
from pathlib import Path

from protonc import experiments, plots, trainer


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="runs/synthetic", help="output directory")
    parser.add_argument("--epochs", type=int, default=30)
    parser.add_argument("--widths", default="16,16,16", help="MLP widths, comma separated")
    parser.add_argument("--seed", type=int, default=1)
    args = parser.parse_args()

    out = Path(args.out)
    dataset = experiments.write_benchmark_dataset(out / "synthetic.fsds")
    config = experiments.benchmark_config(
        dataset,
        out / "run",
        widths=tuple(int(w) for w in args.widths.split(",")),
        init_seed=args.seed,
        sampler_seed=args.seed + 1,
        epochs=args.epochs,
    )
    run_dir = trainer.train(config)
    rows = plots.read_epoch_log(run_dir / "per_epoch.csv")
    train_rows = [r for r in rows if r["split"] == "train"]
    first, last = train_rows[0], train_rows[-1]
    print(f"run directory: {run_dir}")
    print(f"query error: {float(first['error']):.4f} -> {float(last['error']):.4f}")
    print(
        f"NC1 (support): {float(first['nc1_support']):.4f} -> {float(last['nc1_support']):.4f}"
        f"  (ratio {float(last['nc1_support']) / float(first['nc1_support']):.3f})"
    )
    gap = abs(float(last["nc1_support"]) - float(last["nc1_query"]))
    print(f"final |NC1 support - query|: {gap:.4f}")
    print(f"NC2 (support): {float(first['nc2_support']):.4f} -> {float(last['nc2_support']):.4f}")
    for path in plots.plot_run(run_dir / "per_epoch.csv", out / "plots"):
        print(f"wrote {path}")


if __name__ == "__main__":
    main()
