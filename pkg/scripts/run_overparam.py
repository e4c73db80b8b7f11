"""Width comparison: does the larger MLP collapse harder?

Runs the synthetic benchmark with a small (32) and a large (256, 256)
MLP over three seeds each and compares the medians of the final
epoch-mean NC1 on the support set.
"""

import argparse
import statistics
from pathlib import Path

from protonc import experiments, plots, trainer


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="runs/overparam")
    args = parser.parse_args()

    out = Path(args.out)
    dataset = experiments.write_benchmark_dataset(out / "synthetic.fsds")
    finals: dict[str, list[float]] = {"small": [], "large": []}
    for config in experiments.overparam_configs(dataset, out):
        run_dir = trainer.train(config)
        rows = [r for r in plots.read_epoch_log(run_dir / "per_epoch.csv") if r["split"] == "train"]
        final = float(rows[-1]["nc1_support"])
        tag = "small" if tuple(config.mlp_widths) == experiments.OVERPARAM_SMALL else "large"
        finals[tag].append(final)
        print(f"{tag} widths={config.mlp_widths} seed={config.init_seed}: final NC1 {final:.4f}")
    med_small = statistics.median(finals["small"])
    med_large = statistics.median(finals["large"])
    print(f"median final NC1: small {med_small:.4f}, large {med_large:.4f}")
    print("larger model collapses at least as hard:", med_large <= med_small)


if __name__ == "__main__":
    main()
