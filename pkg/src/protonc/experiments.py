"""Shared desk-scale experiment definitions.

The synthetic benchmark is the workhorse: 20 Gaussian classes in a
16-dim flat "image" space (sigma 0.5, mean separation 4), trained 5-way
5-shot with 20 episodes per epoch for 30 epochs. Scripts and the
acceptance suite both build their runs from here so results stay
comparable.
"""

from __future__ import annotations

from pathlib import Path

from .episodes import EpisodeSpec, save_dataset, synth_gaussian
from .trainer import TrainConfig

SYNTH_CLASSES = 20
SYNTH_SHAPE = (1, 1, 16)
SYNTH_SIGMA = 0.5
SYNTH_SEPARATION = 4.0
SYNTH_SAMPLES_PER_CLASS = 30
SYNTH_SEED = 7


def write_benchmark_dataset(path) -> Path:
    """Materialize the standard synthetic dataset file."""
    ds = synth_gaussian(
        SYNTH_CLASSES,
        SYNTH_SHAPE,
        SYNTH_SIGMA,
        SYNTH_SEPARATION,
        SYNTH_SAMPLES_PER_CLASS,
        SYNTH_SEED,
    )
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(ds, path)
    return path


def benchmark_config(
    dataset,
    out_dir,
    widths: tuple[int, ...] = (16, 16, 16),
    init_seed: int = 1,
    sampler_seed: int = 2,
    epochs: int = 30,
    episodes_per_epoch: int = 20,
) -> TrainConfig:
    """5-way 5-shot training config over the synthetic benchmark."""
    return TrainConfig(
        dataset=str(dataset),
        backbone="mlp",
        mlp_widths=widths,
        split_fractions=(1.0, 0.0, 0.0),
        split_seed=0,
        train_spec=EpisodeSpec(5, 5, 15),
        eval_spec=EpisodeSpec(5, 5, 15),
        episodes_per_epoch=episodes_per_epoch,
        epochs=epochs,
        base_lr=1e-3,
        decay_every=20,
        decay_factor=0.5,
        distance="squared",
        nc2_centering="paper",
        init_seed=init_seed,
        sampler_seed=sampler_seed,
        out_dir=str(out_dir),
    )


OVERPARAM_SMALL = (32,)
OVERPARAM_LARGE = (256, 256)
OVERPARAM_SEEDS = (11, 12, 13)


def overparam_configs(dataset, out_root) -> list[TrainConfig]:
    """Width-comparison runs: small vs large MLP, three seeds each."""
    out_root = Path(out_root)
    configs = []
    for tag, widths in (("small", OVERPARAM_SMALL), ("large", OVERPARAM_LARGE)):
        for seed in OVERPARAM_SEEDS:
            configs.append(
                benchmark_config(
                    dataset,
                    out_root / f"{tag}_seed{seed}",
                    widths=widths,
                    init_seed=seed,
                    sampler_seed=1000 + seed,
                )
            )
    return configs
