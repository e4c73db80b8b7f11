"""Episodic training: Adam, step LR decay, per-epoch metric aggregation.

An epoch is a fixed number of episodes. Per episode the backbone embeds
support and query images in one batch (so train-mode batchnorm sees one
set of statistics, as in the original method), prototypes and the
softmax-over-negative-distances loss are computed, collapse metrics are
measured on the detached features, and in train mode one Adam step is
taken. Episode sampling is seeded per (sampler_seed, split, epoch,
episode), so runs are exactly reproducible; per-epoch means use
compensated summation in episode order, so logged means cannot depend on
execution details.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .collapse import CollapseConfig, episode_collapse
from .episodes import Dataset, EpisodeSpec, load_dataset, sample_episode, split_classes
from .protonet import distance_matrix, episode_loss, prototypes
from .tensor import ContractError, NumericalError, Tensor, narrow, no_grad

_SPLIT_CODES = {"train": 0, "val": 1, "test": 2}


@dataclass
class TrainConfig:
    """Everything needed to reproduce a run, serialized beside its logs."""

    dataset: str = ""
    backbone: str = "mlp"
    mlp_widths: tuple[int, ...] = (64,)
    split_fractions: tuple[float, float, float] = (0.64, 0.16, 0.20)
    split_seed: int = 0
    train_spec: EpisodeSpec = field(default_factory=lambda: EpisodeSpec(60, 5, 5))
    eval_spec: EpisodeSpec = field(default_factory=lambda: EpisodeSpec(5, 5, 15))
    episodes_per_epoch: int = 100
    epochs: int = 1
    base_lr: float = 1e-3
    decay_every: int = 20
    decay_factor: float = 0.5
    distance: str = "squared"
    nc2_centering: str = "paper"
    rcond: float | None = None
    init_seed: int = 0
    sampler_seed: int = 0
    out_dir: str = "run"

    def __post_init__(self):
        if min(self.episodes_per_epoch, self.decay_every) < 1 or self.epochs < 0:
            raise ContractError("episode/epoch counts must be positive")
        if not 0.0 < self.decay_factor <= 1.0:
            raise ContractError(f"decay_factor must be in (0, 1], got {self.decay_factor}")
        if self.base_lr <= 0:
            raise ContractError(f"base_lr must be positive, got {self.base_lr}")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["mlp_widths"] = list(self.mlp_widths)
        d["split_fractions"] = list(self.split_fractions)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ContractError(f"unknown config keys: {sorted(unknown)}")
        kw = dict(d)
        for spec_key in ("train_spec", "eval_spec"):
            if spec_key in kw and isinstance(kw[spec_key], dict):
                kw[spec_key] = EpisodeSpec(**kw[spec_key])
        if "mlp_widths" in kw:
            kw["mlp_widths"] = tuple(kw["mlp_widths"])
        if "split_fractions" in kw:
            kw["split_fractions"] = tuple(kw["split_fractions"])
        return cls(**kw)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "TrainConfig":
        return cls.from_dict(json.loads(text))


@dataclass
class AdamState:
    """First/second moment buffers plus the shared step counter."""

    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: list[Tensor]) -> "AdamState":
        return cls(
            m=[np.zeros_like(p.data) for p in params],
            v=[np.zeros_like(p.data) for p in params],
        )


def adam_step(params: list[Tensor], grads: list[np.ndarray | None], state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update; no weight decay."""
    if len(grads) != len(params):
        raise ContractError(f"{len(grads)} gradients for {len(params)} parameters")
    for i, g in enumerate(grads):
        if g is None:
            raise ContractError(f"missing gradient for parameter {i}")
    state.t += 1
    c1 = 1.0 - state.beta1**state.t
    c2 = 1.0 - state.beta2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m[:] = state.beta1 * m + (1.0 - state.beta1) * g
        v[:] = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def lr_schedule(epoch: int, config: TrainConfig) -> float:
    """base_lr * decay_factor ** floor(epoch / decay_every)."""
    if epoch < 0:
        raise ContractError(f"epoch must be >= 0, got {epoch}")
    return config.base_lr * config.decay_factor ** (epoch // config.decay_every)


@dataclass
class EpochReport:
    epoch: int
    split: str
    loss: float
    error: float
    nc1_support: float
    nc1_query: float
    nc2_support: float
    nc2_query: float
    lr: float


class _Kahan:
    """Compensated accumulator; episode order fixes the logged means."""

    __slots__ = ("total", "comp", "count")

    def __init__(self):
        self.total = 0.0
        self.comp = 0.0
        self.count = 0

    def add(self, x: float) -> None:
        y = x - self.comp
        t = self.total + y
        self.comp = (t - self.total) - y
        self.total = t
        self.count += 1

    def mean(self) -> float:
        return self.total / self.count if self.count else 0.0


def state_digest(backbone: nn.Backbone) -> str:
    """SHA-256 over parameters and batchnorm running statistics."""
    h = hashlib.sha256()
    for arr in backbone.state_arrays():
        h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return h.hexdigest()


def run_epoch(
    backbone: nn.Backbone,
    opt_state: AdamState | None,
    dataset: Dataset,
    config: TrainConfig,
    epoch: int,
    mode: str,
    split_tag: str | None = None,
    episode_sink: list | None = None,
) -> EpochReport:
    """Run `episodes_per_epoch` episodes; train mode updates parameters.

    Eval mode uses the eval episode spec, eval-mode batchnorm, and records
    nothing on the tape. Means are per-episode arithmetic means.
    """
    if mode not in ("train", "eval"):
        raise ContractError(f"mode must be 'train' or 'eval', got {mode!r}")
    training = mode == "train"
    if training and opt_state is None:
        raise ContractError("train mode requires an optimizer state")
    split = split_tag or ("train" if training else "val")
    spec = config.train_spec if training else config.eval_spec
    lr = lr_schedule(epoch, config)
    params = backbone.parameters()
    ccfg = CollapseConfig(nc2_centering=config.nc2_centering, rcond=config.rcond)
    acc = {k: _Kahan() for k in ("loss", "error", "nc1_s", "nc1_q", "nc2_s", "nc2_q")}

    n_support = spec.n_way * spec.k_support
    for i in range(config.episodes_per_epoch):
        rng = np.random.default_rng([config.sampler_seed, _SPLIT_CODES[split], epoch, i])
        ep = sample_episode(dataset, spec, rng)
        images = Tensor(np.concatenate([ep.support_images, ep.query_images]))

        def forward():
            feats = backbone.embed(images, training=training)
            s_emb = narrow(feats, 0, 0, n_support)
            q_emb = narrow(feats, 0, n_support, spec.n_way * spec.k_query)
            protos = prototypes(s_emb, ep.support_labels)
            dists = distance_matrix(q_emb, protos, config.distance)
            loss, err = episode_loss(dists, ep.query_labels)
            return loss, err, s_emb, q_emb

        if training:
            loss, err, s_emb, q_emb = forward()
        else:
            with no_grad():
                loss, err, s_emb, q_emb = forward()
        loss_val = loss.item()
        if not np.isfinite(loss_val):
            raise NumericalError(
                f"non-finite loss ({loss_val}) in {split} epoch {epoch}, episode {i}"
            )
        if training:
            for p in params:
                p.zero_grad()
            loss.backward()
            adam_step(params, [p.grad for p in params], opt_state, lr)

        report = episode_collapse(
            s_emb.data, ep.support_labels, q_emb.data, ep.query_labels, ccfg, episode_index=i
        )
        acc["loss"].add(loss_val)
        acc["error"].add(err)
        acc["nc1_s"].add(report.nc1_support)
        acc["nc1_q"].add(report.nc1_query)
        acc["nc2_s"].add(report.nc2_support)
        acc["nc2_q"].add(report.nc2_query)
        if episode_sink is not None:
            episode_sink.append(
                (
                    epoch,
                    split,
                    i,
                    loss_val,
                    err,
                    report.nc1_support,
                    report.nc1_query,
                    report.nc2_support,
                    report.nc2_query,
                    lr,
                )
            )

    return EpochReport(
        epoch=epoch,
        split=split,
        loss=acc["loss"].mean(),
        error=acc["error"].mean(),
        nc1_support=acc["nc1_s"].mean(),
        nc1_query=acc["nc1_q"].mean(),
        nc2_support=acc["nc2_s"].mean(),
        nc2_query=acc["nc2_q"].mean(),
        lr=lr,
    )


EPOCH_COLUMNS = (
    "epoch",
    "split",
    "loss",
    "error",
    "nc1_support",
    "nc1_query",
    "nc2_support",
    "nc2_query",
    "lr",
)
EPISODE_COLUMNS = (
    "epoch",
    "split",
    "episode",
    "loss",
    "error",
    "nc1_support",
    "nc1_query",
    "nc2_support",
    "nc2_query",
    "lr",
)


def _fmt(value) -> str:
    return repr(value) if isinstance(value, float) else str(value)


def _epoch_row(r: EpochReport) -> list[str]:
    return [
        str(r.epoch),
        r.split,
        _fmt(r.loss),
        _fmt(r.error),
        _fmt(r.nc1_support),
        _fmt(r.nc1_query),
        _fmt(r.nc2_support),
        _fmt(r.nc2_query),
        _fmt(r.lr),
    ]


def _build_backbone(config: TrainConfig, dataset: Dataset) -> nn.Backbone:
    backbone = nn.Backbone(
        config.backbone, dataset.image_spec, config.mlp_widths, seed=config.init_seed
    )
    return backbone


def train(config: TrainConfig, on_epoch=None) -> Path:
    """Full run: train + validation epochs, CSV logs, checkpoints.

    Returns the run directory. Logs are flushed as they are produced, so
    an aborted run leaves partial logs behind. `on_epoch`, when given, is
    called with each EpochReport as it completes.
    """
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(config.to_json() + "\n")

    full = load_dataset(config.dataset)
    train_ds, val_ds, _ = split_classes(full, config.split_fractions, config.split_seed)
    backbone = _build_backbone(config, full)
    opt_state = AdamState.for_params(backbone.parameters())
    nn.save_checkpoint(backbone, out / "ckpt_init.pckp")

    run_val = val_ds.n_classes >= config.eval_spec.n_way
    with open(out / "per_epoch.csv", "w", newline="") as ep_fh, open(
        out / "per_episode.csv", "w", newline=""
    ) as epi_fh:
        ep_csv = csv.writer(ep_fh)
        epi_csv = csv.writer(epi_fh)
        ep_csv.writerow(EPOCH_COLUMNS)
        epi_csv.writerow(EPISODE_COLUMNS)
        ep_fh.flush()
        epi_fh.flush()
        for epoch in range(config.epochs):
            sink: list = []
            report = run_epoch(backbone, opt_state, train_ds, config, epoch, "train", episode_sink=sink)
            ep_csv.writerow(_epoch_row(report))
            for row in sink:
                epi_csv.writerow([_fmt(v) for v in row])
            if on_epoch is not None:
                on_epoch(report)
            if run_val:
                sink = []
                report = run_epoch(
                    backbone, None, val_ds, config, epoch, "eval", split_tag="val", episode_sink=sink
                )
                ep_csv.writerow(_epoch_row(report))
                for row in sink:
                    epi_csv.writerow([_fmt(v) for v in row])
                if on_epoch is not None:
                    on_epoch(report)
            ep_fh.flush()
            epi_fh.flush()
            if (epoch + 1) % config.decay_every == 0:
                nn.save_checkpoint(backbone, out / f"ckpt_epoch{epoch + 1:03d}.pckp")
    nn.save_checkpoint(backbone, out / "ckpt_final.pckp")
    return out


def evaluate(config: TrainConfig, checkpoint, split: str = "val", out_dir=None) -> EpochReport:
    """One evaluation epoch of a checkpointed backbone on a chosen split."""
    if split not in _SPLIT_CODES:
        raise ContractError(f"split must be one of {sorted(_SPLIT_CODES)}, got {split!r}")
    full = load_dataset(config.dataset)
    parts = dict(zip(("train", "val", "test"), split_classes(full, config.split_fractions, config.split_seed)))
    backbone = nn.load_checkpoint(checkpoint)
    sink: list = []
    report = run_epoch(
        backbone, None, parts[split], config, 0, "eval", split_tag=split, episode_sink=sink
    )
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(config.to_json() + "\n")
        with open(out / "eval_epoch.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(EPOCH_COLUMNS)
            w.writerow(_epoch_row(report))
        with open(out / "eval_episode.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(EPISODE_COLUMNS)
            for row in sink:
                w.writerow([_fmt(v) for v in row])
    return report
