"""Prototypical-network few-shot training with neural-collapse instrumentation."""

from .tensor import (
    ContractError,
    NumericalError,
    ShapeError,
    Tensor,
    backward,
    finite_difference_check,
    no_grad,
)
from .nn import Backbone, count_parameters, embed, init_parameters, load_checkpoint, save_checkpoint
from .episodes import Dataset, Episode, EpisodeSpec, sample_episode, split_classes, synth_gaussian
from .protonet import PrototypeSet, classify, distance_matrix, episode_loss, prototypes
from .collapse import (
    ClassStats,
    CollapseConfig,
    CollapseReport,
    class_statistics,
    episode_collapse,
    etf_gram,
    nc1,
    nc2,
    pinv,
)
from .trainer import AdamState, EpochReport, TrainConfig, adam_step, lr_schedule, run_epoch, train

__version__ = "0.1.0"
