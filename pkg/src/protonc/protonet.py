"""Prototype computation, distance matrices, episode loss, classification.

Prototypes are per-class arithmetic means of support embeddings. Query
points are scored by L2 distance to each prototype: squared by default,
with a plain (non-squared) mode smoothed near zero by sqrt(x + 1e-12).
The episode loss is the mean negative log softmax over negated
distances, evaluated in log space with a max shift; classification is
nearest prototype (argmin distance, ties to the lowest class index).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import (
    ContractError,
    ShapeError,
    Tensor,
    add,
    exponential,
    logarithm,
    mean,
    multiply,
    reshape,
    sqrt,
    squared_norm,
    subtract,
    sum_,
)

DISTANCE_MODES = ("squared", "plain")
PLAIN_EPS = 1e-12


@dataclass
class PrototypeSet:
    """Class prototypes, row c = mean of class c's support embeddings."""

    matrix: Tensor  # [N, d]
    n_way: int
    k_shot: int


def _check_blocks(labels: np.ndarray, name: str) -> tuple[int, int]:
    """Validate block-sorted local labels 0..N-1 with equal block size."""
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.size == 0:
        raise ContractError(f"{name}: labels must be a non-empty 1-d array")
    classes = np.unique(labels)
    n = classes.size
    if not np.array_equal(classes, np.arange(n)):
        raise ContractError(f"{name}: labels must be dense local indices 0..N-1")
    k, rem = divmod(labels.size, n)
    if rem or not np.array_equal(labels, np.repeat(np.arange(n), k)):
        raise ContractError(f"{name}: labels must form {n} complete blocks")
    return n, k


def prototypes(support_embeddings: Tensor, labels: np.ndarray) -> PrototypeSet:
    """Per-class mean of support embeddings; differentiable through them."""
    n, k = _check_blocks(labels, "prototypes")
    m, d = support_embeddings.shape
    if m != n * k:
        raise ContractError(f"prototypes: {m} embeddings but labels describe {n}x{k}")
    grouped = reshape(support_embeddings, (n, k, d))
    return PrototypeSet(mean(grouped, axis=1), n, k)


def distance_matrix(query_embeddings: Tensor, protos: PrototypeSet, mode: str = "squared") -> Tensor:
    """[M, N] matrix of query-to-prototype L2 distances (squared or plain)."""
    if mode not in DISTANCE_MODES:
        raise ContractError(f"unknown distance mode {mode!r}")
    m, d = query_embeddings.shape
    n, dp = protos.matrix.shape
    if d != dp:
        raise ShapeError(f"distance_matrix: feature dims differ, query {d} vs prototypes {dp}")
    diff = subtract(
        reshape(query_embeddings, (m, 1, d)), reshape(protos.matrix, (1, n, d))
    )
    d2 = squared_norm(diff, axis=2)
    if mode == "squared":
        return d2
    return sqrt(add(d2, Tensor(PLAIN_EPS)))


def episode_loss(dists: Tensor, labels: np.ndarray) -> tuple[Tensor, float]:
    """Mean -log softmax(-dists)[label] over queries, plus the error rate.

    The log-sum-exp is max-shifted so large distances cannot overflow.
    The error rate (argmin distance != label) is not differentiable.
    """
    labels = np.asarray(labels)
    m, n = dists.shape
    if labels.shape != (m,):
        raise ContractError(f"episode_loss: {m} rows but {labels.shape} labels")
    if labels.size and (labels.min() < 0 or labels.max() >= n):
        raise ContractError(f"episode_loss: labels out of range 0..{n - 1}")
    # Per query: (d[label] - mn) + log sum_j exp(mn - d_j), mn = min(d) per
    # row. Algebraically -log softmax(-d)[label]; this association keeps
    # both terms non-negative, so the loss can never round below zero. The
    # shift is a constant, so the gradient is the exact softmax.
    mn = Tensor(dists.data.min(axis=1, keepdims=True))
    exp_z = exponential(subtract(mn, dists))
    lse = logarithm(sum_(exp_z, axis=1, keepdims=True))
    onehot = np.zeros((m, n))
    onehot[np.arange(m), labels] = 1.0
    picked = sum_(multiply(dists, Tensor(onehot)), axis=1, keepdims=True)
    loss = mean(add(subtract(picked, mn), lse))
    error_rate = float(np.mean(np.argmin(dists.data, axis=1) != labels))
    return loss, error_rate


def classify(dists) -> np.ndarray:
    """Nearest-prototype labels: per-row argmin, ties to the lowest index."""
    data = dists.data if isinstance(dists, Tensor) else np.asarray(dists)
    return np.argmin(data, axis=1)
