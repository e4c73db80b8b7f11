"""Neural-collapse metrics: class statistics, NC1, and NC2.

Given last-layer features h_{n,k} (N classes, K samples each) the module
computes

* global mean      hG   = (1/KN) sum_{n,k} h_{n,k}
* class means      h_n  = (1/K) sum_k h_{n,k}
* within scatter   S_W  = (1/KN) sum_{n,k} (h - h_n)(h - h_n)^T
* between scatter  S_B  = (1/N) sum_n (h_n - hG)(h_n - hG)^T

NC1 = (1/N) trace(S_W pinv(S_B)) measures within-class variability
relative to between-class spread; the pseudoinverse is essential because
an episode's S_B has rank at most N-1. NC2 is the Frobenius distance
between the normalized class-mean Gram matrix H H^T / ||H H^T||_F and
the simplex-ETF target (I_N - ones/N) / sqrt(N-1). H defaults to the raw
class means ("paper" centering); a "centered" mode subtracting the
global mean is also provided, and reports record which was used.

Everything here operates on plain float64 arrays: metrics are
observations computed on detached features, never training signals.
"""

from __future__ import annotations

from dataclasses import dataclass
import struct

import numpy as np

from .tensor import ContractError, NumericalError, ShapeError

FEATURES_MAGIC = b"FEAT"
FEATURES_VERSION = 1

CENTERING_MODES = ("paper", "centered")

_EPS = np.finfo(np.float64).eps


@dataclass
class ClassStats:
    """Global/class means and scatter matrices for one feature batch."""

    global_mean: np.ndarray  # [d]
    class_means: np.ndarray  # [N, d]
    sigma_w: np.ndarray  # [d, d]
    sigma_b: np.ndarray  # [d, d]
    n_classes: int
    k_per_class: int


@dataclass
class CollapseConfig:
    """Knobs recorded alongside every collapse measurement."""

    nc2_centering: str = "paper"
    rcond: float | None = None  # None -> d * machine epsilon

    def __post_init__(self):
        if self.nc2_centering not in CENTERING_MODES:
            raise ContractError(
                f"nc2_centering must be one of {CENTERING_MODES}, got {self.nc2_centering!r}"
            )


@dataclass
class CollapseReport:
    """NC1/NC2 for the support and query features of one episode."""

    nc1_support: float
    nc2_support: float
    nc1_query: float
    nc2_query: float
    episode_index: int = -1
    nc2_centering: str = "paper"
    rcond: float | None = None


def _as_features(features) -> np.ndarray:
    arr = getattr(features, "data", features)
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"features must be [samples, dim], got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise NumericalError("features contain non-finite values")
    return arr


def class_statistics(features, labels) -> ClassStats:
    """Means and scatter matrices; class blocks must be balanced."""
    feats = _as_features(features)
    labels = np.asarray(labels)
    if labels.shape != (feats.shape[0],):
        raise ContractError(
            f"labels shape {labels.shape} does not match {feats.shape[0]} samples"
        )
    classes, counts = np.unique(labels, return_counts=True)
    if counts.min() != counts.max():
        raise ContractError(
            f"class blocks must be balanced, got sizes {counts.min()}..{counts.max()}"
        )
    n, k = classes.size, int(counts[0])
    d = feats.shape[1]
    global_mean = feats.mean(axis=0)
    class_means = np.empty((n, d))
    sigma_w = np.zeros((d, d))
    for i, cls in enumerate(classes):
        block = feats[labels == cls]
        class_means[i] = block.mean(axis=0)
        centered = block - class_means[i]
        sigma_w += centered.T @ centered
    sigma_w /= n * k
    mc = class_means - global_mean
    sigma_b = (mc.T @ mc) / n
    return ClassStats(global_mean, class_means, sigma_w, sigma_b, n, k)


# ---------------------------------------------------------------------------
# Symmetric eigendecomposition and pseudoinverse
# ---------------------------------------------------------------------------


def jacobi_eigh(a: np.ndarray, tol: float = 1e-12, max_sweeps: int = 100):
    """Cyclic Jacobi eigendecomposition of a symmetric matrix.

    Sweeps the upper triangle with plane rotations until the off-diagonal
    Frobenius norm falls below `tol` times the matrix Frobenius norm,
    then runs one polishing sweep (convergence is quadratic, so that
    lands at the machine floor; inverted small eigenvalues would amplify
    anything coarser). Returns eigenvalues ascending and the matching
    orthonormal columns; fully deterministic.
    """
    a = np.array(a, dtype=np.float64)
    n = a.shape[0]
    if a.ndim != 2 or a.shape[1] != n:
        raise ShapeError(f"jacobi_eigh expects a square matrix, got {a.shape}")
    vecs = np.eye(n)
    norm = np.sqrt((a * a).sum())
    if n == 1 or norm == 0.0:
        return np.diag(a).copy(), vecs
    polished = False
    scratch = np.empty_like(a)
    with np.errstate(over="ignore", divide="ignore"):
        for _ in range(max_sweeps):
            # off-diagonal Frobenius norm, summed directly (a difference of
            # squared sums would cancel away everything below sqrt(eps)*norm)
            np.copyto(scratch, a)
            np.fill_diagonal(scratch, 0.0)
            off = np.sqrt((scratch * scratch).sum())
            if off == 0.0 or (polished and off <= tol * norm):
                break
            if off <= tol * norm:
                polished = True
            for p in range(n - 1):
                for q in range(p + 1, n):
                    apq = a[p, q]
                    if apq == 0.0:
                        continue
                    theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                    t = np.sign(theta) / (abs(theta) + np.hypot(theta, 1.0))
                    if theta == 0.0:
                        t = 1.0
                    c = 1.0 / np.sqrt(t * t + 1.0)
                    s = t * c
                    row_p, row_q = a[p, :].copy(), a[q, :].copy()
                    a[p, :] = c * row_p - s * row_q
                    a[q, :] = s * row_p + c * row_q
                    col_p, col_q = a[:, p].copy(), a[:, q].copy()
                    a[:, p] = c * col_p - s * col_q
                    a[:, q] = s * col_p + c * col_q
                    a[p, q] = a[q, p] = 0.0
                    vec_p, vec_q = vecs[:, p].copy(), vecs[:, q].copy()
                    vecs[:, p] = c * vec_p - s * vec_q
                    vecs[:, q] = s * vec_p + c * vec_q
    w = np.diag(a).copy()
    order = np.argsort(w, kind="stable")
    return w[order], vecs[:, order]


def default_rcond(dim: int) -> float:
    return dim * _EPS


def pinv(m: np.ndarray, rcond: float | None = None) -> np.ndarray:
    """Moore-Penrose pseudoinverse of a symmetric PSD matrix.

    Eigenvalues at or below rcond * lambda_max are treated as zero and
    dropped; the rest are inverted. Default rcond is d * machine epsilon.
    """
    m = np.asarray(m, dtype=np.float64)
    n = m.shape[0]
    if m.ndim != 2 or m.shape[1] != n:
        raise ShapeError(f"pinv expects a square matrix, got {m.shape}")
    scale = max(1.0, np.abs(m).max()) if m.size else 1.0
    if np.abs(m - m.T).max(initial=0.0) > 1e-10 * scale:
        raise ContractError("pinv requires a symmetric matrix (within 1e-10)")
    if rcond is None:
        rcond = default_rcond(n)
    sym = (m + m.T) / 2.0
    w, v = jacobi_eigh(sym)
    lam_max = max(float(w[-1]), 0.0)
    inv = np.where(w > rcond * lam_max, 1.0, 0.0)
    nonzero = inv > 0
    inv[nonzero] = 1.0 / w[nonzero]
    return (v * inv) @ v.T


def nc1(stats: ClassStats, rcond: float | None = None) -> float:
    """(1/N) trace(S_W pinv(S_B)).

    When the feature dimension exceeds the class count, the nonzero
    spectrum of S_B is obtained from the N x N Gram matrix of centered
    class means (same eigenvalues, far cheaper); otherwise S_B is
    pseudo-inverted directly. Both routes apply the same d * eps cutoff.
    """
    n = stats.n_classes
    d = stats.class_means.shape[1]
    cut_factor = default_rcond(d) if rcond is None else rcond
    if d <= n:
        return float(np.trace(stats.sigma_w @ pinv(stats.sigma_b, cut_factor)) / n)
    centered = stats.class_means - stats.global_mean  # [N, d]
    gram = (centered @ centered.T) / n
    w, v = jacobi_eigh(gram)
    lam_max = max(float(w[-1]), 0.0)
    keep = w > cut_factor * lam_max
    if not keep.any():
        return 0.0
    basis = centered.T @ v[:, keep]  # columns span S_B's range, norm sqrt(n*w)
    quad = np.einsum("ij,ij->j", basis, stats.sigma_w @ basis)
    return float(np.sum(quad / (n * w[keep] ** 2)) / n)


# ---------------------------------------------------------------------------
# NC2: simplex-ETF distance
# ---------------------------------------------------------------------------


def etf_gram(n: int) -> np.ndarray:
    """Simplex-ETF Gram target (I_N - ones/N) / sqrt(N-1)."""
    if n < 2:
        raise ContractError(f"etf_gram requires N >= 2, got {n}")
    return (np.eye(n) - np.full((n, n), 1.0 / n)) / np.sqrt(n - 1.0)


def nc2(class_means: np.ndarray, centering: str = "paper", global_mean: np.ndarray | None = None) -> float:
    """Frobenius distance of the normalized class-mean Gram to the ETF target.

    centering="paper" uses the class means as-is; "centered" subtracts
    the global mean (given, or the mean of class means for balanced data).
    """
    means = np.asarray(class_means, dtype=np.float64)
    if means.ndim != 2 or means.shape[0] < 2:
        raise ContractError(f"nc2 needs an [N>=2, d] class-mean matrix, got {means.shape}")
    if centering in ("paper", "paper_literal"):
        h = means
    elif centering == "centered":
        h = means - (global_mean if global_mean is not None else means.mean(axis=0))
    else:
        raise ContractError(f"unknown centering mode {centering!r}")
    gram = h @ h.T
    fro = np.sqrt((gram * gram).sum())
    if fro == 0.0:
        raise NumericalError("nc2: class-mean Gram is zero (degenerate input)")
    n = means.shape[0]
    diff = gram / fro - etf_gram(n)
    return float(np.sqrt((diff * diff).sum()))


def episode_collapse(
    support_features,
    support_labels,
    query_features,
    query_labels,
    config: CollapseConfig | None = None,
    episode_index: int = -1,
) -> CollapseReport:
    """NC1 and NC2 for the support and, separately, the query features."""
    config = config or CollapseConfig()
    s_stats = class_statistics(support_features, support_labels)
    q_stats = class_statistics(query_features, query_labels)
    return CollapseReport(
        nc1_support=nc1(s_stats, config.rcond),
        nc2_support=nc2(s_stats.class_means, config.nc2_centering, s_stats.global_mean),
        nc1_query=nc1(q_stats, config.rcond),
        nc2_query=nc2(q_stats.class_means, config.nc2_centering, q_stats.global_mean),
        episode_index=episode_index,
        nc2_centering=config.nc2_centering,
        rcond=config.rcond,
    )


# ---------------------------------------------------------------------------
# Feature dump format ("FEAT")
# ---------------------------------------------------------------------------


def save_features(path, features: np.ndarray, labels) -> None:
    """Write a FEAT dump: N, K, d then rows grouped by class."""
    feats = _as_features(features)
    labels = np.asarray(labels)
    classes, counts = np.unique(labels, return_counts=True)
    if counts.min() != counts.max():
        raise ContractError("FEAT dumps require balanced class blocks")
    n, k = classes.size, int(counts[0])
    d = feats.shape[1]
    with open(path, "wb") as fh:
        fh.write(FEATURES_MAGIC)
        fh.write(struct.pack("<4I", FEATURES_VERSION, n, k, d))
        for cls in classes:
            block = np.ascontiguousarray(feats[labels == cls], dtype="<f8")
            fh.write(block.tobytes())


def load_features(path) -> tuple[np.ndarray, np.ndarray, int, int]:
    """Read a FEAT dump; returns (features, block labels, N, K)."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != FEATURES_MAGIC:
            raise ContractError(f"{path}: bad feature-dump magic {magic!r}")
        version, n, k, d = struct.unpack("<4I", fh.read(16))
        if version != FEATURES_VERSION:
            raise ContractError(f"{path}: unsupported feature-dump version {version}")
        raw = fh.read(8 * n * k * d)
        feats = np.frombuffer(raw, dtype="<f8").reshape(n * k, d).astype(np.float64)
    labels = np.repeat(np.arange(n), k)
    return feats, labels, n, k
