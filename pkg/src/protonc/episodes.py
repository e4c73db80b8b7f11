"""Datasets, class-level splits, and N-way K-shot episode sampling.

A `Dataset` is a list of per-class sample stacks (float64 images, C x H
x W each, values in [0, 1]). Episodes draw N classes uniformly without
replacement, then K_support + K_query samples per class without
replacement; the first K_support go to the support set. Labels inside an
episode are local indices 0..N-1, grouped in contiguous blocks.

The on-disk dataset format ("FSDS") and the directory converter for
grayscale PNG class folders live here too.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import ContractError

DATASET_MAGIC = b"FSDS"
DATASET_VERSION = 1

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif"}


@dataclass(frozen=True)
class EpisodeSpec:
    """N-way K-shot episode geometry."""

    n_way: int
    k_support: int
    k_query: int

    def __post_init__(self):
        if self.n_way < 2:
            raise ContractError(f"n_way must be >= 2, got {self.n_way}")
        if self.k_support < 1 or self.k_query < 1:
            raise ContractError(
                f"k_support/k_query must be >= 1, got {self.k_support}/{self.k_query}"
            )


@dataclass
class Dataset:
    """Per-class sample stacks with a shared image spec (C, H, W)."""

    class_names: list[str]
    samples: list[np.ndarray]  # one [n_i, C, H, W] stack per class
    image_spec: tuple[int, int, int]

    @property
    def n_classes(self) -> int:
        return len(self.samples)

    def min_samples_per_class(self) -> int:
        return min(s.shape[0] for s in self.samples) if self.samples else 0


@dataclass
class Episode:
    """One meta-learning task: disjoint support and query sets."""

    support_images: np.ndarray  # [N*Ks, C, H, W]
    support_labels: np.ndarray  # local labels, block-sorted
    query_images: np.ndarray  # [N*Kq, C, H, W]
    query_labels: np.ndarray
    class_ids: list[int]  # global ids of the N chosen classes


def synth_gaussian(
    n_classes: int,
    dim_spec: tuple[int, int, int],
    sigma: float,
    separation: float,
    samples_per_class: int,
    seed: int,
) -> Dataset:
    """Synthetic dataset: per-class Gaussian blobs around separated means.

    Class means are drawn once, then rescaled so the minimum pairwise L2
    distance equals `separation`. Samples are mean + sigma * N(0, I),
    fully determined by `seed`.
    """
    if n_classes < 2:
        raise ContractError(f"n_classes must be >= 2, got {n_classes}")
    if sigma < 0:
        raise ContractError(f"sigma must be >= 0, got {sigma}")
    c, h, w = dim_spec
    dim = c * h * w
    rng = np.random.default_rng(seed)
    means = rng.standard_normal((n_classes, dim))
    diffs = means[:, None, :] - means[None, :, :]
    dists = np.sqrt((diffs * diffs).sum(axis=2))
    dmin = dists[~np.eye(n_classes, dtype=bool)].min()
    if separation > 0:
        means = means * (separation / dmin)
    samples = []
    for n in range(n_classes):
        noise = rng.standard_normal((samples_per_class, dim))
        block = means[n] + sigma * noise
        samples.append(block.reshape(samples_per_class, c, h, w))
    names = [f"gauss_{n:04d}" for n in range(n_classes)]
    return Dataset(names, samples, (c, h, w))


def split_classes(
    dataset: Dataset, fractions: tuple[float, float, float], seed: int
) -> tuple[Dataset, Dataset, Dataset]:
    """Partition classes (not samples) into train/val/test by a seeded shuffle.

    Validation and test counts are floored; the remainder goes to train.
    A split whose fraction is positive must receive at least one class.
    """
    ftrain, fval, ftest = fractions
    if min(fractions) < 0 or abs(ftrain + fval + ftest - 1.0) > 1e-9:
        raise ContractError(f"fractions must be non-negative and sum to 1, got {fractions}")
    n = dataset.n_classes
    n_val = int(np.floor(fval * n))
    n_test = int(np.floor(ftest * n))
    n_train = n - n_val - n_test
    for count, frac, name in ((n_train, ftrain, "train"), (n_val, fval, "val"), (n_test, ftest, "test")):
        if frac > 0 and count == 0:
            raise ContractError(f"{name} split would receive 0 classes for fractions {fractions}")
    perm = np.random.default_rng(seed).permutation(n)
    groups = (perm[:n_train], perm[n_train : n_train + n_val], perm[n_train + n_val :])

    def take(idx):
        idx = sorted(int(i) for i in idx)
        return Dataset(
            [dataset.class_names[i] for i in idx],
            [dataset.samples[i] for i in idx],
            dataset.image_spec,
        )

    return take(groups[0]), take(groups[1]), take(groups[2])


def sample_episode(dataset: Dataset, spec: EpisodeSpec, rng: np.random.Generator) -> Episode:
    """Draw one episode: N classes, then Ks+Kq disjoint samples per class."""
    n, ks, kq = spec.n_way, spec.k_support, spec.k_query
    if dataset.n_classes < n:
        raise ContractError(
            f"episode needs {n} classes, dataset has only {dataset.n_classes}"
        )
    need = ks + kq
    chosen = rng.choice(dataset.n_classes, size=n, replace=False)
    c, h, w = dataset.image_spec
    support = np.empty((n * ks, c, h, w))
    query = np.empty((n * kq, c, h, w))
    for local, cls in enumerate(chosen):
        stack = dataset.samples[cls]
        if stack.shape[0] < need:
            raise ContractError(
                f"class {dataset.class_names[cls]!r} has {stack.shape[0]} samples, "
                f"episode needs {need}"
            )
        idx = rng.choice(stack.shape[0], size=need, replace=False)
        support[local * ks : (local + 1) * ks] = stack[idx[:ks]]
        query[local * kq : (local + 1) * kq] = stack[idx[ks:]]
    support_labels = np.repeat(np.arange(n), ks)
    query_labels = np.repeat(np.arange(n), kq)
    return Episode(support, support_labels, query, query_labels, [int(i) for i in chosen])


# ---------------------------------------------------------------------------
# Binary dataset format ("FSDS")
# ---------------------------------------------------------------------------


def save_dataset(dataset: Dataset, path) -> None:
    c, h, w = dataset.image_spec
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<5I", DATASET_VERSION, dataset.n_classes, c, h, w))
        for name, stack in zip(dataset.class_names, dataset.samples):
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", stack.shape[0]))
            fh.write(np.ascontiguousarray(stack, dtype="<f8").tobytes())


def load_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != DATASET_MAGIC:
            raise ContractError(f"{path}: bad dataset magic {magic!r}")
        version, n_classes, c, h, w = struct.unpack("<5I", fh.read(20))
        if version != DATASET_VERSION:
            raise ContractError(f"{path}: unsupported dataset version {version}")
        names, samples = [], []
        for _ in range(n_classes):
            (name_len,) = struct.unpack("<I", fh.read(4))
            names.append(fh.read(name_len).decode("utf-8"))
            (count,) = struct.unpack("<I", fh.read(4))
            raw = fh.read(8 * count * c * h * w)
            samples.append(
                np.frombuffer(raw, dtype="<f8").reshape(count, c, h, w).astype(np.float64)
            )
    return Dataset(names, samples, (c, h, w))


# ---------------------------------------------------------------------------
# Image directory conversion
# ---------------------------------------------------------------------------


@dataclass
class ConvertSummary:
    classes: int
    samples: int
    warnings: list[str] = field(default_factory=list)


def resize_area(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Exact area-average resize: each target pixel is the mean of the
    source intensity over its (fractional) box."""
    wh = _overlap_weights(img.shape[0], out_h)
    ww = _overlap_weights(img.shape[1], out_w)
    num = wh @ img @ ww.T
    # Same operation sequence as the numerator so constant images stay
    # exactly constant (0 stays 0, 1 stays 1).
    den = wh @ np.ones_like(img) @ ww.T
    return num / den


def _overlap_weights(src: int, dst: int) -> np.ndarray:
    """Row i holds the overlap length of source cell j with target box i."""
    weights = np.zeros((dst, src))
    scale = src / dst
    for i in range(dst):
        lo, hi = i * scale, (i + 1) * scale
        j0, j1 = int(np.floor(lo)), int(np.ceil(hi))
        for j in range(j0, min(j1, src)):
            weights[i, j] = min(hi, j + 1) - max(lo, j)
    return weights


def _find_class_dirs(src_dir: Path) -> list[Path]:
    """Leaf directories (no subdirectories) under `src_dir`, sorted by path."""
    leaves = []
    stack = [src_dir]
    while stack:
        d = stack.pop()
        subdirs = sorted(p for p in d.iterdir() if p.is_dir())
        if subdirs:
            stack.extend(subdirs)
        elif d != src_dir:
            leaves.append(d)
    return sorted(leaves)


def convert_image_dir(
    src_dir,
    dst_file,
    invert: bool = True,
    rotations: bool = False,
    size: tuple[int, int] = (28, 28),
) -> ConvertSummary:
    """Convert a directory of grayscale image class folders to FSDS.

    Images are decoded, resized to `size` by area averaging, scaled to
    [0, 1], and optionally inverted (ink convention: ink = 1, background
    = 0). With `rotations`, each class additionally yields three classes
    of 90/180/270-degree rotated copies. Unreadable images are skipped
    with a warning; a class directory with no images is a hard error.
    """
    from PIL import Image

    src_dir = Path(src_dir)
    if not src_dir.is_dir():
        raise ContractError(f"{src_dir} is not a directory")
    class_dirs = _find_class_dirs(src_dir)
    if not class_dirs:
        raise ContractError(f"{src_dir} contains no class subdirectories")
    names: list[str] = []
    stacks: list[np.ndarray] = []
    warnings: list[str] = []
    out_h, out_w = size
    for cdir in class_dirs:
        files = sorted(p for p in cdir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        images = []
        for f in files:
            try:
                with Image.open(f) as im:
                    arr = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
            except Exception as exc:  # noqa: BLE001 - decoding failures degrade to a warning
                warnings.append(f"skipped {f}: {exc}")
                continue
            if invert:
                arr = 1.0 - arr
            images.append(resize_area(arr, out_h, out_w))
        if not images:
            raise ContractError(f"class directory {cdir} contains no readable images")
        name = cdir.relative_to(src_dir).as_posix()
        base = np.stack(images)[:, None, :, :]  # [n, 1, H, W]
        if rotations:
            for k in range(4):
                rotated = np.rot90(base, k=k, axes=(2, 3)).copy()
                names.append(f"{name}/rot{90 * k:03d}")
                stacks.append(rotated)
        else:
            names.append(name)
            stacks.append(base)
    dataset = Dataset(names, stacks, (1, out_h, out_w))
    save_dataset(dataset, dst_file)
    return ConvertSummary(len(names), int(sum(s.shape[0] for s in stacks)), warnings)
