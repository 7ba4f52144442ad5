"""Datasets and the dominated-label non-IID client partition."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .linalg import RngStream

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IdxError(ValueError):
    """Base class for IDX parsing failures."""


class IdxFormatError(IdxError):
    pass


class IdxTruncatedError(IdxError):
    pass


class IdxCountMismatchError(IdxError):
    pass


@dataclass(frozen=True)
class Dataset:
    """Labeled samples; ``features`` is (n, d), ``labels`` is (n,) of ints."""

    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self) -> None:
        feats = np.asarray(self.features, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if feats.ndim != 2 or labels.ndim != 1 or feats.shape[0] != labels.shape[0]:
            raise ValueError("features must be (n, d) and labels (n,)")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise ValueError("label out of range")
        feats.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def dim(self) -> int:
        return int(self.features.shape[1])

    def subset(self, idx: np.ndarray) -> "Dataset":
        return Dataset(self.features[idx], self.labels[idx], self.num_classes)


@dataclass(frozen=True)
class PartitionConfig:
    num_clients: int = 50
    non_iid_degree: float = 0.5
    size_range: tuple[int, int] = (10, 120)
    seed: int = 0

    def __post_init__(self) -> None:
        if self.num_clients < 1:
            raise ValueError("num_clients must be >= 1")
        if not 0.0 <= self.non_iid_degree <= 1.0:
            raise ValueError("non_iid_degree must lie in [0, 1]")
        lo, hi = self.size_range
        if lo < 1 or hi < lo:
            raise ValueError(f"invalid size_range {self.size_range}")


@dataclass(frozen=True)
class PartitionedDataset:
    shards: list[Dataset]
    dominated_labels: list[int]
    sizes: list[int] = field(default_factory=list)

    @property
    def num_clients(self) -> int:
        return len(self.shards)

    @property
    def total_samples(self) -> int:
        return sum(self.sizes)


def generate_synthetic(
    num_classes: int,
    dim: int,
    samples_per_class: int,
    class_separation: float,
    rng: RngStream,
) -> Dataset:
    """Gaussian blobs, one per class, with unit per-coordinate noise.

    Class means sit at distance ``class_separation`` from the origin along
    mutually orthogonal random directions (random unit directions when there
    are more classes than dimensions).
    """
    if num_classes < 2 or dim < 2:
        raise ValueError("need at least 2 classes and 2 dimensions")
    gauss = rng.standard_normal((dim, num_classes))
    if num_classes <= dim:
        directions, _ = np.linalg.qr(gauss)
    else:
        directions = gauss / np.linalg.norm(gauss, axis=0)
    means = class_separation * directions.T
    labels = np.repeat(np.arange(num_classes), samples_per_class)
    features = means[labels] + rng.standard_normal((labels.size, dim))
    order = rng.permutation(labels.size)
    return Dataset(features[order], labels[order], num_classes)


def train_test_split(ds: Dataset, test_fraction: float, rng: RngStream) -> tuple[Dataset, Dataset]:
    """Uniform random holdout split."""
    n = len(ds)
    n_test = int(round(test_fraction * n))
    perm = rng.permutation(n)
    return ds.subset(np.sort(perm[n_test:])), ds.subset(np.sort(perm[:n_test]))


def _read_header(buf: bytes, n_ints: int, path: Path) -> tuple[int, ...]:
    if len(buf) < 4 * n_ints:
        raise IdxTruncatedError(f"{path}: header truncated")
    return struct.unpack(f">{n_ints}I", buf[: 4 * n_ints])


def load_idx(images_path: str | Path, labels_path: str | Path, num_classes: int = 10) -> Dataset:
    """Load an MNIST-layout IDX image/label pair, scaling pixels to [0, 1]."""
    images_path, labels_path = Path(images_path), Path(labels_path)
    img_buf = images_path.read_bytes()
    lbl_buf = labels_path.read_bytes()

    (magic,) = _read_header(img_buf, 1, images_path)
    if magic != IDX_IMAGES_MAGIC:
        raise IdxFormatError(f"{images_path}: bad magic 0x{magic:08x}")
    _, count, rows, cols = _read_header(img_buf, 4, images_path)
    expected = 16 + count * rows * cols
    if len(img_buf) < expected:
        raise IdxTruncatedError(f"{images_path}: expected {expected} bytes, got {len(img_buf)}")

    (magic,) = _read_header(lbl_buf, 1, labels_path)
    if magic != IDX_LABELS_MAGIC:
        raise IdxFormatError(f"{labels_path}: bad magic 0x{magic:08x}")
    _, n_labels = _read_header(lbl_buf, 2, labels_path)
    if len(lbl_buf) < 8 + n_labels:
        raise IdxTruncatedError(f"{labels_path}: expected {8 + n_labels} bytes, got {len(lbl_buf)}")
    if n_labels != count:
        raise IdxCountMismatchError(f"{count} images but {n_labels} labels")

    pixels = np.frombuffer(img_buf, dtype=np.uint8, count=count * rows * cols, offset=16)
    features = pixels.reshape(count, rows * cols).astype(np.float64) / 255.0
    labels = np.frombuffer(lbl_buf, dtype=np.uint8, count=n_labels, offset=8).astype(np.int64)
    return Dataset(features, labels, max(num_classes, int(labels.max(initial=0)) + 1))


def partition(ds: Dataset, cfg: PartitionConfig, rng: RngStream) -> PartitionedDataset:
    """Split ``ds`` across clients with a random dominated label per client.

    Each sample of client k comes from its dominated label with probability
    ``q`` and from each other label with probability ``(1 - q) / (L - 1)``;
    the concrete sample is then drawn uniformly (with replacement) from that
    class. The source dataset is never modified.
    """
    if len(ds) == 0:
        raise ValueError("cannot partition an empty dataset")
    L = ds.num_classes
    pools = [np.flatnonzero(ds.labels == c) for c in range(L)]
    q = cfg.non_iid_degree
    lo, hi = cfg.size_range

    shards, dominated, sizes = [], [], []
    for _ in range(cfg.num_clients):
        label = int(rng.integers(L))
        size = int(rng.integers(lo, hi + 1))
        if L > 1:
            offsets = rng.integers(1, L, size=size)
            other = (label + offsets) % L
            classes = np.where(rng.random(size) < q, label, other)
        else:
            classes = np.zeros(size, dtype=np.int64)
        idx = np.empty(size, dtype=np.int64)
        for c in np.unique(classes):
            pool = pools[c]
            if pool.size == 0:
                raise ValueError(f"class {c} has no samples to draw from")
            where = np.flatnonzero(classes == c)
            idx[where] = pool[rng.integers(pool.size, size=where.size)]
        shards.append(ds.subset(idx))
        dominated.append(label)
        sizes.append(size)
    return PartitionedDataset(shards, dominated, sizes)
