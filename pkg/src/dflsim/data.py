"""Datasets, IDX file loading, synthetic generators, and partitioning of a
pool across federation nodes."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IDX_IMAGE_MAGIC = 2051
IDX_LABEL_MAGIC = 2049


class FormatError(ValueError):
    """Raised when an input file does not match its declared format."""


@dataclass(frozen=True)
class Dataset:
    """A flat supervised dataset.

    features: float32 array of shape (n, d)
    labels:   int64 array of shape (n,), values in [0, num_classes)
    kind:     "image" or "tabular"; image datasets carry their (h, w) so
              pixel-level attacks can address the grid.
    """

    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    kind: str = "tabular"
    image_hw: tuple[int, int] | None = None

    def __post_init__(self):
        f = np.ascontiguousarray(self.features, dtype=np.float32)
        y = np.ascontiguousarray(self.labels, dtype=np.int64)
        if f.ndim != 2:
            raise ValueError(f"features must be 2-d, got shape {f.shape}")
        if y.shape != (f.shape[0],):
            raise ValueError("labels must be 1-d and match the feature rows")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if y.size and (y.min() < 0 or y.max() >= self.num_classes):
            raise ValueError("labels out of range")
        if self.kind not in ("image", "tabular"):
            raise ValueError(f"unknown dataset kind {self.kind!r}")
        if self.kind == "image":
            if self.image_hw is None:
                raise ValueError("image datasets need image_hw")
            h, w = self.image_hw
            if h * w != f.shape[1]:
                raise ValueError(f"image_hw {self.image_hw} does not match {f.shape[1]} features")
        object.__setattr__(self, "features", f)
        object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def num_features(self) -> int:
        return self.features.shape[1]

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.num_classes,
                       self.kind, self.image_hw)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


@dataclass(frozen=True)
class NodeData:
    """One node's slice of the pool, already split into roles.

    indices maps each split name to the sample positions it took from the
    source pool, so a partition can be audited and re-created exactly.
    """

    train: Dataset
    val: Dataset
    test: Dataset
    indices: dict[str, np.ndarray] | None = None

    def __post_init__(self):
        for part in (self.train, self.val, self.test):
            if len(part) == 0:
                raise ValueError("every node split must be nonempty")


def _open_maybe_gzip(path: Path):
    with open(path, "rb") as fh:
        head = fh.read(2)
    if head == b"\x1f\x8b":
        return gzip.open(path, "rb")
    return open(path, "rb")


def _read_exact(fh, n: int, path: Path) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"{path}: truncated, wanted {n} bytes got {len(buf)}")
    return buf


def load_idx_images(path) -> np.ndarray:
    """Big-endian IDX image file (optionally gzipped) as float32 in [0, 1].

    Returns an array of shape (n, rows, cols).
    """
    path = Path(path)
    with _open_maybe_gzip(path) as fh:
        magic, n, rows, cols = struct.unpack(">iiii", _read_exact(fh, 16, path))
        if magic != IDX_IMAGE_MAGIC:
            raise FormatError(f"{path}: bad image magic {magic}, expected {IDX_IMAGE_MAGIC}")
        raw = _read_exact(fh, n * rows * cols, path)
    pixels = np.frombuffer(raw, dtype=np.uint8).reshape(n, rows, cols)
    return pixels.astype(np.float32) / 255.0


def load_idx_labels(path) -> np.ndarray:
    """Big-endian IDX label file (optionally gzipped) as int64."""
    path = Path(path)
    with _open_maybe_gzip(path) as fh:
        magic, n = struct.unpack(">ii", _read_exact(fh, 8, path))
        if magic != IDX_LABEL_MAGIC:
            raise FormatError(f"{path}: bad label magic {magic}, expected {IDX_LABEL_MAGIC}")
        raw = _read_exact(fh, n, path)
    return np.frombuffer(raw, dtype=np.uint8).astype(np.int64)


def load_idx_dataset(images_path, labels_path, num_classes: int = 10) -> Dataset:
    """Pair an IDX image file with its label file into an image Dataset."""
    images = load_idx_images(images_path)
    labels = load_idx_labels(labels_path)
    if images.shape[0] != labels.shape[0]:
        raise FormatError(
            f"image/label count mismatch: {images.shape[0]} vs {labels.shape[0]}")
    n, h, w = images.shape
    return Dataset(images.reshape(n, h * w), labels, num_classes, "image", (h, w))


def synth_images(num_classes: int = 10, samples_per_class: int = 120,
                 image_hw: tuple[int, int] = (12, 12), noise: float = 0.15,
                 seed: int = 0) -> Dataset:
    """Synthetic image pool: one random template per class plus pixel noise.

    Templates are far apart in pixel space, so a small MLP separates the
    classes within a few epochs; that keeps desk-scale runs fast while the
    federation dynamics stay nontrivial.
    """
    h, w = image_hw
    rng = np.random.default_rng(seed)
    templates = rng.uniform(0.0, 1.0, (num_classes, h * w))
    n = num_classes * samples_per_class
    labels = np.repeat(np.arange(num_classes), samples_per_class)
    features = templates[labels] + noise * rng.standard_normal((n, h * w))
    np.clip(features, 0.0, 1.0, out=features)
    order = rng.permutation(n)
    return Dataset(features[order], labels[order], num_classes, "image", image_hw)


def synth_tabular(num_classes: int = 10, samples_per_class: int = 120,
                  num_features: int = 24, spread: float = 0.8,
                  noise: float = 0.1, seed: int = 0) -> Dataset:
    """Synthetic tabular pool: per-class mean vectors plus gaussian noise.

    Feature values land in [0, 1], leaving headroom for attacks that pin
    leading columns to 1.
    """
    rng = np.random.default_rng(seed)
    lo, hi = 0.5 - spread / 2.0, 0.5 + spread / 2.0
    means = rng.uniform(lo, hi, (num_classes, num_features))
    n = num_classes * samples_per_class
    labels = np.repeat(np.arange(num_classes), samples_per_class)
    features = means[labels] + noise * rng.standard_normal((n, num_features))
    np.clip(features, 0.0, 1.0, out=features)
    order = rng.permutation(n)
    return Dataset(features[order], labels[order], num_classes, "tabular")


@dataclass(frozen=True)
class PartitionConfig:
    """How a pool is spread across nodes and split within each node."""

    n_nodes: int
    scheme: str = "iid"
    alpha: float = 0.5
    test_frac: float = 1.0 / 7.0
    val_frac: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.n_nodes < 1:
            raise ValueError("n_nodes must be >= 1")
        if self.scheme not in ("iid", "dirichlet"):
            raise ValueError(f"unknown partition scheme {self.scheme!r}")
        if self.scheme == "dirichlet" and self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if not 0.0 < self.test_frac < 1.0:
            raise ValueError("test_frac must be in (0, 1)")
        if not 0.0 < self.val_frac < 1.0:
            raise ValueError("val_frac must be in (0, 1)")


def _iid_assignment(labels: np.ndarray, cfg: PartitionConfig,
                    rng: np.random.Generator) -> list[list[int]]:
    """Deal each class round-robin, rotating the starting node per class so
    remainder samples do not pile onto node 0."""
    per_node: list[list[int]] = [[] for _ in range(cfg.n_nodes)]
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(len(idx))]
        offset = int(c) % cfg.n_nodes
        for k, sample in enumerate(idx):
            per_node[(offset + k) % cfg.n_nodes].append(int(sample))
    return per_node


def _dirichlet_assignment(labels: np.ndarray, num_classes: int, cfg: PartitionConfig,
                          rng: np.random.Generator) -> list[list[int]]:
    """Per-class node proportions drawn from a symmetric Dirichlet; counts
    rounded by largest remainder so each class is spent exactly."""
    per_node: list[list[int]] = [[] for _ in range(cfg.n_nodes)]
    for c in range(num_classes):
        idx = np.flatnonzero(labels == c)
        if len(idx) == 0:
            continue
        idx = idx[rng.permutation(len(idx))]
        props = rng.dirichlet(np.full(cfg.n_nodes, cfg.alpha))
        raw = props * len(idx)
        counts = np.floor(raw).astype(np.int64)
        short = len(idx) - int(counts.sum())
        if short > 0:
            order = np.argsort(-(raw - counts), kind="stable")
            counts[order[:short]] += 1
        pos = 0
        for node, take in enumerate(counts):
            per_node[node].extend(int(s) for s in idx[pos:pos + take])
            pos += take
    return per_node


def _repair_minimum(per_node: list[list[int]], floor: int,
                    rng: np.random.Generator) -> None:
    """Move samples from the fullest nodes until every node has at least
    `floor`. Keeps skewed partitions usable: each node still needs enough
    data for a train/val/test split."""
    while True:
        sizes = [len(p) for p in per_node]
        needy = min(range(len(sizes)), key=lambda i: sizes[i])
        if sizes[needy] >= floor:
            return
        donor = max(range(len(sizes)), key=lambda i: sizes[i])
        if sizes[donor] <= floor:
            raise ValueError("pool too small to give every node its minimum share")
        take = rng.integers(0, sizes[donor])
        per_node[needy].append(per_node[donor].pop(int(take)))


def partition(pool: Dataset, cfg: PartitionConfig) -> list[NodeData]:
    """Split a pool into per-node train/val/test datasets.

    Within each node the test split takes test_frac of the allocation and
    the validation split takes val_frac of what remains, so validation
    tracks the local training distribution.
    """
    rng = np.random.default_rng(cfg.seed)
    if cfg.scheme == "iid":
        per_node = _iid_assignment(pool.labels, cfg, rng)
    else:
        per_node = _dirichlet_assignment(pool.labels, pool.num_classes, cfg, rng)
    # every node needs at least num_classes samples, and no fewer than the
    # three its train/val/test split requires
    floor = max(pool.num_classes, 3)
    _repair_minimum(per_node, floor, rng)

    nodes = []
    for assigned in per_node:
        idx = np.asarray(assigned, dtype=np.int64)
        idx = idx[rng.permutation(len(idx))]
        n = len(idx)
        n_test = max(1, round(n * cfg.test_frac))
        rest = n - n_test
        n_val = max(1, round(rest * cfg.val_frac))
        n_train = rest - n_val
        if n_train < 1:
            raise ValueError("node allocation too small to split")
        splits = {"train": idx[:n_train],
                  "val": idx[n_train:n_train + n_val],
                  "test": idx[n_train + n_val:]}
        nodes.append(NodeData(
            train=pool.subset(splits["train"]),
            val=pool.subset(splits["val"]),
            test=pool.subset(splits["test"]),
            indices=splits,
        ))
    return nodes


def bootstrap_size(val_size: int) -> int:
    """Number of validation samples used for one aggregation round."""
    if val_size < 1:
        raise ValueError("validation set is empty")
    return min(val_size, max(-(-val_size // 3), 300))


def sample_bootstrap(val: Dataset, seed: int) -> Dataset:
    """Draw the per-round bootstrap subset from a validation set, without
    replacement."""
    size = bootstrap_size(len(val))
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(val), size=size, replace=False)
    return val.subset(np.sort(idx))


def stratified_subset(ds: Dataset, n: int, seed: int) -> Dataset:
    """Subset of about n samples keeping class proportions; useful for
    trimming a large pool down to desk scale."""
    if n >= len(ds):
        return ds
    rng = np.random.default_rng(seed)
    keep: list[np.ndarray] = []
    frac = n / len(ds)
    for c in range(ds.num_classes):
        idx = np.flatnonzero(ds.labels == c)
        take = max(1, round(len(idx) * frac)) if len(idx) else 0
        if take:
            keep.append(rng.choice(idx, size=min(take, len(idx)), replace=False))
    idx = np.sort(np.concatenate(keep))
    return ds.subset(idx)
