"""Poisoning attacks: malicious-node selection, model noise injection,
label flipping, and backdoor triggers.

Data attacks rewrite a node's training split once at setup; the model noise
attack rewrites the parameters a node shares each round while it keeps
training honestly on its own copy.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .params import LayeredParams, flatten, unflatten

ATTACK_KINDS = ("none", "model_poison", "label_flip_untargeted",
                "label_flip_targeted", "backdoor")
TRIGGER_KINDS = ("pixel_cross", "leading_ones")
TRIGGER_POSITIONS = ("top_left", "top_right", "bottom_left", "bottom_right", "center")


@dataclass(frozen=True)
class TriggerConfig:
    """Backdoor trigger.

    pixel_cross paints an X (both diagonals of a size x size square) at full
    intensity into a corner of the image grid. leading_ones pins the first
    num_columns feature columns of a tabular row to 1.
    """

    kind: str
    size: int = 5
    position: str = "top_left"
    num_columns: int = 7

    def __post_init__(self):
        if self.kind not in TRIGGER_KINDS:
            raise ValueError(f"unknown trigger kind {self.kind!r}")
        if self.kind == "pixel_cross":
            if self.size < 2:
                raise ValueError("trigger size must be >= 2")
            if self.position not in TRIGGER_POSITIONS:
                raise ValueError(f"unknown trigger position {self.position!r}")
        if self.kind == "leading_ones" and self.num_columns < 1:
            raise ValueError("num_columns must be >= 1")


@dataclass(frozen=True)
class AttackConfig:
    """What the malicious nodes do and how many of them there are."""

    kind: str = "none"
    pnr: float = 0.0
    noise_ratio: float = 0.8
    amplitude: float = 1.0
    source_class: int = 0
    target_class: int = 0
    implant_fraction: float = 0.2
    trigger: TriggerConfig | None = None

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}")
        if not 0.0 <= self.pnr <= 1.0:
            raise ValueError("pnr must be in [0, 1]")
        if self.kind == "model_poison":
            if not 0.0 <= self.noise_ratio <= 1.0:
                raise ValueError("noise_ratio must be in [0, 1]")
            if self.amplitude <= 0.0:
                raise ValueError("amplitude must be positive")
        if self.kind == "label_flip_targeted" and self.source_class == self.target_class:
            raise ValueError("targeted flip needs distinct source and target classes")
        if self.kind == "backdoor":
            if self.trigger is None:
                raise ValueError("backdoor attack needs a trigger")
            if not 0.0 <= self.implant_fraction <= 1.0:
                raise ValueError("implant_fraction must be in [0, 1]")


def select_malicious(n_nodes: int, pnr: float, seed: int,
                     exclude: tuple[int, ...] = ()) -> tuple[int, ...]:
    """Pick round(pnr * n_nodes) node ids uniformly at random.

    Nodes in `exclude` are never picked, so an experiment can reserve a
    known-benign observer.
    """
    if not 0.0 <= pnr <= 1.0:
        raise ValueError("pnr must be in [0, 1]")
    k = int(np.floor(pnr * n_nodes + 0.5))
    candidates = [i for i in range(n_nodes) if i not in exclude]
    if k > len(candidates):
        raise ValueError(f"cannot pick {k} malicious nodes from {len(candidates)} candidates")
    rng = np.random.default_rng(seed)
    chosen = rng.choice(len(candidates), size=k, replace=False)
    return tuple(sorted(candidates[int(i)] for i in chosen))


def poison_model(params: LayeredParams, noise_ratio: float, amplitude: float,
                 seed: int) -> LayeredParams:
    """Overwrite a random slice of the flattened parameters with +-amplitude.

    Exactly round(noise_ratio * num_values) coordinates are hit; the rest
    pass through untouched. A ratio of 0 returns the params unchanged.
    """
    if not 0.0 <= noise_ratio <= 1.0:
        raise ValueError("noise_ratio must be in [0, 1]")
    flat = flatten(params).astype(np.float64)
    total = flat.size
    k = int(np.floor(noise_ratio * total + 0.5))
    rng = np.random.default_rng(seed)
    idx = rng.choice(total, size=k, replace=False)
    signs = rng.integers(0, 2, size=k) * 2 - 1
    flat[idx] = amplitude * signs.astype(np.float64)
    return unflatten(flat, params)


def flip_labels_untargeted(ds: Dataset, seed: int) -> Dataset:
    """Move every label to a uniformly random different class."""
    rng = np.random.default_rng(seed)
    offsets = 1 + rng.integers(0, ds.num_classes - 1, size=len(ds))
    labels = (ds.labels + offsets) % ds.num_classes
    return Dataset(ds.features, labels, ds.num_classes, ds.kind, ds.image_hw)


def flip_labels_targeted(ds: Dataset, source_class: int, target_class: int) -> Dataset:
    """Relabel every source_class sample as target_class."""
    if source_class == target_class:
        raise ValueError("source and target classes must differ")
    mask = ds.labels == source_class
    if not mask.any():
        warnings.warn(f"no samples of class {source_class} to flip; dataset unchanged")
    labels = ds.labels.copy()
    labels[mask] = target_class
    return Dataset(ds.features, labels, ds.num_classes, ds.kind, ds.image_hw)


def trigger_pixel_indices(trigger: TriggerConfig, image_hw: tuple[int, int]) -> np.ndarray:
    """Flat feature indices painted by a pixel_cross trigger."""
    h, w = image_hw
    s = trigger.size
    if s > min(h, w):
        raise ValueError(f"trigger size {s} exceeds image {image_hw}")
    if trigger.position == "top_left":
        r0, c0 = 0, 0
    elif trigger.position == "top_right":
        r0, c0 = 0, w - s
    elif trigger.position == "bottom_left":
        r0, c0 = h - s, 0
    elif trigger.position == "bottom_right":
        r0, c0 = h - s, w - s
    else:
        r0, c0 = (h - s) // 2, (w - s) // 2
    cells = set()
    for i in range(s):
        cells.add((r0 + i, c0 + i))
        cells.add((r0 + i, c0 + s - 1 - i))
    return np.array(sorted(r * w + c for r, c in cells), dtype=np.int64)


def apply_trigger(features: np.ndarray, trigger: TriggerConfig,
                  kind: str, image_hw: tuple[int, int] | None) -> np.ndarray:
    """Stamp the trigger onto a copy of the given feature rows."""
    out = np.array(features, dtype=np.float32, copy=True)
    if trigger.kind == "pixel_cross":
        if kind != "image" or image_hw is None:
            raise ValueError("pixel_cross trigger needs an image dataset")
        out[:, trigger_pixel_indices(trigger, image_hw)] = 1.0
    else:
        if trigger.num_columns > out.shape[1]:
            raise ValueError(
                f"trigger spans {trigger.num_columns} columns, data has {out.shape[1]}")
        out[:, :trigger.num_columns] = 1.0
    return out


def implant_backdoor(ds: Dataset, trigger: TriggerConfig, target_class: int,
                     fraction: float, seed: int) -> Dataset:
    """Trigger and relabel a random fraction of the samples.

    The poisoned rows get the trigger stamped on and their label replaced by
    target_class; everything else stays clean so the model keeps its normal
    accuracy. A fraction of 0 returns the dataset unchanged.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must be in [0, 1]")
    if not 0 <= target_class < ds.num_classes:
        raise ValueError("target_class out of range")
    k = int(np.floor(fraction * len(ds) + 0.5))
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(ds), size=k, replace=False)
    features = ds.features.copy()
    features[idx] = apply_trigger(ds.features[idx], trigger, ds.kind, ds.image_hw)
    labels = ds.labels.copy()
    labels[idx] = target_class
    return Dataset(features, labels, ds.num_classes, ds.kind, ds.image_hw)


def build_backdoor_eval_set(test: Dataset, trigger: TriggerConfig,
                            target_class: int) -> Dataset:
    """Triggered copy of a test set keeping the original labels.

    Predictions that land on target_class despite the true label measure the
    backdoor; samples whose true label already is target_class are excluded
    by the metric, not here.
    """
    if not 0 <= target_class < test.num_classes:
        raise ValueError("target_class out of range")
    features = apply_trigger(test.features, trigger, test.kind, test.image_hw)
    return Dataset(features, test.labels, test.num_classes, test.kind, test.image_hw)
