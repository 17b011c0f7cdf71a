"""Classification and attack metrics computed from confusion counts."""

from __future__ import annotations

import numpy as np


def confusion_matrix(y_true, y_pred, num_classes: int) -> np.ndarray:
    """counts[i][j] = samples with true label i predicted as j."""
    yt = np.asarray(y_true, dtype=np.int64)
    yp = np.asarray(y_pred, dtype=np.int64)
    if yt.shape != yp.shape or yt.ndim != 1:
        raise ValueError("y_true and y_pred must be 1-d and the same length")
    if yt.size and (min(yt.min(), yp.min()) < 0
                    or max(yt.max(), yp.max()) >= num_classes):
        raise ValueError("labels out of range")
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (yt, yp), 1)
    return counts


def _check_square(counts: np.ndarray) -> np.ndarray:
    counts = np.asarray(counts)
    if counts.ndim != 2 or counts.shape[0] != counts.shape[1]:
        raise ValueError("confusion counts must be square")
    return counts.astype(np.int64)


def accuracy(counts: np.ndarray) -> float:
    counts = _check_square(counts)
    total = counts.sum()
    if total == 0:
        raise ValueError("empty confusion counts")
    return float(np.trace(counts) / total)


def macro_f1(counts: np.ndarray) -> float:
    """Unweighted mean of per-class F1.

    A class with neither support nor predictions contributes an F1 of 0, so
    models that never see a class are still penalized for it.
    """
    counts = _check_square(counts)
    if counts.sum() == 0:
        raise ValueError("empty confusion counts")
    scores = []
    for c in range(counts.shape[0]):
        tp = counts[c, c]
        denom = 2 * tp + (counts[:, c].sum() - tp) + (counts[c, :].sum() - tp)
        scores.append(0.0 if denom == 0 else 2.0 * tp / denom)
    return float(np.mean(scores))


def micro_f1(counts: np.ndarray) -> float:
    """Micro-averaged F1; equals accuracy for single-label classification."""
    return accuracy(counts)


def attack_success_rate(counts: np.ndarray, source_class: int,
                        target_class: int) -> float | None:
    """Fraction of source-class samples predicted as the target class.

    None when the evaluation set holds no source-class samples; the rate is
    undefined there rather than zero.
    """
    counts = _check_square(counts)
    support = counts[source_class, :].sum()
    if support == 0:
        return None
    return float(counts[source_class, target_class] / support)


def backdoor_accuracy(counts: np.ndarray, target_class: int,
                      eval_size: int | None = None) -> float | None:
    """How often the trigger steers predictions into the target class.

    Computed on a fully triggered evaluation set that keeps original labels:
    predictions landing on the target class, discounting samples that truly
    belong to it and were predicted as such, over the samples left after
    that same discount. eval_size overrides the set size when the counts
    cover only part of it; None means the counts are complete.
    """
    counts = _check_square(counts)
    t = target_class
    total = int(counts.sum()) if eval_size is None else int(eval_size)
    hits = counts[:, t].sum() - counts[t, t]
    denom = total - counts[t, t]
    if denom == 0:
        return None
    return float(hits / denom)
