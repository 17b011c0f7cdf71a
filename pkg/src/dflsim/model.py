"""Minimal feed-forward classifier: ReLU hidden layers, softmax output,
hand-written gradients, and mini-batch Adam.

Parameters live in a LayeredParams as alternating "fc{i}.weight" and
"fc{i}.bias" layers with weight shape (fan_in, fan_out). All training and
evaluation math runs in float64 internally; exchanged parameters stay
float32.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .params import LayeredParams, NumericalError


@dataclass(frozen=True)
class MlpSpec:
    """Architecture of the classifier."""

    input_dim: int
    hidden_dims: tuple[int, ...] = (256, 128)
    num_classes: int = 10

    def __post_init__(self):
        if self.input_dim < 1:
            raise ValueError("input_dim must be positive")
        if any(h < 1 for h in self.hidden_dims):
            raise ValueError("hidden dims must be positive")
        if self.num_classes < 2:
            raise ValueError("need at least two classes")

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        dims = [self.input_dim, *self.hidden_dims, self.num_classes]
        return list(zip(dims[:-1], dims[1:]))


@dataclass(frozen=True)
class TrainConfig:
    """One round of local training."""

    epochs_per_round: int = 3
    batch_size: int = 64
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.epochs_per_round < 1:
            raise ValueError("epochs_per_round must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def init_params(spec: MlpSpec, seed: int) -> LayeredParams:
    """Uniform He-style initialization: weights in +-sqrt(6/fan_in), zero biases."""
    rng = np.random.default_rng(seed)
    pairs = []
    for i, (fan_in, fan_out) in enumerate(spec.layer_dims):
        bound = np.sqrt(6.0 / fan_in)
        pairs.append((f"fc{i}.weight", rng.uniform(-bound, bound, (fan_in, fan_out))))
        pairs.append((f"fc{i}.bias", np.zeros(fan_out)))
    return LayeredParams.from_pairs(pairs)


def _as_layer_arrays(params: LayeredParams) -> list[np.ndarray]:
    arrays = [a.astype(np.float64) for a in params.arrays]
    if len(arrays) % 2 != 0:
        raise ValueError("expected alternating weight/bias layers")
    return arrays


def _forward_arrays(arrays: list[np.ndarray], x: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
    """Run the net on float64 arrays; returns hidden activations and logits."""
    n_layers = len(arrays) // 2
    if x.shape[1] != arrays[0].shape[0]:
        raise ValueError(f"batch has {x.shape[1]} features, model expects {arrays[0].shape[0]}")
    hidden = [x]
    # overflow is caught by the finiteness check, not surfaced as a warning
    with np.errstate(over="ignore", invalid="ignore"):
        h = x
        for i in range(n_layers - 1):
            z = h @ arrays[2 * i] + arrays[2 * i + 1]
            h = np.maximum(z, 0.0)
            hidden.append(h)
        logits = h @ arrays[-2] + arrays[-1]
    if not np.isfinite(logits).all():
        raise NumericalError("non-finite activations in forward pass")
    return hidden, logits


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def forward(params: LayeredParams, batch: np.ndarray) -> np.ndarray:
    """Class probabilities for each row of the batch; rows sum to 1."""
    arrays = _as_layer_arrays(params)
    x = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    _, logits = _forward_arrays(arrays, x)
    return np.exp(_log_softmax(logits))


def _loss_and_grad_arrays(arrays: list[np.ndarray], x: np.ndarray,
                          y: np.ndarray) -> tuple[float, list[np.ndarray]]:
    hidden, logits = _forward_arrays(arrays, x)
    n = x.shape[0]
    log_probs = _log_softmax(logits)
    loss = float(-log_probs[np.arange(n), y].mean())

    delta = np.exp(log_probs)
    delta[np.arange(n), y] -= 1.0
    delta /= n

    grads: list[np.ndarray] = [np.empty(0)] * len(arrays)
    n_layers = len(arrays) // 2
    for i in range(n_layers - 1, -1, -1):
        grads[2 * i] = hidden[i].T @ delta
        grads[2 * i + 1] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ arrays[2 * i].T) * (hidden[i] > 0.0)
    return loss, grads


def loss_and_grad(params: LayeredParams, batch: np.ndarray,
                  labels: np.ndarray) -> tuple[float, LayeredParams]:
    """Mean cross-entropy over the batch and its gradient."""
    arrays = _as_layer_arrays(params)
    x = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    y = np.asarray(labels, dtype=np.int64)
    loss, grads = _loss_and_grad_arrays(arrays, x, y)
    pairs = zip(params.names, grads)
    return loss, LayeredParams.from_pairs(pairs)


def train_local(params: LayeredParams, dataset, cfg: TrainConfig) -> LayeredParams:
    """Run epochs_per_round epochs of shuffled mini-batch Adam.

    Deterministic for a fixed (params, dataset, cfg): the shuffle order is
    drawn from cfg.seed and Adam state starts fresh each call.
    """
    n = len(dataset)
    if n == 0:
        raise ValueError("cannot train on an empty dataset")
    rng = np.random.default_rng(cfg.seed)
    arrays = _as_layer_arrays(params)
    x_all = dataset.features.astype(np.float64)
    y_all = dataset.labels.astype(np.int64)

    m = [np.zeros_like(a) for a in arrays]
    v = [np.zeros_like(a) for a in arrays]
    t = 0
    for _ in range(cfg.epochs_per_round):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            _, grads = _loss_and_grad_arrays(arrays, x_all[idx], y_all[idx])
            t += 1
            for k, g in enumerate(grads):
                m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g
                v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g * g
                m_hat = m[k] / (1.0 - cfg.beta1 ** t)
                v_hat = v[k] / (1.0 - cfg.beta2 ** t)
                arrays[k] = arrays[k] - cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
    return LayeredParams.from_pairs(zip(params.names, arrays))


def evaluate(params: LayeredParams, dataset, batch_size: int = 1024) -> tuple[float, np.ndarray]:
    """Mean cross-entropy loss and the confusion matrix on a dataset.

    Confusion counts[i][j] = samples with true label i predicted j; entries
    sum to the dataset size.
    """
    n = len(dataset)
    if n == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    arrays = _as_layer_arrays(params)
    num_classes = dataset.num_classes
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    total_loss = 0.0
    for start in range(0, n, batch_size):
        x = dataset.features[start:start + batch_size].astype(np.float64)
        y = dataset.labels[start:start + batch_size].astype(np.int64)
        _, logits = _forward_arrays(arrays, x)
        log_probs = _log_softmax(logits)
        total_loss += float(-log_probs[np.arange(len(y)), y].sum())
        preds = logits.argmax(axis=1)
        np.add.at(counts, (y, preds), 1)
    return total_loss / n, counts
