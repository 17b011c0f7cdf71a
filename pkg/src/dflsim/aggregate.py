"""Aggregation rules a node applies to its own model plus the neighbor
models it received.

The robust path runs three phases: drop neighbors whose parameters point
away from the local model (cosine filter), down-weight survivors whose
bootstrap loss history trails the local one (exponential damping with a
hard floor), and clip per-layer norms so an inflated update cannot dominate
the average. Reference rules (mean, coordinate median, trimmed mean, Krum,
trust-scored averaging) share the same input shape.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .model import evaluate
from .params import (LayeredParams, cosine_similarity, flatten, layer_norms,
                     require_compatible, require_finite, unflatten,
                     weighted_average)


class InsufficientModels(ValueError):
    """Raised when a rule needs more models than the round provides."""


@dataclass(frozen=True)
class SentinelConfig:
    """Thresholds for the three-phase robust aggregation.

    tau_s: minimum cosine similarity to the local model; strictly lower
        neighbors are dropped. Values above 1 drop every neighbor, which is
        a supported way to force pure local training.
    tau_l: mapped weights below this are zeroed instead of merely small.
    l_min: floor on the local mean loss inside the damping factor, so a
        near-zero local loss cannot blow the exponent up to infinity.
    literal_norm_ratio: scale neighbor layers by neighbor/local norm instead
        of local/neighbor. Kept for comparison; it shrinks already-small
        layers and passes inflated ones, so the default inverts it.
    """

    tau_s: float = 0.5
    tau_l: float = 0.1
    l_min: float = 0.001
    literal_norm_ratio: bool = False

    def __post_init__(self):
        if self.tau_s < -1.0:
            raise ValueError("tau_s below -1 never filters; likely a typo")
        if not 0.0 <= self.tau_l <= 1.0:
            raise ValueError("tau_l must be in [0, 1]")
        if self.l_min <= 0.0:
            raise ValueError("l_min must be positive")


class LossHistory:
    """Bootstrap losses a node has observed, per sender, across rounds.

    Only rounds a neighbor survived similarity filtering get an entry, so a
    flaky neighbor is judged on fewer values. The node's own id is tracked
    the same way and gains one entry every round.
    """

    def __init__(self, own_id: int):
        self.own_id = own_id
        self._losses: dict[int, dict[int, float]] = {}

    def record(self, node_id: int, round_index: int, loss: float) -> None:
        if not np.isfinite(loss) or loss < 0.0:
            raise ValueError(f"loss must be finite and nonnegative, got {loss}")
        self._losses.setdefault(node_id, {})[round_index] = float(loss)

    def losses(self, node_id: int) -> list[float]:
        recorded = self._losses.get(node_id, {})
        return [recorded[r] for r in sorted(recorded)]

    def mean_loss(self, node_id: int) -> float:
        values = self.losses(node_id)
        if not values:
            raise KeyError(f"no losses recorded for node {node_id}")
        return float(np.mean(values))

    def known_nodes(self) -> list[int]:
        return sorted(self._losses)


@dataclass(frozen=True)
class AggregationInput:
    """Everything one node holds when it aggregates a round."""

    local: LayeredParams
    neighbors: dict[int, LayeredParams] = field(default_factory=dict)
    bootstrap: Dataset | None = None
    round_index: int = 0

    def __post_init__(self):
        for p in self.neighbors.values():
            require_compatible(self.local, p)

    def ordered_models(self) -> list[LayeredParams]:
        """Local model first, then neighbors by ascending id."""
        return [self.local] + [self.neighbors[i] for i in sorted(self.neighbors)]


def fedavg(inputs: AggregationInput) -> LayeredParams:
    """Unweighted mean of the local model and every neighbor."""
    models = inputs.ordered_models()
    require_finite(*models)
    return weighted_average(models, [1.0] * len(models))


def coordinate_median(inputs: AggregationInput) -> LayeredParams:
    """Per-coordinate median; an even model count takes the midpoint of the
    two middle values."""
    models = inputs.ordered_models()
    require_finite(*models)
    stacked = np.stack([flatten(m).astype(np.float64) for m in models])
    return unflatten(np.median(stacked, axis=0), inputs.local)


def trimmed_mean(inputs: AggregationInput, trim_k: int | None = None) -> LayeredParams:
    """Per-coordinate mean after dropping the trim_k lowest and highest
    values; trim_k defaults to 20% of the model count."""
    models = inputs.ordered_models()
    require_finite(*models)
    n = len(models)
    if trim_k is None:
        trim_k = int(np.floor(0.2 * n))
    if trim_k < 0:
        raise ValueError("trim_k must be nonnegative")
    if n <= 2 * trim_k:
        raise InsufficientModels(f"trimmed mean needs more than {2 * trim_k} models, got {n}")
    stacked = np.stack([flatten(m).astype(np.float64) for m in models])
    stacked.sort(axis=0)
    kept = stacked[trim_k:n - trim_k]
    return unflatten(kept.mean(axis=0), inputs.local)


def krum(inputs: AggregationInput, f: int | None = None, m: int = 1) -> LayeredParams:
    """Pick the model(s) closest to their peers, tolerating f outliers.

    Each model is scored by the summed squared distances to its n - f - 2
    nearest others; the lowest score wins, ties going to the earliest model
    in (local, ascending neighbor id) order. m > 1 averages the m best.
    Too few models for the requested f falls back to plain averaging.
    """
    models = inputs.ordered_models()
    require_finite(*models)
    n = len(models)
    if f is None:
        f = max(0, min((n - 2) // 2, n - 3))
    if f < 0:
        raise ValueError("f must be nonnegative")
    if not 1 <= m <= n:
        raise ValueError(f"m must be in [1, {n}]")
    if n < f + 3:
        warnings.warn(f"krum needs at least f+3={f + 3} models, got {n}; "
                      "falling back to plain averaging")
        return fedavg(inputs)
    flat = np.stack([flatten(p).astype(np.float64) for p in models])
    sq_norms = (flat * flat).sum(axis=1)
    d2 = sq_norms[:, None] + sq_norms[None, :] - 2.0 * (flat @ flat.T)
    np.maximum(d2, 0.0, out=d2)
    scores = np.empty(n)
    for i in range(n):
        others = np.sort(np.delete(d2[i], i))
        scores[i] = others[:n - f - 2].sum()
    best = np.argsort(scores, kind="stable")[:m]
    if m == 1:
        return models[int(best[0])].copy()
    chosen = [models[int(i)] for i in sorted(best)]
    return weighted_average(chosen, [1.0] * m)


def fltrust(inputs: AggregationInput) -> LayeredParams:
    """Trust-scored averaging against the local model as reference.

    Each neighbor's weight is its cosine similarity to the local model,
    clipped at zero, and its layers are rescaled to exactly the local layer
    norms before averaging. The local model joins with weight 1. All
    neighbors untrusted means the local model passes through unchanged.
    """
    require_finite(inputs.local, *inputs.neighbors.values())
    local_norms = layer_norms(inputs.local)
    models = [inputs.local]
    weights = [1.0]
    total_trust = 0.0
    for node_id in sorted(inputs.neighbors):
        neighbor = inputs.neighbors[node_id]
        trust = max(0.0, cosine_similarity(neighbor, inputs.local))
        total_trust += trust
        scales = [ln / nn if nn > 0.0 else 1.0
                  for ln, nn in zip(local_norms, layer_norms(neighbor))]
        rescaled = LayeredParams.from_pairs(
            (name, arr.astype(np.float64) * s)
            for (name, arr), s in zip(neighbor, scales))
        models.append(rescaled)
        weights.append(trust)
    if total_trust == 0.0:
        return inputs.local.copy()
    return weighted_average(models, weights)


def similarity_filter(local: LayeredParams, neighbors: dict[int, LayeredParams],
                      tau_s: float) -> tuple[dict[int, LayeredParams], dict[int, float]]:
    """Keep neighbors whose cosine similarity to the local model reaches
    tau_s; the boundary itself survives. Also returns every neighbor's
    similarity for reporting."""
    survivors: dict[int, LayeredParams] = {}
    sims: dict[int, float] = {}
    for node_id in sorted(neighbors):
        s = cosine_similarity(neighbors[node_id], local)
        sims[node_id] = s
        if s >= tau_s:
            survivors[node_id] = neighbors[node_id]
    return survivors, sims


def map_loss_distance(hist_local, hist_neighbor, tau_l: float, l_min: float) -> float:
    """Weight in [0, 1] from two bootstrap loss histories.

    Histories are averaged; a neighbor at or below the local mean gets full
    weight, one above it decays exponentially at a rate set by the local
    mean itself (the better the local model, the harsher the damping).
    Weights under tau_l collapse to zero. Callers record the current round
    before mapping, so a first-seen neighbor is judged on that single loss.
    """
    local_losses = np.asarray(hist_local, dtype=np.float64)
    neighbor_losses = np.asarray(hist_neighbor, dtype=np.float64)
    if local_losses.size == 0 or neighbor_losses.size == 0:
        raise ValueError("loss histories must be nonempty")
    mean_local = float(local_losses.mean())
    mean_neighbor = float(neighbor_losses.mean())
    damping = 1.0 / max(mean_local, l_min)
    distance = max(mean_neighbor - mean_local, 0.0)
    weight = float(np.exp(-damping * distance))
    return 0.0 if weight < tau_l else weight


def layer_scale_factors(local: LayeredParams, neighbor: LayeredParams,
                        literal_ratio: bool = False) -> list[float]:
    """Per-layer factors that clip the neighbor's norms to the local ones.

    Default: min(1, local/neighbor) per layer, so only over-norm layers
    shrink. literal_ratio flips the fraction; see SentinelConfig. A
    zero-norm denominator passes the layer through unscaled.
    """
    scales = []
    for ln, nn in zip(layer_norms(local), layer_norms(neighbor)):
        num, den = (nn, ln) if literal_ratio else (ln, nn)
        scales.append(min(1.0, num / den) if den > 0.0 else 1.0)
    return scales


def normalize_model(local: LayeredParams, neighbor: LayeredParams,
                    literal_ratio: bool = False) -> LayeredParams:
    """Neighbor with every layer norm clipped to the local layer norm."""
    require_compatible(local, neighbor)
    scales = layer_scale_factors(local, neighbor, literal_ratio)
    return LayeredParams.from_pairs(
        (name, arr.astype(np.float64) * s)
        for (name, arr), s in zip(neighbor, scales))


def sentinel(inputs: AggregationInput, cfg: SentinelConfig, state: LossHistory,
             trace: list | None = None) -> LayeredParams:
    """Three-phase robust aggregation.

    (1) Similarity filter against the local model. (2) Evaluate every
    survivor on this round's bootstrap subset, extend the loss histories,
    and map the history gap to a weight. (3) Clip survivor layer norms to
    the local ones and average, local model fixed at weight 1. With every
    neighbor filtered the local model passes through bit-exact.

    When `trace` is given, one record per neighbor is appended with its
    similarity, filter decision, bootstrap loss, weight, and norm scales.
    """
    require_finite(inputs.local, *inputs.neighbors.values())
    if inputs.bootstrap is None or len(inputs.bootstrap) == 0:
        raise ValueError("sentinel needs a nonempty bootstrap dataset")

    survivors, sims = similarity_filter(inputs.local, inputs.neighbors, cfg.tau_s)
    local_loss, _ = evaluate(inputs.local, inputs.bootstrap)
    state.record(state.own_id, inputs.round_index, local_loss)

    models = [inputs.local]
    weights = [1.0]
    records: dict[int, dict] = {}
    for node_id in sorted(survivors):
        loss, _ = evaluate(survivors[node_id], inputs.bootstrap)
        state.record(node_id, inputs.round_index, loss)
        weight = map_loss_distance(state.losses(state.own_id), state.losses(node_id),
                                   cfg.tau_l, cfg.l_min)
        scales = layer_scale_factors(inputs.local, survivors[node_id],
                                     cfg.literal_norm_ratio)
        normalized = LayeredParams.from_pairs(
            (name, arr.astype(np.float64) * s)
            for (name, arr), s in zip(survivors[node_id], scales))
        models.append(normalized)
        weights.append(weight)
        records[node_id] = {"bootstrap_loss": loss, "weight": weight,
                            "norm_scales": scales}

    if trace is not None:
        for node_id in sorted(inputs.neighbors):
            entry = {"neighbor": node_id, "similarity": sims[node_id],
                     "filtered": node_id not in survivors,
                     "bootstrap_loss": None, "weight": 0.0, "norm_scales": None}
            entry.update(records.get(node_id, {}))
            trace.append(entry)

    return weighted_average(models, weights)
