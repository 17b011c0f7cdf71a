"""Round-driven federation simulator.

Every round runs four synchronized phases: local training, poisoning of the
outgoing copy, exchange along the topology, and robust aggregation. Phases
are barriers: no node starts phase k+1 until all nodes finished phase k, so
a thread pool can only change wall time, never results.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .aggregate import (AggregationInput, LossHistory, coordinate_median,
                        fedavg, fltrust, krum, sentinel, trimmed_mean)
from .attacks import (AttackConfig, build_backdoor_eval_set, flip_labels_targeted,
                      flip_labels_untargeted, implant_backdoor, poison_model,
                      select_malicious)
from .config import DatasetConfig, ExperimentConfig
from .data import (Dataset, NodeData, load_idx_dataset, partition,
                   sample_bootstrap, stratified_subset, synth_images,
                   synth_tabular)
from .metrics import attack_success_rate, backdoor_accuracy, macro_f1
from .model import (MlpSpec, evaluate, init_params, train_local)
from .params import LayeredParams, NumericalError
from .seeds import derive_seed

DATA_DIR_ENV = "DFLSIM_DATA"


@dataclass
class NodeState:
    """One participant: its parameters, data slice, and bookkeeping."""

    node_id: int
    params: LayeredParams
    data: NodeData
    loss_history: LossHistory
    malicious: bool = False
    backdoor_eval: Dataset | None = None


@dataclass(frozen=True)
class NodeRoundMetrics:
    node: int
    benign: bool
    f1: float
    test_loss: float
    asr_lf: float | None
    ba: float | None
    n_filtered: int
    adopted: bool


@dataclass(frozen=True)
class RoundReport:
    round_index: int
    nodes: tuple[NodeRoundMetrics, ...]


@dataclass
class ExperimentReport:
    config: ExperimentConfig
    seed: int
    malicious: tuple[int, ...]
    rounds: list[RoundReport] = field(default_factory=list)
    trace: list[dict] = field(default_factory=list)
    partition_indices: list[dict] = field(default_factory=list)
    summary: dict = field(default_factory=dict)


def resolve_data_path(path_str: str) -> Path:
    """Relative dataset paths resolve against $DFLSIM_DATA when set."""
    path = Path(path_str)
    if path.is_absolute():
        return path
    base = os.environ.get(DATA_DIR_ENV)
    return Path(base) / path if base else path


def build_pool(cfg: DatasetConfig, seed: int) -> Dataset:
    """Materialize the sample pool an experiment draws from."""
    if cfg.kind == "synth_images":
        return synth_images(num_classes=cfg.num_classes,
                            samples_per_class=cfg.samples_per_class,
                            image_hw=cfg.image_hw, noise=cfg.noise, seed=seed)
    if cfg.kind == "synth_tabular":
        return synth_tabular(num_classes=cfg.num_classes,
                             samples_per_class=cfg.samples_per_class,
                             num_features=cfg.num_features, spread=cfg.spread,
                             noise=cfg.noise, seed=seed)
    pool = load_idx_dataset(resolve_data_path(cfg.images),
                            resolve_data_path(cfg.labels),
                            num_classes=cfg.num_classes)
    if cfg.limit is not None:
        pool = stratified_subset(pool, cfg.limit, derive_seed(seed, "limit"))
    return pool


def _poison_training_data(data: NodeData, attack: AttackConfig, seed: int) -> NodeData:
    """Static data poisoning applied once at setup, train split only."""
    if attack.kind == "label_flip_untargeted":
        train = flip_labels_untargeted(data.train, derive_seed(seed, "flip"))
    elif attack.kind == "label_flip_targeted":
        train = flip_labels_targeted(data.train, attack.source_class,
                                     attack.target_class)
    elif attack.kind == "backdoor":
        train = implant_backdoor(data.train, attack.trigger, attack.target_class,
                                 attack.implant_fraction, derive_seed(seed, "implant"))
    else:
        return data
    return replace(data, train=train)


class Federation:
    """All node state plus the round loop for one experiment run."""

    def __init__(self, cfg: ExperimentConfig, seed: int | None = None):
        self.cfg = cfg
        self.seed = cfg.seed if seed is None else seed
        fed = cfg.federation

        pool = build_pool(cfg.dataset, derive_seed(self.seed, "data"))
        part_cfg = replace(cfg.partition, n_nodes=fed.n_nodes,
                           seed=derive_seed(self.seed, "partition"))
        parts = partition(pool, part_cfg)

        attack = cfg.attack
        if attack.kind != "none" and attack.pnr > 0:
            exclude = () if fed.observer is None else (fed.observer,)
            self.malicious = select_malicious(fed.n_nodes, attack.pnr,
                                              derive_seed(self.seed, "malicious"),
                                              exclude=exclude)
        else:
            self.malicious = ()

        spec = MlpSpec(input_dim=pool.num_features, hidden_dims=cfg.hidden_dims,
                       num_classes=pool.num_classes)
        # every node starts from the same parameters: disagreement between
        # models then comes only from data and attacks, not initialization
        init = init_params(spec, derive_seed(self.seed, "init"))

        self.nodes: list[NodeState] = []
        for i, data in enumerate(parts):
            hostile = i in self.malicious
            if hostile:
                data = _poison_training_data(data, attack,
                                             derive_seed(self.seed, "poison_data", i))
            bd_eval = None
            if attack.kind == "backdoor":
                # triggered copies of the clean test split, original labels
                bd_eval = build_backdoor_eval_set(data.test, attack.trigger,
                                                  attack.target_class)
            self.nodes.append(NodeState(node_id=i, params=init.copy(), data=data,
                                        loss_history=LossHistory(own_id=i),
                                        malicious=hostile, backdoor_eval=bd_eval))

        self.report = ExperimentReport(config=cfg, seed=self.seed,
                                       malicious=self.malicious)
        self.report.partition_indices = [
            {name: idx.tolist() for name, idx in (node.indices or {}).items()}
            for node in parts
        ]
        self._workers = max(1, fed.workers)

    def _map_nodes(self, fn):
        """Apply fn to every node; results keyed by node id either way."""
        if self._workers == 1 or len(self.nodes) == 1:
            return {node.node_id: fn(node) for node in self.nodes}
        with ThreadPoolExecutor(max_workers=self._workers) as pool:
            futures = {node.node_id: pool.submit(fn, node) for node in self.nodes}
        return {nid: fut.result() for nid, fut in futures.items()}

    def _train_phase(self, round_index: int) -> dict[int, tuple[LayeredParams, bool]]:
        def train_one(node: NodeState) -> tuple[LayeredParams, bool]:
            cfg = replace(self.cfg.train,
                          seed=derive_seed(self.seed, "train", node.node_id,
                                           round_index))
            try:
                return train_local(node.params, node.data.train, cfg), True
            except NumericalError:
                # diverged training is dropped; the node re-shares its
                # pre-round parameters, which are known finite
                return node.params, False
        return self._map_nodes(train_one)

    def _outgoing_phase(self, trained: dict[int, LayeredParams],
                        round_index: int) -> dict[int, LayeredParams]:
        attack = self.cfg.attack
        outgoing = dict(trained)
        if attack.kind == "model_poison":
            for nid in self.malicious:
                outgoing[nid] = poison_model(trained[nid], attack.noise_ratio,
                                             attack.amplitude,
                                             derive_seed(self.seed, "poison", nid,
                                                         round_index))
        return outgoing

    def _aggregate_one(self, node: NodeState, trained: dict[int, LayeredParams],
                       outgoing: dict[int, LayeredParams], healthy: dict[int, bool],
                       round_index: int) -> tuple[LayeredParams, int, list, bool]:
        if not healthy[node.node_id]:
            # training already failed: adoption is skipped for the round
            return node.params, 0, [], False
        agg = self.cfg.aggregator
        neighbor_ids = self.cfg.federation.neighbors_of(node.node_id)
        neighbors = {j: outgoing[j] for j in neighbor_ids}
        bootstrap = None
        if agg.kind == "sentinel":
            bootstrap = sample_bootstrap(node.data.val,
                                         derive_seed(self.seed, "bootstrap",
                                                     node.node_id, round_index))
        inputs = AggregationInput(local=trained[node.node_id], neighbors=neighbors,
                                  bootstrap=bootstrap, round_index=round_index)
        trace: list[dict] = []
        try:
            if agg.kind == "sentinel":
                merged = sentinel(inputs, agg.sentinel, node.loss_history, trace=trace)
            elif agg.kind == "fedavg":
                merged = fedavg(inputs)
            elif agg.kind == "coordinate_median":
                merged = coordinate_median(inputs)
            elif agg.kind == "trimmed_mean":
                merged = trimmed_mean(inputs, trim_k=agg.trim_k)
            elif agg.kind == "krum":
                merged = krum(inputs, f=agg.krum_f, m=agg.krum_m)
            elif agg.kind == "fltrust":
                merged = fltrust(inputs)
            else:
                raise ValueError(f"unknown aggregator kind {agg.kind!r}")
        except NumericalError:
            # adoption skipped: the node carries its pre-round parameters
            return node.params, 0, trace, False
        n_filtered = sum(1 for entry in trace
                         if entry["filtered"] or entry["weight"] == 0.0)
        return merged, n_filtered, trace, True

    def _evaluate_node(self, node: NodeState) -> tuple[float, float, float | None,
                                                       float | None]:
        attack = self.cfg.attack
        loss, counts = evaluate(node.params, node.data.test,
                                batch_size=self.cfg.train.batch_size)
        f1 = macro_f1(counts)
        asr = None
        if attack.kind == "label_flip_targeted":
            asr = attack_success_rate(counts, attack.source_class,
                                      attack.target_class)
        ba = None
        if node.backdoor_eval is not None:
            _, bd_counts = evaluate(node.params, node.backdoor_eval,
                                    batch_size=self.cfg.train.batch_size)
            ba = backdoor_accuracy(bd_counts, attack.target_class)
        return f1, loss, asr, ba

    def _record_round(self, round_index: int, filtered: dict[int, int],
                      adopted: dict[int, bool]) -> None:
        evals = self._map_nodes(self._evaluate_node)
        rows = []
        for node in self.nodes:
            f1, loss, asr, ba = evals[node.node_id]
            rows.append(NodeRoundMetrics(node=node.node_id,
                                         benign=not node.malicious,
                                         f1=f1, test_loss=loss, asr_lf=asr, ba=ba,
                                         n_filtered=filtered.get(node.node_id, 0),
                                         adopted=adopted.get(node.node_id, True)))
        self.report.rounds.append(RoundReport(round_index=round_index,
                                              nodes=tuple(rows)))

    def run_round(self, round_index: int) -> None:
        trained_flags = self._train_phase(round_index)
        trained = {nid: params for nid, (params, _) in trained_flags.items()}
        healthy = {nid: ok for nid, (_, ok) in trained_flags.items()}
        outgoing = self._outgoing_phase(trained, round_index)
        results = self._map_nodes(
            lambda node: self._aggregate_one(node, trained, outgoing, healthy,
                                             round_index))
        filtered: dict[int, int] = {}
        adopted: dict[int, bool] = {}
        for node in self.nodes:
            merged, n_filtered, trace, ok = results[node.node_id]
            node.params = merged
            filtered[node.node_id] = n_filtered
            adopted[node.node_id] = ok
            for entry in trace:
                self.report.trace.append({"round": round_index,
                                          "node": node.node_id, **entry})
        self._record_round(round_index, filtered, adopted)

    def run(self) -> ExperimentReport:
        # round 0 reports the shared initialization before any training
        self._record_round(0, {}, {})
        for round_index in range(1, self.cfg.federation.rounds + 1):
            self.run_round(round_index)
        self.report.summary = summarize(self.report)
        return self.report


def summarize(report: ExperimentReport) -> dict:
    """Final-round metrics averaged over benign nodes (population std)."""
    cfg = report.config
    final = report.rounds[-1]
    benign = [row for row in final.nodes if row.benign]
    stats = {}
    for key in ("f1", "test_loss", "asr_lf", "ba"):
        values = [getattr(row, key) for row in benign
                  if getattr(row, key) is not None]
        if values:
            stats[key] = {"mean": float(np.mean(values)),
                          "std": float(np.std(values)),
                          "n": len(values)}
    return {
        "name": cfg.name,
        "dataset": cfg.dataset.kind,
        "partition": cfg.partition.scheme,
        "aggregator": cfg.aggregator.kind,
        "attack": cfg.attack.kind,
        "pnr": cfg.attack.pnr,
        "n_nodes": cfg.federation.n_nodes,
        "rounds": cfg.federation.rounds,
        "final_round": final.round_index,
        "seed": report.seed,
        "malicious": list(report.malicious),
        "metrics": stats,
    }


def run_experiment(cfg: ExperimentConfig, seed: int | None = None) -> ExperimentReport:
    """Build a federation from a config and run it to completion."""
    return Federation(cfg, seed=seed).run()
