"""Experiment configuration: dataclasses, strict YAML parsing, validation
with line-level messages, and lossless echo back to YAML."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .attacks import (ATTACK_KINDS, TRIGGER_KINDS, TRIGGER_POSITIONS,
                      AttackConfig, TriggerConfig)
from .aggregate import SentinelConfig
from .data import PartitionConfig
from .model import TrainConfig

AGGREGATOR_KINDS = ("fedavg", "coordinate_median", "trimmed_mean", "krum",
                    "fltrust", "sentinel")
TOPOLOGY_KINDS = ("full", "ring")
DATASET_KINDS = ("synth_images", "synth_tabular", "idx")


class ConfigError(ValueError):
    """All field-level problems found in one config file."""

    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__("\n".join(self.errors))


@dataclass(frozen=True)
class DatasetConfig:
    """Where the sample pool comes from.

    idx pools read a big-endian image/label file pair; relative paths are
    resolved against the DFLSIM_DATA directory when that variable is set.
    """

    kind: str = "synth_images"
    num_classes: int = 10
    samples_per_class: int = 120
    image_hw: tuple[int, int] = (12, 12)
    noise: float = 0.15
    num_features: int = 24
    spread: float = 0.8
    images: str | None = None
    labels: str | None = None
    limit: int | None = None


@dataclass(frozen=True)
class FederationConfig:
    """Node count, connectivity, and round budget."""

    n_nodes: int = 10
    topology: str = "full"
    rounds: int = 10
    workers: int = 1
    observer: int | None = None

    def neighbors_of(self, node_id: int) -> list[int]:
        if self.topology == "full":
            return [j for j in range(self.n_nodes) if j != node_id]
        prev = (node_id - 1) % self.n_nodes
        nxt = (node_id + 1) % self.n_nodes
        return sorted({prev, nxt} - {node_id})


@dataclass(frozen=True)
class AggregatorConfig:
    """Which aggregation rule nodes run, plus its knobs."""

    kind: str = "fedavg"
    sentinel: SentinelConfig | None = None
    trim_k: int | None = None
    krum_f: int | None = None
    krum_m: int = 1


@dataclass(frozen=True)
class NetworkConfig:
    """Accepted for config fidelity; synchronous simulation gives these no
    behavioral effect."""

    bandwidth_mbps: float = 1.0
    latency_ms: float = 0.0


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    name: str | None = None
    repeats: int = 1
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    hidden_dims: tuple[int, ...] = (64,)
    partition: PartitionConfig = field(default_factory=lambda: PartitionConfig(n_nodes=10))
    federation: FederationConfig = field(default_factory=FederationConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    aggregator: AggregatorConfig = field(default_factory=AggregatorConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)


def _collect_lines(node, prefix, lines):
    if isinstance(node, yaml.MappingNode):
        for key_node, value_node in node.value:
            path = f"{prefix}.{key_node.value}" if prefix else str(key_node.value)
            lines[path] = key_node.start_mark.line + 1
            _collect_lines(value_node, path, lines)


def _line_map(text: str) -> dict[str, int]:
    try:
        root = yaml.compose(text)
    except yaml.YAMLError:
        return {}
    lines: dict[str, int] = {}
    if root is not None:
        _collect_lines(root, "", lines)
    return lines


class _Section:
    """One mapping level of the raw config; records errors with the field
    path and source line, and tracks which keys were consumed."""

    def __init__(self, raw: dict, path: str, lines: dict[str, int], errors: list[str]):
        self.raw = raw
        self.path = path
        self.lines = lines
        self.errors = errors
        self.seen: set[str] = set()

    def _where(self, key: str) -> str:
        path = f"{self.path}.{key}" if self.path else key
        line = self.lines.get(path)
        return f"{path} (line {line})" if line else path

    def error(self, key: str, message: str) -> None:
        self.errors.append(f"{self._where(key)}: {message}")

    def has(self, key: str) -> bool:
        return key in self.raw

    def get(self, key: str, default=None, required=False):
        self.seen.add(key)
        if key not in self.raw:
            if required:
                self.error(key, "required field is missing")
            return default
        return self.raw[key]

    def number(self, key: str, default=None, required=False, minimum=None,
               maximum=None, integer=False):
        value = self.get(key, default, required)
        if not self.has(key):
            return default
        if value is None:
            if required:
                self.error(key, "expected a number, got null")
            return default
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            self.error(key, f"expected a number, got {value!r}")
            return default
        if integer and not isinstance(value, int):
            self.error(key, f"expected an integer, got {value!r}")
            return default
        if minimum is not None and value < minimum:
            self.error(key, f"must be >= {minimum}, got {value}")
            return default
        if maximum is not None and value > maximum:
            self.error(key, f"must be <= {maximum}, got {value}")
            return default
        return value

    def choice(self, key: str, options, default=None, required=False):
        value = self.get(key, default, required)
        if value is not None and value not in options:
            self.error(key, f"must be one of {', '.join(options)}; got {value!r}")
            return default
        return value

    def section(self, key: str) -> "_Section":
        self.seen.add(key)
        value = self.raw.get(key, {})
        if value is None:
            value = {}
        if not isinstance(value, dict):
            self.error(key, f"expected a mapping, got {value!r}")
            value = {}
        path = f"{self.path}.{key}" if self.path else key
        return _Section(value, path, self.lines, self.errors)

    def reject_unknown(self) -> None:
        for key in self.raw:
            if key not in self.seen:
                self.error(key, "unknown field")


def _parse_dataset(sec: _Section) -> DatasetConfig:
    kind = sec.choice("kind", DATASET_KINDS, default="synth_images")
    hw = sec.get("image_hw", [12, 12])
    if not (isinstance(hw, (list, tuple)) and len(hw) == 2
            and all(isinstance(v, int) and v > 0 for v in hw)):
        sec.error("image_hw", f"expected two positive integers, got {hw!r}")
        hw = [12, 12]
    cfg = DatasetConfig(
        kind=kind or "synth_images",
        num_classes=sec.number("num_classes", 10, minimum=2, integer=True),
        samples_per_class=sec.number("samples_per_class", 120, minimum=1, integer=True),
        image_hw=(hw[0], hw[1]),
        noise=sec.number("noise", 0.15, minimum=0.0),
        num_features=sec.number("num_features", 24, minimum=1, integer=True),
        spread=sec.number("spread", 0.8, minimum=0.0, maximum=1.0),
        images=sec.get("images"),
        labels=sec.get("labels"),
        limit=sec.number("limit", None, minimum=1, integer=True),
    )
    if kind == "idx":
        if cfg.images is None:
            sec.error("images", "idx datasets need an image file path")
        if cfg.labels is None:
            sec.error("labels", "idx datasets need a label file path")
    sec.reject_unknown()
    return cfg


def _parse_partition(sec: _Section, n_nodes: int) -> PartitionConfig:
    scheme = sec.choice("scheme", ("iid", "dirichlet"), default="iid") or "iid"
    alpha = sec.number("alpha", 0.5)
    if scheme == "dirichlet" and (alpha is None or alpha <= 0):
        sec.error("alpha", "dirichlet partitions need alpha > 0")
        alpha = 0.5
    test_frac = sec.number("test_frac", 1.0 / 7.0)
    val_frac = sec.number("val_frac", 0.1)
    sec.reject_unknown()
    try:
        return PartitionConfig(n_nodes=max(1, n_nodes), scheme=scheme, alpha=alpha,
                               test_frac=test_frac, val_frac=val_frac, seed=0)
    except ValueError as exc:
        sec.errors.append(f"{sec.path}: {exc}")
        return PartitionConfig(n_nodes=max(1, n_nodes))


def _parse_federation(sec: _Section) -> FederationConfig:
    cfg = FederationConfig(
        n_nodes=sec.number("n_nodes", 10, minimum=1, integer=True),
        topology=sec.choice("topology", TOPOLOGY_KINDS, default="full") or "full",
        rounds=sec.number("rounds", 10, minimum=0, integer=True),
        workers=sec.number("workers", 1, minimum=1, integer=True),
        observer=sec.number("observer", None, minimum=0, integer=True),
    )
    if cfg.observer is not None and cfg.observer >= cfg.n_nodes:
        sec.error("observer", f"observer {cfg.observer} is not a node id")
    sec.reject_unknown()
    return cfg


def _parse_train(sec: _Section) -> TrainConfig:
    cfg = TrainConfig(
        epochs_per_round=sec.number("epochs_per_round", 3, minimum=1, integer=True),
        batch_size=sec.number("batch_size", 64, minimum=1, integer=True),
        lr=sec.number("lr", 1e-3),
        beta1=sec.number("beta1", 0.9, minimum=0.0, maximum=1.0),
        beta2=sec.number("beta2", 0.999, minimum=0.0, maximum=1.0),
        eps=sec.number("eps", 1e-8, minimum=0.0),
        seed=0,
    )
    if cfg.lr is None or cfg.lr <= 0:
        sec.error("lr", "learning rate must be positive")
    sec.reject_unknown()
    return cfg


def _parse_trigger(sec: _Section) -> TriggerConfig | None:
    if not sec.raw:
        return None
    kind = sec.choice("kind", TRIGGER_KINDS, required=True)
    size = sec.number("size", 5, minimum=2, integer=True)
    position = sec.choice("position", TRIGGER_POSITIONS, default="top_left")
    num_columns = sec.number("num_columns", 7, minimum=1, integer=True)
    sec.reject_unknown()
    if kind is None:
        return None
    try:
        return TriggerConfig(kind=kind, size=size, position=position or "top_left",
                             num_columns=num_columns)
    except ValueError as exc:
        sec.errors.append(f"{sec.path}: {exc}")
        return None


def _parse_attack(sec: _Section, dataset_kind: str, num_classes: int) -> AttackConfig:
    kind = sec.choice("kind", ATTACK_KINDS, default="none") or "none"
    trigger = _parse_trigger(sec.section("trigger"))
    source = sec.number("source_class", 0, minimum=0, integer=True)
    target = sec.number("target_class", 0, minimum=0, integer=True)
    for key, value in (("source_class", source), ("target_class", target)):
        if value is not None and value >= num_classes:
            sec.error(key, f"class {value} out of range for {num_classes} classes")
    if kind == "backdoor" and trigger is not None:
        image_trigger = trigger.kind == "pixel_cross"
        image_data = dataset_kind in ("synth_images", "idx")
        if image_trigger != image_data:
            sec.errors.append(f"{sec.path}.trigger.kind: {trigger.kind!r} does not "
                              f"match dataset kind {dataset_kind!r}")
    cfg_kwargs = dict(
        kind=kind,
        pnr=sec.number("pnr", 0.0, minimum=0.0, maximum=1.0),
        noise_ratio=sec.number("noise_ratio", 0.8, minimum=0.0, maximum=1.0),
        amplitude=sec.number("amplitude", 1.0),
        source_class=source,
        target_class=target,
        implant_fraction=sec.number("implant_fraction", 0.2, minimum=0.0, maximum=1.0),
        trigger=trigger,
    )
    sec.reject_unknown()
    try:
        return AttackConfig(**cfg_kwargs)
    except ValueError as exc:
        sec.errors.append(f"{sec.path}: {exc}")
        return AttackConfig()


def _parse_aggregator(sec: _Section) -> AggregatorConfig:
    kind = sec.choice("kind", AGGREGATOR_KINDS, default="fedavg") or "fedavg"
    sentinel_cfg = None
    if kind == "sentinel":
        # thresholds drive every reported defense number; experiment files
        # must state them rather than lean on library defaults
        tau_s = sec.number("tau_s", None, required=True)
        tau_l = sec.number("tau_l", None, required=True, minimum=0.0, maximum=1.0)
        l_min = sec.number("l_min", 0.001, minimum=1e-12)
        literal = sec.get("literal_norm_ratio", False)
        if not isinstance(literal, bool):
            sec.error("literal_norm_ratio", f"expected true/false, got {literal!r}")
            literal = False
        if tau_s is not None and tau_l is not None:
            try:
                sentinel_cfg = SentinelConfig(tau_s=tau_s, tau_l=tau_l, l_min=l_min,
                                              literal_norm_ratio=literal)
            except ValueError as exc:
                sec.errors.append(f"{sec.path}: {exc}")
    else:
        for key in ("tau_s", "tau_l", "l_min", "literal_norm_ratio"):
            if sec.has(key):
                sec.error(key, f"only valid for the sentinel aggregator, not {kind!r}")
            sec.seen.add(key)
    cfg = AggregatorConfig(
        kind=kind,
        sentinel=sentinel_cfg,
        trim_k=sec.number("trim_k", None, minimum=0, integer=True),
        krum_f=sec.number("krum_f", None, minimum=0, integer=True),
        krum_m=sec.number("krum_m", 1, minimum=1, integer=True),
    )
    sec.reject_unknown()
    return cfg


def from_dict(raw: dict, lines: dict[str, int] | None = None) -> ExperimentConfig:
    """Validate a raw mapping into an ExperimentConfig.

    Collects every problem instead of stopping at the first; raises a single
    ConfigError naming each offending field (with the source line when the
    mapping came from a file).
    """
    errors: list[str] = []
    root = _Section(raw, "", lines or {}, errors)

    seed = root.number("seed", None, required=True, minimum=0, integer=True)
    name = root.get("name")
    if name is not None and not isinstance(name, str):
        root.error("name", f"expected a string, got {name!r}")
        name = None
    repeats = root.number("repeats", 1, minimum=1, integer=True)
    dataset = _parse_dataset(root.section("dataset"))
    hidden = root.get("hidden_dims", [64])
    if not (isinstance(hidden, (list, tuple)) and hidden
            and all(isinstance(v, int) and v > 0 for v in hidden)):
        root.error("hidden_dims", f"expected a list of positive integers, got {hidden!r}")
        hidden = [64]
    federation = _parse_federation(root.section("federation"))
    partition = _parse_partition(root.section("partition"), federation.n_nodes)
    train = _parse_train(root.section("train"))
    attack = _parse_attack(root.section("attack"), dataset.kind, dataset.num_classes)
    aggregator = _parse_aggregator(root.section("aggregator"))
    network_sec = root.section("network")
    network = NetworkConfig(
        bandwidth_mbps=network_sec.number("bandwidth_mbps", 1.0, minimum=0.0),
        latency_ms=network_sec.number("latency_ms", 0.0, minimum=0.0),
    )
    network_sec.reject_unknown()
    root.reject_unknown()

    if errors:
        raise ConfigError(errors)
    return ExperimentConfig(seed=seed, name=name, repeats=repeats, dataset=dataset,
                            hidden_dims=tuple(hidden), partition=partition,
                            federation=federation, train=train, attack=attack,
                            aggregator=aggregator, network=network)


def parse_config(path) -> ExperimentConfig:
    """Read and validate a YAML experiment file."""
    text = Path(path).read_text()
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError([f"{path}: not valid YAML: {exc}"])
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError([f"{path}: top level must be a mapping"])
    return from_dict(raw, _line_map(text))


def to_dict(cfg: ExperimentConfig) -> dict:
    """Plain mapping that parses back to an identical config."""
    out = {
        "seed": cfg.seed,
        "repeats": cfg.repeats,
        "dataset": {
            "kind": cfg.dataset.kind,
            "num_classes": cfg.dataset.num_classes,
            "samples_per_class": cfg.dataset.samples_per_class,
            "image_hw": list(cfg.dataset.image_hw),
            "noise": cfg.dataset.noise,
            "num_features": cfg.dataset.num_features,
            "spread": cfg.dataset.spread,
        },
        "hidden_dims": list(cfg.hidden_dims),
        "partition": {
            "scheme": cfg.partition.scheme,
            "alpha": cfg.partition.alpha,
            "test_frac": cfg.partition.test_frac,
            "val_frac": cfg.partition.val_frac,
        },
        "federation": {
            "n_nodes": cfg.federation.n_nodes,
            "topology": cfg.federation.topology,
            "rounds": cfg.federation.rounds,
            "workers": cfg.federation.workers,
        },
        "train": {
            "epochs_per_round": cfg.train.epochs_per_round,
            "batch_size": cfg.train.batch_size,
            "lr": cfg.train.lr,
            "beta1": cfg.train.beta1,
            "beta2": cfg.train.beta2,
            "eps": cfg.train.eps,
        },
        "attack": {
            "kind": cfg.attack.kind,
            "pnr": cfg.attack.pnr,
            "noise_ratio": cfg.attack.noise_ratio,
            "amplitude": cfg.attack.amplitude,
            "source_class": cfg.attack.source_class,
            "target_class": cfg.attack.target_class,
            "implant_fraction": cfg.attack.implant_fraction,
        },
        "aggregator": {
            "kind": cfg.aggregator.kind,
            "krum_m": cfg.aggregator.krum_m,
        },
        "network": {
            "bandwidth_mbps": cfg.network.bandwidth_mbps,
            "latency_ms": cfg.network.latency_ms,
        },
    }
    if cfg.name is not None:
        out["name"] = cfg.name
    if cfg.dataset.images is not None:
        out["dataset"]["images"] = cfg.dataset.images
    if cfg.dataset.labels is not None:
        out["dataset"]["labels"] = cfg.dataset.labels
    if cfg.dataset.limit is not None:
        out["dataset"]["limit"] = cfg.dataset.limit
    if cfg.federation.observer is not None:
        out["federation"]["observer"] = cfg.federation.observer
    if cfg.attack.trigger is not None:
        trig = cfg.attack.trigger
        out["attack"]["trigger"] = {"kind": trig.kind, "size": trig.size,
                                    "position": trig.position,
                                    "num_columns": trig.num_columns}
    if cfg.aggregator.sentinel is not None:
        s = cfg.aggregator.sentinel
        out["aggregator"].update({"tau_s": s.tau_s, "tau_l": s.tau_l,
                                  "l_min": s.l_min,
                                  "literal_norm_ratio": s.literal_norm_ratio})
    if cfg.aggregator.trim_k is not None:
        out["aggregator"]["trim_k"] = cfg.aggregator.trim_k
    if cfg.aggregator.krum_f is not None:
        out["aggregator"]["krum_f"] = cfg.aggregator.krum_f
    return out


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=True)
