"""Experiment configuration: YAML file <-> nested frozen dataclasses.

Validation errors carry the line of the offending key, e.g.
``exp.yaml:12: training.fraction_fit must be in (0, 1]``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .embedding import StatisticsConfig
from .errors import ConfigurationError
from .nn import HEAD_MODES

DATASET_KINDS = ("digits", "idx", "cifar")
PARTITION_SCHEMES = ("pathological", "label_skew", "iid")
METHODS = ("REPA", "WD", "FEDAVG")


class ConfigFileError(ConfigurationError):
    """A config file failed to parse or validate; ``str()`` is ``path:line: message``."""


@dataclass(frozen=True)
class DatasetConfig:
    kind: str = "digits"
    images: str = ""
    labels: str = ""
    paths: tuple[str, ...] = ()
    shift: int = 1


@dataclass(frozen=True)
class PartitionConfig:
    scheme: str = "pathological"
    n_clients: int = 100
    classes_per_client: int = 2
    shards_per_client: int = 2
    major_classes_per_client: int = 2
    major_mass: float = 0.9
    samples_per_client: int = 150
    holdout_fraction: float = 0.0
    concept_drift: bool = False


@dataclass(frozen=True)
class NetworkConfig:
    embedding_dim: int = 32
    head_mode: str = "SAE"
    recon_weight: float = 1.0
    channels: tuple[int, ...] = (16, 32)


@dataclass(frozen=True)
class EmbedderConfig:
    method: str = "REPA"
    include_mean: bool = True
    include_std: bool = False
    quantiles: tuple[float, ...] = (0.25, 0.5, 0.75)
    fine_tune_epochs: int = 1
    lr: float = 0.1

    @property
    def statistics(self) -> StatisticsConfig:
        return StatisticsConfig(self.include_mean, self.include_std, self.quantiles)


@dataclass(frozen=True)
class ClusteringConfig:
    k: int = 10
    restarts: int = 10
    max_iter: int = 300
    tol: float = 1e-6


@dataclass(frozen=True)
class TrainingSection:
    rounds: int = 30
    fraction_fit: float = 1.0
    local_epochs: int = 1
    lr: float = 0.1
    batch_size: int = 16
    mu: float = 0.1
    warmup_rounds: int = 5


@dataclass(frozen=True)
class MetricsConfig:
    uniformity: bool = True
    robustness: bool = True
    robustness_iterations: int = 100
    correlation: bool = False
    similarity: str = "label_skew"
    reference_images: int = 100


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    output_dir: str = "runs/experiment"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    partition: PartitionConfig = field(default_factory=PartitionConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    embedder: EmbedderConfig = field(default_factory=EmbedderConfig)
    clustering: ClusteringConfig = field(default_factory=ClusteringConfig)
    training: TrainingSection = field(default_factory=TrainingSection)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)

    def replace(self, **changes) -> "ExperimentConfig":
        """Shallow or dotted replacement: ``cfg.replace(seed=1, **{"clustering.k": 1})``."""
        out = self
        for key, value in changes.items():
            if "." in key:
                section, name = key.split(".", 1)
                sub = dataclasses.replace(getattr(out, section), **{name: value})
                out = dataclasses.replace(out, **{section: sub})
            else:
                out = dataclasses.replace(out, **{key: value})
        return out

    def to_dict(self) -> dict:
        def plain(v):
            if isinstance(v, tuple):
                return [plain(x) for x in v]
            return v
        return {k: ({kk: plain(vv) for kk, vv in v.items()} if isinstance(v, dict) else plain(v))
                for k, v in dataclasses.asdict(self).items()}


def dump_config(cfg: ExperimentConfig) -> str:
    """Canonical, diffable YAML (sorted keys, block style)."""
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True, default_flow_style=False)


def save_config(cfg: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(dump_config(cfg), encoding="utf-8")


# ---------------------------------------------------------------- loading


def _node_lines(node, prefix=()) -> dict[tuple, int]:
    lines = {prefix: node.start_mark.line + 1}
    if isinstance(node, yaml.MappingNode):
        for key, value in node.value:
            path = prefix + (key.value,)
            lines.update(_node_lines(value, path))
            lines[path] = key.start_mark.line + 1
    return lines


def _coerce(value: Any, default: Any, where: str):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigurationError(f"{where} must be true or false")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigurationError(f"{where} must be an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigurationError(f"{where} must be a number")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigurationError(f"{where} must be a string")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, list):
            raise ConfigurationError(f"{where} must be a list")
        return tuple(value)
    raise ConfigurationError(f"{where} has an unsupported type")


def _build_section(cls, data: Any, name: str, lines: dict, origin: str):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigFileError(f"{origin}:{lines.get((name,), 1)}: section '{name}' must be a mapping")
    defaults = cls()
    kwargs = {}
    for key, value in data.items():
        line = lines.get((name, key), lines.get((name,), 1))
        if key not in {f.name for f in dataclasses.fields(cls)}:
            raise ConfigFileError(f"{origin}:{line}: unknown key '{name}.{key}'")
        try:
            kwargs[key] = _coerce(value, getattr(defaults, key), f"{name}.{key}")
        except ConfigurationError as exc:
            raise ConfigFileError(f"{origin}:{line}: {exc}") from None
    return cls(**kwargs)


_SECTIONS = {
    "dataset": DatasetConfig,
    "partition": PartitionConfig,
    "network": NetworkConfig,
    "embedder": EmbedderConfig,
    "clustering": ClusteringConfig,
    "training": TrainingSection,
    "metrics": MetricsConfig,
}


def parse_config(text: str, origin: str = "<config>", base_dir: str | Path | None = None) -> ExperimentConfig:
    try:
        root = yaml.compose(text, Loader=yaml.SafeLoader)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = mark.line + 1 if mark else 1
        raise ConfigFileError(f"{origin}:{line}: YAML syntax error: {getattr(exc, 'problem', exc)}") from None
    lines = _node_lines(root) if root is not None else {}
    data = data or {}
    if not isinstance(data, dict):
        raise ConfigFileError(f"{origin}:1: top level must be a mapping")
    kwargs = {}
    for key, value in data.items():
        line = lines.get((key,), 1)
        if key in _SECTIONS:
            kwargs[key] = _build_section(_SECTIONS[key], value, key, lines, origin)
        elif key in ("seed", "output_dir"):
            try:
                kwargs[key] = _coerce(value, getattr(ExperimentConfig(), key), key)
            except ConfigurationError as exc:
                raise ConfigFileError(f"{origin}:{line}: {exc}") from None
        else:
            raise ConfigFileError(f"{origin}:{line}: unknown key '{key}'")
    cfg = ExperimentConfig(**kwargs)
    if base_dir is not None:
        cfg = _resolve_paths(cfg, Path(base_dir))
    validate_config(cfg, origin, lines)
    return cfg


def _resolve_paths(cfg: ExperimentConfig, base: Path) -> ExperimentConfig:
    def fix(p: str) -> str:
        return p if not p or Path(p).is_absolute() else str(base / p)
    ds = cfg.dataset
    return cfg.replace(dataset=dataclasses.replace(
        ds, images=fix(ds.images), labels=fix(ds.labels), paths=tuple(fix(p) for p in ds.paths)))


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigFileError(f"{path}:0: cannot read config: {exc.strerror}") from None
    return parse_config(text, str(path), path.parent)


def validate_config(cfg: ExperimentConfig, origin: str = "<config>", lines: dict | None = None) -> None:
    """Semantic checks, including that dataset files exist. Raises :class:`ConfigFileError`."""
    lines = lines or {}

    def fail(key: tuple, msg: str):
        line = lines.get(key, lines.get(key[:1], 1))
        raise ConfigFileError(f"{origin}:{line}: {msg}")

    ds = cfg.dataset
    if ds.kind not in DATASET_KINDS:
        fail(("dataset", "kind"), f"dataset.kind must be one of {DATASET_KINDS}")
    if ds.kind == "idx":
        for key in ("images", "labels"):
            value = getattr(ds, key)
            if not value or not Path(value).is_file():
                fail(("dataset", key), f"dataset.{key}: file not found: {value!r}")
    if ds.kind == "cifar":
        if not ds.paths:
            fail(("dataset", "paths"), "dataset.paths must list CIFAR batch files")
        for p in ds.paths:
            if not Path(p).is_file():
                fail(("dataset", "paths"), f"dataset.paths: file not found: {p!r}")
    if ds.shift < 0:
        fail(("dataset", "shift"), "dataset.shift must be >= 0")

    pt = cfg.partition
    if pt.scheme not in PARTITION_SCHEMES:
        fail(("partition", "scheme"), f"partition.scheme must be one of {PARTITION_SCHEMES}")
    if pt.n_clients < 1:
        fail(("partition", "n_clients"), "partition.n_clients must be >= 1")
    if not 0 <= pt.holdout_fraction < 1:
        fail(("partition", "holdout_fraction"), "partition.holdout_fraction must be in [0, 1)")
    if not 0 < pt.major_mass <= 1:
        fail(("partition", "major_mass"), "partition.major_mass must be in (0, 1]")

    nw = cfg.network
    if nw.head_mode not in HEAD_MODES:
        fail(("network", "head_mode"), f"network.head_mode must be one of {HEAD_MODES}")
    if nw.embedding_dim < 1:
        fail(("network", "embedding_dim"), "network.embedding_dim must be >= 1")
    if len(nw.channels) != 2 or any(not isinstance(c, int) or c < 1 for c in nw.channels):
        fail(("network", "channels"), "network.channels must be two positive integers")
    if nw.recon_weight < 0:
        fail(("network", "recon_weight"), "network.recon_weight must be >= 0")

    em = cfg.embedder
    if em.method not in METHODS:
        fail(("embedder", "method"), f"embedder.method must be one of {METHODS}")
    try:
        em.statistics
    except ConfigurationError as exc:
        fail(("embedder", "quantiles"), f"embedder: {exc}")
    if em.fine_tune_epochs < 1 or em.lr <= 0:
        fail(("embedder", "fine_tune_epochs"), "embedder.fine_tune_epochs must be >= 1 and embedder.lr > 0")
    if em.method == "WD" and nw.head_mode == "AE":
        fail(("network", "head_mode"), "WD embeddings need a classifier head (CLF or SAE)")

    cl = cfg.clustering
    if cl.k < 1:
        fail(("clustering", "k"), "clustering.k must be >= 1")
    if em.method == "FEDAVG" and cl.k != 1:
        fail(("clustering", "k"), "the FEDAVG baseline uses a single cluster (clustering.k: 1)")
    if cl.restarts < 1 or cl.max_iter < 1 or cl.tol < 0:
        fail(("clustering",), "clustering.restarts/max_iter must be >= 1 and tol >= 0")

    tr = cfg.training
    checks = [
        ("rounds", tr.rounds >= 1, "training.rounds must be >= 1"),
        ("fraction_fit", 0 < tr.fraction_fit <= 1, "training.fraction_fit must be in (0, 1]"),
        ("local_epochs", tr.local_epochs >= 1, "training.local_epochs must be >= 1"),
        ("lr", tr.lr > 0, "training.lr must be > 0"),
        ("batch_size", tr.batch_size >= 1, "training.batch_size must be >= 1"),
        ("mu", tr.mu >= 0, "training.mu must be >= 0"),
        ("warmup_rounds", tr.warmup_rounds >= 0, "training.warmup_rounds must be >= 0"),
    ]
    for key, ok, msg in checks:
        if not ok:
            fail(("training", key), msg)

    mt = cfg.metrics
    if mt.robustness_iterations < 1:
        fail(("metrics", "robustness_iterations"), "metrics.robustness_iterations must be >= 1")
    if mt.similarity not in ("label_skew", "concept_drift"):
        fail(("metrics", "similarity"), "metrics.similarity must be label_skew or concept_drift")
    if mt.reference_images < 1:
        fail(("metrics", "reference_images"), "metrics.reference_images must be >= 1")
