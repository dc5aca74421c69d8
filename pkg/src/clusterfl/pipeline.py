"""End-to-end experiment: ingest, partition, warm-up, embed, cluster, train, measure.

:func:`run_experiment` runs everything in memory. The ``stage_*`` functions run one
step each against an output directory, reading their inputs from the artifacts
written by the previous step, so a staged run and a monolithic run go through
exactly the same code and produce the same bytes.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .clustering import KMeansModel, kmeans_fit, kmeans_predict, load_kmeans, save_kmeans
from .config import ExperimentConfig, save_config
from .data import (
    ClientDataset,
    ImageDataset,
    assign_concept_drift,
    client_distribution,
    clients_from_manifest,
    default_catalog,
    load_cifar_binary,
    load_digits_pool,
    load_idx,
    partition_label_skew,
    partition_manifest,
    partition_pathological,
)
from .embedding import ClientEmbedding, load_embeddings, repa_embed, save_embeddings, wd_embed
from .engine import RoundReport, TrainingConfig, train_rounds
from .errors import ClusterFLError, ConfigurationError, UndefinedCorrelationError
from .metrics import (
    concept_drift_similarity_matrix,
    correlation,
    embedding_similarity_matrix,
    label_skew_similarity_matrix,
    mean_and_se,
    robustness,
    uniformity,
)
from .nn import ModelParameters, NetworkSpec, init_params, load_params, save_params
from .persist import dump_json, load_json
from .seeding import derive_seed, rng_for

CSV_COLUMNS = ("round", "cluster", "n_participants", "mean_local_loss", "val_accuracy", "ho_accuracy")
METRIC_COLUMNS = ("metric", "cluster", "value")
SUMMARY_KEYS = ("method", "k", "rounds", "val_acc", "ho_acc", "uniformity", "robustness_mean",
                "robustness_se", "correlation")
ALL_METRICS = ("uniformity", "robustness", "correlation")

ARTIFACTS = {
    "config": "config.yaml",
    "partition": "partition.json",
    "warmup": "checkpoints/warmup.json",
    "warmup_log": "warmup_log.json",
    "embeddings": "embeddings.json",
    "clusters": "clusters.json",
    "kmeans": "kmeans.json",
    "rounds": "rounds.csv",
    "log": "log.json",
    "metrics": "metrics.csv",
    "summary": "summary.json",
}


class MissingArtifactError(ClusterFLError):
    """An upstream artifact required by a stage is not in the output directory."""


# ---------------------------------------------------------------- building blocks


def load_pool(cfg: ExperimentConfig) -> ImageDataset:
    ds = cfg.dataset
    if ds.kind == "idx":
        return load_idx(ds.images, ds.labels)
    if ds.kind == "cifar":
        return load_cifar_binary(ds.paths)
    return load_digits_pool(ds.shift)


def network_spec(cfg: ExperimentConfig, pool: ImageDataset) -> NetworkSpec:
    nw = cfg.network
    return NetworkSpec(tuple(pool.images.shape[1:]), nw.embedding_dim, pool.class_count,
                       nw.head_mode, nw.recon_weight, tuple(nw.channels))


def training_config(cfg: ExperimentConfig) -> TrainingConfig:
    tr = cfg.training
    return TrainingConfig(tr.rounds, tr.fraction_fit, tr.local_epochs, tr.lr, tr.batch_size, tr.mu,
                          tr.warmup_rounds, derive_seed(cfg.seed, "training"))


def build_population(cfg: ExperimentConfig, pool: ImageDataset) -> list[ClientDataset]:
    pt = cfg.partition
    seed = derive_seed(cfg.seed, "partition")
    if pt.scheme == "pathological":
        clients = partition_pathological(pool, pt.n_clients, pt.classes_per_client, pt.shards_per_client,
                                         pt.holdout_fraction, seed)
    elif pt.scheme == "label_skew":
        clients = partition_label_skew(pool, pt.n_clients, pt.major_classes_per_client, pt.major_mass,
                                       pt.samples_per_client, pt.holdout_fraction, seed)
    else:
        clients = partition_label_skew(pool, pt.n_clients, pool.class_count, 1.0, pt.samples_per_client,
                                       pt.holdout_fraction, seed)
    if pt.concept_drift:
        clients = assign_concept_drift(clients, default_catalog(), derive_seed(cfg.seed, "drift"))
    return clients


def check_population(cfg: ExperimentConfig, clients: list[ClientDataset]) -> None:
    """Configuration problems that only show once the population exists; raised before any training."""
    n_train = sum(c.role == "training" for c in clients)
    if n_train == 0:
        raise ConfigurationError("the partition produced no training clients")
    if cfg.clustering.k > n_train:
        raise ConfigurationError(f"clustering.k = {cfg.clustering.k} exceeds the {n_train} training clients")


def warmup(cfg: ExperimentConfig, spec: NetworkSpec, clients: list[ClientDataset],
           threads: int = 1) -> tuple[ModelParameters, list[RoundReport]]:
    """Global FedAvg over every training client; supplies the REPA encoder and WD's starting model."""
    params = init_params(spec, derive_seed(cfg.seed, "init"))
    if cfg.training.warmup_rounds == 0:
        return params, []
    everyone = {c.client_id: 0 for c in clients}
    models, history = train_rounds({0: params}, clients, everyone, training_config(cfg), spec,
                                   cfg.training.warmup_rounds, threads, stage="warmup")
    return models[0], history


def embed_fn_for(cfg: ExperimentConfig, spec: NetworkSpec, params: ModelParameters) -> Callable:
    em = cfg.embedder
    if em.method == "REPA":
        return lambda client: repa_embed(params, spec, client, em.statistics)
    if em.method == "WD":
        return lambda client: wd_embed(params, spec, client, em.fine_tune_epochs, em.lr,
                                       cfg.training.batch_size, derive_seed(cfg.seed, "wd", client.client_id))
    return None


def embed_population(cfg: ExperimentConfig, spec: NetworkSpec, params: ModelParameters,
                     clients: list[ClientDataset]) -> list[ClientEmbedding]:
    """REPA embeds every client; WD only the training clients (holdout clients cannot train)."""
    fn = embed_fn_for(cfg, spec, params)
    if fn is None:
        return []
    ranked = sorted(clients, key=lambda c: c.client_id)
    if cfg.embedder.method == "WD":
        ranked = [c for c in ranked if c.role == "training"]
    return [fn(c) for c in ranked]


def cluster_population(cfg: ExperimentConfig, embeddings: list[ClientEmbedding],
                       clients: list[ClientDataset]) -> tuple[KMeansModel | None, dict[int, int]]:
    if cfg.embedder.method == "FEDAVG":
        return None, {c.client_id: 0 for c in sorted(clients, key=lambda c: c.client_id)}
    roles = {c.client_id: c.role for c in clients}
    train = [e for e in embeddings if roles[e.client_id] == "training"]
    cl = cfg.clustering
    model, assignment = kmeans_fit(train, cl.k, cl.restarts, cl.max_iter, cl.tol, derive_seed(cfg.seed, "kmeans"))
    for e in embeddings:
        if roles[e.client_id] == "holdout":
            assignment[e.client_id] = kmeans_predict(model, e)
    return model, dict(sorted(assignment.items()))


def train_clusters(cfg: ExperimentConfig, spec: NetworkSpec, params: ModelParameters,
                   clients: list[ClientDataset], assignment: dict[int, int], threads: int = 1):
    models = {c: params.copy() for c in range(cfg.clustering.k)}
    return train_rounds(models, clients, assignment, training_config(cfg), spec, cfg.training.rounds, threads)


def compute_metrics(
    cfg: ExperimentConfig,
    spec: NetworkSpec,
    params: ModelParameters,
    pool: ImageDataset,
    clients: list[ClientDataset],
    embeddings: list[ClientEmbedding],
    model: KMeansModel | None,
    assignment: dict[int, int],
    which: tuple[str, ...] = ALL_METRICS,
) -> list[tuple[str, str, float | None]]:
    """Rows of ``(metric, cluster, value)``; ``cluster`` is an index or ``"all"``."""
    rows: list[tuple[str, str, float | None]] = []
    if "uniformity" in which:
        dvs = {c.client_id: client_distribution(c) for c in clients if c.client_id in assignment}
        rows.append(("uniformity", "all", uniformity(assignment, dvs)))
    if "robustness" in which:
        per_cluster = []
        embed_fn = embed_fn_for(cfg, spec, params)
        seed = derive_seed(cfg.seed, "robustness")
        for c in range(cfg.clustering.k):
            members = [cl for cl in clients if cl.role == "training" and assignment.get(cl.client_id) == c]
            if not members:
                continue
            if model is None:
                value = 1.0  # single cluster: every client lands in it
            else:
                value = robustness(c, members, embed_fn, model, pool, cfg.metrics.robustness_iterations, seed)
            per_cluster.append(value)
            rows.append(("robustness", str(c), value))
        mean, se = mean_and_se(per_cluster)
        rows += [("robustness_mean", "all", mean), ("robustness_se", "all", se)]
    if "correlation" in which:
        rows.append(("correlation", "all", _correlation(cfg, spec, params, pool, clients, embeddings)))
    return rows


def _correlation(cfg, spec, params, pool, clients, embeddings) -> float | None:
    if not embeddings:
        return None
    covered = {e.client_id for e in embeddings}
    subset = [c for c in clients if c.client_id in covered]
    if cfg.metrics.similarity == "label_skew":
        dataset_sims = label_skew_similarity_matrix({c.client_id: client_distribution(c) for c in subset})
    else:
        n = min(cfg.metrics.reference_images, len(pool))
        pick = np.sort(rng_for(cfg.seed, "reference-images").choice(len(pool), size=n, replace=False))
        dataset_sims = concept_drift_similarity_matrix(subset, pool.subset(pick), params, spec)
    try:
        return correlation(dataset_sims, embedding_similarity_matrix(embeddings))
    except UndefinedCorrelationError:
        return None


def summarize(cfg: ExperimentConfig, history: list[RoundReport], metric_rows) -> dict:
    latest = {}
    for metric, cluster, value in metric_rows:
        latest[(metric, str(cluster))] = value
    final = history[-1] if history else None
    return {
        "method": cfg.embedder.method,
        "k": cfg.clustering.k,
        "rounds": cfg.training.rounds,
        "val_acc": final.overall_val_accuracy if final else None,
        "ho_acc": final.overall_ho_accuracy if final else None,
        "uniformity": latest.get(("uniformity", "all")),
        "robustness_mean": latest.get(("robustness_mean", "all")),
        "robustness_se": latest.get(("robustness_se", "all")),
        "correlation": latest.get(("correlation", "all")),
    }


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    spec: NetworkSpec
    clients: list[ClientDataset]
    warmup_params: ModelParameters
    warmup_history: list[RoundReport]
    embeddings: list[ClientEmbedding]
    kmeans: KMeansModel | None
    assignment: dict[int, int]
    models: dict[int, ModelParameters]
    history: list[RoundReport]
    metrics: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)


def enabled_metrics(cfg: ExperimentConfig) -> tuple[str, ...]:
    mt = cfg.metrics
    return tuple(m for m, on in zip(ALL_METRICS, (mt.uniformity, mt.robustness, mt.correlation)) if on)


def run_experiment(cfg: ExperimentConfig, threads: int = 1, pool: ImageDataset | None = None) -> ExperimentResult:
    """Whole pipeline in memory. ``pool`` skips ingestion when the caller already holds it."""
    pool = load_pool(cfg) if pool is None else pool
    spec = network_spec(cfg, pool)
    clients = build_population(cfg, pool)
    check_population(cfg, clients)
    params, warm_history = warmup(cfg, spec, clients, threads)
    embeddings = embed_population(cfg, spec, params, clients)
    model, assignment = cluster_population(cfg, embeddings, clients)
    models, history = train_clusters(cfg, spec, params, clients, assignment, threads)
    rows = compute_metrics(cfg, spec, params, pool, clients, embeddings, model, assignment, enabled_metrics(cfg))
    return ExperimentResult(cfg, spec, clients, params, warm_history, embeddings, model, assignment, models,
                            history, rows, summarize(cfg, history, rows))


# ---------------------------------------------------------------- serialization


def _fmt(value) -> str:
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def rounds_csv(history: list[RoundReport]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for rep in history:
        for c in sorted(rep.participants):
            writer.writerow([rep.round, c, len(rep.participants[c]), _fmt(rep.mean_local_loss.get(c)),
                             _fmt(rep.val_accuracy.get(c)), _fmt(rep.ho_accuracy.get(c))])
        n = sum(len(v) for v in rep.participants.values())
        losses = [(len(rep.participants[c]), v) for c, v in rep.mean_local_loss.items() if v is not None]
        mean_loss = sum(k * v for k, v in losses) / n if n else None
        writer.writerow([rep.round, "all", n, _fmt(mean_loss), _fmt(rep.overall_val_accuracy),
                         _fmt(rep.overall_ho_accuracy)])
    return buf.getvalue()


def metrics_csv(rows, header: bool = True) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    if header:
        writer.writerow(METRIC_COLUMNS)
    for metric, cluster, value in rows:
        writer.writerow([metric, cluster, _fmt(value)])
    return buf.getvalue()


def read_metrics_csv(path: Path) -> list[tuple[str, str, float | None]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [(r["metric"], r["cluster"], float(r["value"]) if r["value"] else None) for r in csv.DictReader(fh)]


# ---------------------------------------------------------------- staged execution


def artifact(out: Path, name: str) -> Path:
    return Path(out) / ARTIFACTS[name]


def _require(out: Path, *names: str) -> None:
    for name in names:
        if not artifact(out, name).exists():
            raise MissingArtifactError(f"missing upstream artifact {ARTIFACTS[name]} in {out}")


def _load_population(cfg: ExperimentConfig, out: Path):
    _require(out, "partition")
    pool = load_pool(cfg)
    clients = clients_from_manifest(load_json(artifact(out, "partition")), pool)
    return pool, clients


def stage_partition(cfg: ExperimentConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    pool = load_pool(cfg)
    clients = build_population(cfg, pool)
    manifest = partition_manifest(clients, seed=cfg.seed, scheme=cfg.partition.scheme,
                                  partition_seed=derive_seed(cfg.seed, "partition"))
    dump_json(manifest, artifact(out, "partition"))


def stage_embed(cfg: ExperimentConfig, out: Path, threads: int = 1) -> None:
    pool, clients = _load_population(cfg, out)
    check_population(cfg, clients)
    spec = network_spec(cfg, pool)
    params, history = warmup(cfg, spec, clients, threads)
    artifact(out, "warmup").parent.mkdir(parents=True, exist_ok=True)
    save_params(artifact(out, "warmup"), params, spec, seed=cfg.seed, stage="warmup",
                rounds=cfg.training.warmup_rounds)
    dump_json({"history": [r.to_dict() for r in history],
               "encoder_untrained": cfg.training.warmup_rounds == 0}, artifact(out, "warmup_log"))
    embeddings = embed_population(cfg, spec, params, clients)
    if embeddings:
        save_embeddings(artifact(out, "embeddings"), embeddings, statistics=cfg.embedder.statistics.to_dict())
    else:
        dump_json({"kind": "client_embeddings", "method": cfg.embedder.method, "client_ids": []},
                  artifact(out, "embeddings"))


def _load_embeddings(out: Path) -> list[ClientEmbedding]:
    _require(out, "embeddings")
    meta = load_json(artifact(out, "embeddings"))
    if not meta["client_ids"]:
        return []
    return load_embeddings(artifact(out, "embeddings"))[0]


def stage_cluster(cfg: ExperimentConfig, out: Path) -> None:
    _, clients = _load_population(cfg, out)
    embeddings = _load_embeddings(out)
    model, assignment = cluster_population(cfg, embeddings, clients)
    if model is not None:
        save_kmeans(artifact(out, "kmeans"), model, assignment, seed=cfg.seed)
    unassigned = sorted(c.client_id for c in clients if c.client_id not in assignment)
    dump_json({"method": cfg.embedder.method, "k": cfg.clustering.k,
               "assignment": {str(c): a for c, a in assignment.items()}, "unassigned": unassigned},
              artifact(out, "clusters"))


def _load_clusters(cfg: ExperimentConfig, out: Path):
    _require(out, "clusters")
    data = load_json(artifact(out, "clusters"))
    assignment = {int(c): int(a) for c, a in data["assignment"].items()}
    model = None
    if cfg.embedder.method != "FEDAVG":
        _require(out, "kmeans")
        model = load_kmeans(artifact(out, "kmeans"))[0]
    return model, assignment


def stage_train(cfg: ExperimentConfig, out: Path, threads: int = 1) -> None:
    pool, clients = _load_population(cfg, out)
    _require(out, "warmup")
    params, spec, _ = load_params(artifact(out, "warmup"))
    _, assignment = _load_clusters(cfg, out)
    models, history = train_clusters(cfg, spec, params, clients, assignment, threads)
    for c, m in models.items():
        save_params(out / "checkpoints" / f"cluster_{c}.json", m, spec, seed=cfg.seed, cluster=c,
                    rounds=cfg.training.rounds)
    artifact(out, "rounds").write_text(rounds_csv(history), encoding="utf-8")
    dump_json({"method": cfg.embedder.method, "history": [r.to_dict() for r in history]}, artifact(out, "log"))


def stage_metrics(cfg: ExperimentConfig, out: Path, which: tuple[str, ...] | None = None,
                  append: bool = False) -> list:
    pool, clients = _load_population(cfg, out)
    _require(out, "warmup", "embeddings", "clusters")
    params, spec, _ = load_params(artifact(out, "warmup"))
    embeddings = _load_embeddings(out)
    model, assignment = _load_clusters(cfg, out)
    which = enabled_metrics(cfg) if which is None else which
    rows = compute_metrics(cfg, spec, params, pool, clients, embeddings, model, assignment, which)
    path = artifact(out, "metrics")
    if append and path.exists():
        with open(path, "a", encoding="utf-8", newline="") as fh:
            fh.write(metrics_csv(rows, header=False))
    else:
        path.write_text(metrics_csv(rows), encoding="utf-8")
    return rows


def stage_summary(cfg: ExperimentConfig, out: Path) -> dict:
    _require(out, "log")
    history = load_json(artifact(out, "log"))["history"]
    rows = read_metrics_csv(artifact(out, "metrics")) if artifact(out, "metrics").exists() else []
    final = history[-1] if history else {}
    latest = {(m, c): v for m, c, v in rows}
    summary = {
        "method": cfg.embedder.method,
        "k": cfg.clustering.k,
        "rounds": cfg.training.rounds,
        "val_acc": final.get("overall_val_accuracy"),
        "ho_acc": final.get("overall_ho_accuracy"),
        "uniformity": latest.get(("uniformity", "all")),
        "robustness_mean": latest.get(("robustness_mean", "all")),
        "robustness_se": latest.get(("robustness_se", "all")),
        "correlation": latest.get(("correlation", "all")),
    }
    dump_json(summary, artifact(out, "summary"))
    return summary


def run_pipeline(cfg: ExperimentConfig, out: str | Path, threads: int = 1, resume: bool = False) -> dict:
    """All stages against ``out``; with ``resume`` existing stage outputs are reused."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, artifact(out, "config"))
    steps = [
        ("partition", lambda: stage_partition(cfg, out)),
        ("embeddings", lambda: stage_embed(cfg, out, threads)),
        ("clusters", lambda: stage_cluster(cfg, out)),
        ("log", lambda: stage_train(cfg, out, threads)),
        ("metrics", lambda: stage_metrics(cfg, out)),
    ]
    for produced, step in steps:
        if resume and artifact(out, produced).exists():
            continue
        step()
    return stage_summary(cfg, out)
