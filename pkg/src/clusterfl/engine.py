"""Clustered federated training: participant sampling, FedProx local updates,
per-cluster FedAvg aggregation and evaluation.

There is no networking; a round is a deterministic function of the current
cluster models, the client population and the seeds.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .data import ClientDataset, ImageDataset
from .errors import ConfigurationError, InputError
from .nn import ModelParameters, NetworkSpec, predict_proba, train_local
from .seeding import derive_seed, rng_for

ClusterModelSet = dict[int, ModelParameters]


@dataclass(frozen=True)
class TrainingConfig:
    rounds: int = 30
    fraction_fit: float = 1.0
    local_epochs: int = 1
    lr: float = 0.05
    batch_size: int = 32
    mu: float = 0.0
    warmup_rounds: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.rounds < 1:
            raise ConfigurationError("rounds must be >= 1")
        if not 0 < self.fraction_fit <= 1:
            raise ConfigurationError("fraction_fit must be in (0, 1]")
        if self.local_epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("local_epochs and batch_size must be >= 1")
        if not self.lr > 0:
            raise ConfigurationError("lr must be > 0")
        if self.mu < 0 or self.warmup_rounds < 0:
            raise ConfigurationError("mu and warmup_rounds must be >= 0")


@dataclass
class RoundReport:
    round: int
    participants: dict[int, list[int]] = field(default_factory=dict)
    mean_local_loss: dict[int, float | None] = field(default_factory=dict)
    val_accuracy: dict[int, float | None] = field(default_factory=dict)
    ho_accuracy: dict[int, float | None] = field(default_factory=dict)
    overall_val_accuracy: float | None = None
    overall_ho_accuracy: float | None = None
    skipped_clusters: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        key = lambda d: {str(k): v for k, v in sorted(d.items())}  # noqa: E731
        return {
            "round": self.round,
            "participants": key(self.participants),
            "mean_local_loss": key(self.mean_local_loss),
            "val_accuracy": key(self.val_accuracy),
            "ho_accuracy": key(self.ho_accuracy),
            "overall_val_accuracy": self.overall_val_accuracy,
            "overall_ho_accuracy": self.overall_ho_accuracy,
            "skipped_clusters": self.skipped_clusters,
        }


def fedavg_aggregate(updates: Iterable[tuple[ModelParameters, float]]) -> ModelParameters:
    """Weighted element-wise mean ``sum(w_i theta_i) / sum(w_i)``, accumulated in float64."""
    updates = list(updates)
    if not updates:
        raise InputError("nothing to aggregate")
    layout = updates[0][0].layout
    acc = np.zeros(updates[0][0].size, dtype=np.float64)
    total = 0.0
    for params, weight in updates:
        if params.layout != layout:
            raise InputError("updates have different layouts")
        if not weight > 0:
            raise InputError("aggregation weights must be positive")
        acc += float(weight) * params.values.astype(np.float64)
        total += float(weight)
    return ModelParameters((acc / total).astype(updates[0][0].values.dtype), layout)


def sample_participants(members: Iterable[int], fraction_fit: float, round_index: int, seed: int,
                        cluster: int | str = 0) -> list[int]:
    """``ceil(fraction_fit * |members|)`` ids drawn without replacement, returned sorted."""
    members = sorted(members)
    if not members:
        return []
    m = math.ceil(fraction_fit * len(members) - 1e-9)
    if m >= len(members):
        return members
    rng = rng_for(seed, "participants", round_index, cluster)
    return sorted(int(v) for v in rng.choice(members, size=m, replace=False))


def _correct(params: ModelParameters, spec: NetworkSpec, dataset: ImageDataset) -> int:
    probs = predict_proba(params, spec, dataset.images)
    return int(np.sum(probs.argmax(axis=1) == dataset.labels))


def evaluate(params: ModelParameters, spec: NetworkSpec, dataset: ImageDataset) -> float:
    """Fraction of argmax-correct predictions (ties go to the lowest class index)."""
    if len(dataset) == 0:
        raise InputError("cannot evaluate on an empty dataset")
    if dataset.labels is None:
        raise InputError("evaluation needs labels")
    return _correct(params, spec, dataset) / len(dataset)


def _pooled_accuracy(models: ClusterModelSet, spec: NetworkSpec, groups: dict[int, list[ClientDataset]]):
    per_cluster, hits, seen = {}, 0, 0
    for c, members in sorted(groups.items()):
        if not members or c not in models:
            per_cluster[c] = None
            continue
        right = sum(_correct(models[c], spec, m.validation) for m in members)
        n = sum(len(m.validation) for m in members)
        per_cluster[c] = right / n
        hits, seen = hits + right, seen + n
    return per_cluster, (hits / seen if seen else None)


def evaluate_population(models: ClusterModelSet, spec: NetworkSpec, clients: list[ClientDataset],
                        assignment: dict[int, int]):
    """Pooled validation accuracy per cluster and overall, separately for training (VAL) and holdout (HO)."""
    train_groups: dict[int, list] = {c: [] for c in models}
    ho_groups: dict[int, list] = {c: [] for c in models}
    for client in clients:
        if client.client_id not in assignment:
            continue
        target = train_groups if client.role == "training" else ho_groups
        target.setdefault(assignment[client.client_id], []).append(client)
    val, val_all = _pooled_accuracy(models, spec, train_groups)
    ho, ho_all = _pooled_accuracy(models, spec, ho_groups)
    return val, val_all, ho, ho_all


def local_update(model: ModelParameters, spec: NetworkSpec, client: ClientDataset, cfg: TrainingConfig,
                 round_index: int, stage: str = "local"):
    seed = derive_seed(cfg.seed, stage, round_index, client.client_id)
    params, losses = train_local(model, spec, client.train, cfg.local_epochs, cfg.lr, cfg.batch_size,
                                 prox=(cfg.mu, model), seed=seed, return_losses=True)
    return params, losses[-1]


def run_round(
    models: ClusterModelSet,
    clients: list[ClientDataset],
    assignment: dict[int, int],
    cfg: TrainingConfig,
    spec: NetworkSpec,
    round_index: int,
    threads: int = 1,
    stage: str = "local",
    evaluate_models: bool = True,
) -> tuple[ClusterModelSet, RoundReport]:
    """One server round for every cluster; holdout clients never train."""
    by_id = {c.client_id: c for c in clients}
    members: dict[int, list[int]] = {c: [] for c in models}
    for client in clients:
        if client.role != "training":
            continue
        if client.client_id not in assignment:
            raise InputError(f"training client {client.client_id} has no cluster")
        members.setdefault(assignment[client.client_id], []).append(client.client_id)

    report = RoundReport(round_index)
    new_models = dict(models)
    jobs = []
    for c in sorted(models):
        key = c if stage == "local" else f"{stage}/{c}"
        chosen = sample_participants(members.get(c, []), cfg.fraction_fit, round_index, cfg.seed, key)
        report.participants[c] = chosen
        if not chosen:
            report.skipped_clusters.append(c)
            report.mean_local_loss[c] = None
            continue
        jobs.extend((c, cid) for cid in chosen)

    def work(job):
        c, cid = job
        return local_update(models[c], spec, by_id[cid], cfg, round_index, stage)

    if threads > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, jobs))
    else:
        results = [work(job) for job in jobs]

    # reduce in (cluster, client id) order so the result is schedule independent
    for c in sorted(models):
        mine = [(cid, res) for (cc, cid), res in zip(jobs, results) if cc == c]
        if not mine:
            continue
        new_models[c] = fedavg_aggregate((params, by_id[cid].train_size) for cid, (params, _) in mine)
        report.mean_local_loss[c] = float(np.mean([loss for _, (_, loss) in mine]))

    if evaluate_models:
        val, val_all, ho, ho_all = evaluate_population(new_models, spec, clients, assignment)
        report.val_accuracy, report.overall_val_accuracy = val, val_all
        report.ho_accuracy, report.overall_ho_accuracy = ho, ho_all
    return new_models, report


def train_rounds(
    models: ClusterModelSet,
    clients: list[ClientDataset],
    assignment: dict[int, int],
    cfg: TrainingConfig,
    spec: NetworkSpec,
    rounds: int,
    threads: int = 1,
    stage: str = "local",
    first_round: int = 1,
) -> tuple[ClusterModelSet, list[RoundReport]]:
    history = []
    for r in range(first_round, first_round + rounds):
        models, report = run_round(models, clients, assignment, cfg, spec, r, threads, stage)
        history.append(report)
    return models, history
