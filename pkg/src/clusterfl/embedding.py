"""Client embeddings.

REPA summarizes the cloud of encoder outputs of a client's (unlabeled) images with
per-dimension statistics; it needs neither labels nor training. WD is the baseline
that fine-tunes the global model locally and reports the weight delta.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import ClientDataset
from .errors import CapabilityError, ConfigurationError, InputError
from .nn import ModelParameters, NetworkSpec, encode, train_local
from .persist import save_array, load_array


@dataclass(frozen=True)
class StatisticsConfig:
    include_mean: bool = True
    include_std: bool = False
    quantiles: tuple[float, ...] = (0.25, 0.5, 0.75)

    def __post_init__(self):
        q = tuple(float(v) for v in self.quantiles)
        object.__setattr__(self, "quantiles", q)
        if not (self.include_mean or self.include_std or q):
            raise ConfigurationError("enable at least one statistic")
        if any(not 0 < v < 1 for v in q):
            raise ConfigurationError("quantiles must lie in (0, 1)")
        if any(b <= a for a, b in zip(q, q[1:])):
            raise ConfigurationError("quantiles must be strictly increasing")

    @property
    def n_statistics(self) -> int:
        return int(self.include_mean) + int(self.include_std) + len(self.quantiles)

    def to_dict(self) -> dict:
        return {"include_mean": self.include_mean, "include_std": self.include_std,
                "quantiles": list(self.quantiles)}

    @classmethod
    def from_dict(cls, d: dict) -> "StatisticsConfig":
        return cls(bool(d.get("include_mean", True)), bool(d.get("include_std", False)),
                   tuple(d.get("quantiles", (0.25, 0.5, 0.75))))


@dataclass(frozen=True, eq=False)
class ClientEmbedding:
    client_id: int
    method: str
    vector: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vector, dtype=np.float32).ravel()
        if not np.all(np.isfinite(v)):
            raise InputError(f"embedding of client {self.client_id} is not finite")
        object.__setattr__(self, "vector", v)

    @property
    def dim(self) -> int:
        return self.vector.size


def embedding_statistics(points: np.ndarray, cfg: StatisticsConfig) -> np.ndarray:
    """``[mean | std | q_1 | q_2 ...]``, each of length E, computed per dimension.

    std is the population std; quantiles interpolate linearly between order statistics.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or len(points) == 0:
        raise InputError("need a non-empty (N, E) array of points")
    parts = []
    if cfg.include_mean:
        parts.append(points.mean(axis=0))
    if cfg.include_std:
        parts.append(points.std(axis=0))
    if cfg.quantiles:
        parts.extend(np.quantile(points, cfg.quantiles, axis=0, method="linear"))
    return np.concatenate(parts)


def repa_embed(
    params: ModelParameters,
    spec: NetworkSpec,
    client: ClientDataset,
    cfg: StatisticsConfig = StatisticsConfig(),
    batch_size: int = 256,
) -> ClientEmbedding:
    images = client.embedding_split.images
    if len(images) == 0:
        raise InputError(f"client {client.client_id} has no images to embed")
    points = encode(params, spec, images, batch_size)
    return ClientEmbedding(client.client_id, "REPA", embedding_statistics(points, cfg))


def wd_embed(
    global_params: ModelParameters,
    spec: NetworkSpec,
    client: ClientDataset,
    epochs: int,
    lr: float,
    batch_size: int,
    seed: int,
) -> ClientEmbedding:
    """Weight delta ``global - local`` after ``epochs`` of local fine-tuning."""
    if client.role != "training" or not client.labels_visible:
        raise CapabilityError(f"client {client.client_id} cannot train locally (role={client.role})")
    data = client.train
    if spec.has_classifier and data.labels is None:
        raise CapabilityError(f"client {client.client_id} has no labels for local training")
    local = train_local(global_params, spec, data, epochs, lr, batch_size, seed=seed)
    return ClientEmbedding(client.client_id, "WD", global_params.values - local.values)


def save_embeddings(path: str | Path, embeddings: list[ClientEmbedding], **meta) -> Path:
    if not embeddings:
        raise InputError("no embeddings to save")
    matrix = np.stack([e.vector for e in embeddings])
    info = {"kind": "client_embeddings", "client_ids": [e.client_id for e in embeddings],
            "method": embeddings[0].method, "dim": embeddings[0].dim, **meta}
    return save_array(path, matrix, info)


def load_embeddings(path: str | Path) -> tuple[list[ClientEmbedding], dict]:
    matrix, meta = load_array(path)
    out = [ClientEmbedding(cid, meta["method"], row) for cid, row in zip(meta["client_ids"], matrix)]
    return out, meta
