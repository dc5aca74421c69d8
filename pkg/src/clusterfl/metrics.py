"""Evaluation metrics: dataset similarity, embedding/similarity correlation,
cluster uniformity and cluster robustness."""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations
from typing import Callable, Mapping, Sequence

import numpy as np

from .clustering import KMeansModel, kmeans_predict
from .data import (
    AugmentationPipeline,
    ClientDataset,
    ImageDataset,
    apply_pipeline_batch,
    client_distribution,
    image_seed,
)
from .embedding import ClientEmbedding
from .errors import InputError, SamplingError, UndefinedCorrelationError
from .nn import ModelParameters, NetworkSpec, encode
from .seeding import derive_seed, rng_for


@dataclass(frozen=True, eq=False)
class SimilarityMatrix:
    client_ids: tuple[int, ...]
    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (len(self.client_ids), len(self.client_ids)):
            raise InputError("matrix shape does not match client ids")
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "client_ids", tuple(int(c) for c in self.client_ids))

    def upper(self) -> np.ndarray:
        return self.matrix[np.triu_indices(len(self.client_ids), k=1)]


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise InputError("cosine similarity of a zero vector is undefined")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def _cosine_matrix(rows: np.ndarray) -> np.ndarray:
    rows = np.asarray(rows, dtype=np.float64)
    norms = np.linalg.norm(rows, axis=1)
    if np.any(norms == 0):
        raise InputError("cosine similarity of a zero vector is undefined")
    unit = rows / norms[:, None]
    m = np.clip(unit @ unit.T, -1.0, 1.0)
    m = (m + m.T) / 2
    np.fill_diagonal(m, 1.0)
    return m


def label_skew_similarity(d_i: np.ndarray, d_j: np.ndarray) -> float:
    """Cosine similarity of two class-count vectors."""
    if np.shape(d_i) != np.shape(d_j):
        raise InputError("distribution vectors have different class counts")
    return _cosine(d_i, d_j)


def label_skew_similarity_matrix(dvs: Mapping[int, np.ndarray]) -> SimilarityMatrix:
    ids = sorted(dvs)
    return SimilarityMatrix(tuple(ids), _cosine_matrix(np.stack([dvs[c] for c in ids])))


def jensen_shannon(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Base-2 JS divergence between the rows of ``p`` and ``q`` (each row a distribution)."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    m = 0.5 * (p + q)

    def kl(a, b):
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = np.where(a > 0, a * np.log2(a / b), 0.0)
        return terms.sum(axis=-1)

    return np.clip(0.5 * kl(p, m) + 0.5 * kl(q, m), 0.0, 1.0)


def _softmax_rows(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def concept_drift_similarity(
    p_i: AugmentationPipeline,
    p_j: AugmentationPipeline,
    reference: ImageDataset,
    probe: ModelParameters,
    spec: NetworkSpec,
    drift_seed: int = 0,
) -> float:
    """1 - mean JSD between softmaxed probe embeddings of the same images under both pipelines."""
    if len(reference) == 0:
        raise InputError("reference set is empty")
    if p_i == p_j:
        return 1.0
    src = reference.source_index if reference.source_index is not None else np.arange(len(reference))
    seeds = [image_seed(drift_seed, s) for s in src]
    a = _softmax_rows(encode(probe, spec, apply_pipeline_batch(p_i, reference.images, seeds)))
    b = _softmax_rows(encode(probe, spec, apply_pipeline_batch(p_j, reference.images, seeds)))
    return float(np.clip(1.0 - jensen_shannon(a, b).mean(), 0.0, 1.0))


def concept_drift_similarity_matrix(clients: Sequence[ClientDataset], reference: ImageDataset,
                                    probe: ModelParameters, spec: NetworkSpec) -> SimilarityMatrix:
    ranked = sorted(clients, key=lambda c: c.client_id)
    pipelines = sorted({c.pipeline for c in ranked}, key=lambda p: p.name)
    drift_seed = ranked[0].drift_seed if ranked else 0
    pair = {}
    for a in pipelines:
        for b in pipelines:
            if (b, a) in pair:
                pair[(a, b)] = pair[(b, a)]
            else:
                pair[(a, b)] = concept_drift_similarity(a, b, reference, probe, spec, drift_seed)
    m = np.array([[pair[(x.pipeline, y.pipeline)] for y in ranked] for x in ranked])
    return SimilarityMatrix(tuple(c.client_id for c in ranked), m)


def embedding_similarity_matrix(embeddings: Sequence[ClientEmbedding]) -> SimilarityMatrix:
    ranked = sorted(embeddings, key=lambda e: e.client_id)
    if len({e.dim for e in ranked}) > 1:
        raise InputError("embeddings have mixed dimensions")
    return SimilarityMatrix(tuple(e.client_id for e in ranked), _cosine_matrix(np.stack([e.vector for e in ranked])))


def correlation(dataset_sims: SimilarityMatrix, embedding_sims: SimilarityMatrix) -> float:
    """Pearson correlation between the strict upper triangles of two similarity matrices."""
    if dataset_sims.client_ids != embedding_sims.client_ids:
        raise InputError("similarity matrices cover different clients")
    if len(dataset_sims.client_ids) < 3:
        raise InputError("correlation needs at least 3 clients")
    x, y = dataset_sims.upper(), embedding_sims.upper()
    x, y = x - x.mean(), y - y.mean()
    sx, sy = np.sqrt(x @ x), np.sqrt(y @ y)
    if sx == 0 or sy == 0:
        raise UndefinedCorrelationError("a similarity vector has zero variance")
    return float(np.clip(x @ y / (sx * sy), -1.0, 1.0))


def uniformity(assignment: Mapping[int, int], dvs: Mapping[int, np.ndarray]) -> float:
    """Mean over clusters of the mean pairwise cosine of members' distribution vectors.

    Clusters with a single member count as perfectly uniform (1.0).
    """
    clusters: dict[int, list[int]] = {}
    for cid, c in sorted(assignment.items()):
        if cid not in dvs:
            raise InputError(f"client {cid} has no distribution vector")
        clusters.setdefault(c, []).append(cid)
    if not clusters:
        raise InputError("empty assignment")
    scores = []
    for _, members in sorted(clusters.items()):
        if len(members) < 2:
            scores.append(1.0)
            continue
        m = _cosine_matrix(np.stack([dvs[c] for c in members]))
        scores.append(float(m[np.triu_indices(len(members), k=1)].mean()))
    return float(np.mean(scores))


def generate_similar_client(
    reference: ClientDataset,
    source_pool: ImageDataset,
    seed: int,
    noise: np.ndarray | None = None,
    scale: float | None = None,
    client_id: int = -1,
) -> ClientDataset:
    """Sample a fresh client whose class counts follow ``(d_ref + n) * s``.

    ``n_k = round(u_k * max(d_ref))`` with ``u_k ~ U(-0.1, 0.1)`` (clamped so counts stay
    non-negative) and ``s ~ U(0.5, 1.5)``. Images are drawn without replacement from
    ``source_pool`` and the reference's augmentation pipeline is kept.
    """
    d = client_distribution(reference)
    rng = np.random.default_rng(seed)
    if noise is None:
        noise = np.rint(rng.uniform(-0.1, 0.1, size=d.shape) * d.max())
    if scale is None:
        scale = rng.uniform(0.5, 1.5)
    target = np.maximum(d + np.asarray(noise), 0)
    counts = np.rint(target * scale).astype(np.int64)
    if counts.sum() == 0:
        raise SamplingError("generated client would be empty")
    idx = []
    for cls, c in enumerate(counts):
        if c == 0:
            continue
        available = np.flatnonzero(source_pool.labels == cls)
        if len(available) < c:
            raise SamplingError(f"pool has {len(available)} images of class {cls}, need {c}")
        idx.append(rng.choice(available, size=c, replace=False))
    data = source_pool.subset(np.sort(np.concatenate(idx)))
    # the generated client embeds and fine-tunes on everything it holds
    return ClientDataset(client_id, "training", data, data, reference.pipeline, reference.drift_seed)


def robustness(
    cluster_id: int,
    members: Sequence[ClientDataset],
    embed_fn: Callable[[ClientDataset], ClientEmbedding],
    kmeans: KMeansModel,
    source_pool: ImageDataset,
    n: int = 100,
    seed: int = 0,
) -> float:
    """Fraction of ``n`` generated look-alike clients that land back in ``cluster_id``."""
    if not members:
        raise InputError(f"cluster {cluster_id} has no members")
    if n < 1:
        raise InputError("need at least one iteration")
    ranked = sorted(members, key=lambda c: c.client_id)
    # draws are keyed by the cluster's smallest member id, not its index, so renaming
    # clusters leaves every generated client unchanged
    key = ranked[0].client_id
    hits = 0
    for i in range(n):
        rng = rng_for(seed, "robustness", key, i)
        ref = ranked[int(rng.integers(len(ranked)))]
        probe = generate_similar_client(ref, source_pool, derive_seed(seed, "generate", key, i))
        if kmeans.k == 1 or kmeans_predict(kmeans, embed_fn(probe)) == cluster_id:
            hits += 1
    return hits / n


def mean_and_se(values: Sequence[float]) -> tuple[float, float]:
    v = np.asarray(list(values), dtype=np.float64)
    if v.size == 0:
        raise InputError("no values")
    se = float(v.std(ddof=1) / np.sqrt(v.size)) if v.size > 1 else 0.0
    return float(v.mean()), se


def random_assignment_uniformity(dvs: Mapping[int, np.ndarray], k: int, trials: int, seed: int) -> float:
    """Expected uniformity when clients are assigned to ``k`` clusters uniformly at random."""
    ids = sorted(dvs)
    scores = []
    for t in range(trials):
        labels = rng_for(seed, "random-assignment", t).integers(k, size=len(ids))
        scores.append(uniformity(dict(zip(ids, labels.tolist())), dvs))
    return float(np.mean(scores))


def mean_pairwise_cosine(dvs: Mapping[int, np.ndarray]) -> float:
    ids = sorted(dvs)
    m = _cosine_matrix(np.stack([dvs[c] for c in ids]))
    return float(np.mean([m[i, j] for i, j in combinations(range(len(ids)), 2)]))
