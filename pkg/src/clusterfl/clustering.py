"""Seeded K-Means (k-means++ with restarts) on standardized client embeddings."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .embedding import ClientEmbedding
from .errors import ConfigurationError, InputError
from .persist import load_array, save_array
from .seeding import rng_for

ClusterAssignment = dict[int, int]


@dataclass(frozen=True, eq=False)
class KMeansModel:
    centroids: np.ndarray  # (k, d) float32, standardized coordinates
    shift: np.ndarray  # (d,) float64
    scale: np.ndarray  # (d,) float64, all > 0
    inertia: float

    @property
    def k(self) -> int:
        return len(self.centroids)

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]

    def standardize(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.shift) / self.scale

    def permuted(self, order) -> "KMeansModel":
        """Same model with cluster ``j`` renamed to ``order.index(j)``."""
        return KMeansModel(self.centroids[np.asarray(order)], self.shift, self.scale, self.inertia)


def _sq_dists(z: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    diff = z[:, None, :] - np.asarray(centroids, dtype=np.float64)[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def kmeans_plus_plus(z: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(z)
    chosen = [int(rng.integers(n))]
    closest = _sq_dists(z, z[chosen])[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0:
            # all remaining points coincide with a center
            free = [i for i in range(n) if i not in chosen]
            nxt = free[int(rng.integers(len(free)))]
        else:
            nxt = int(rng.choice(n, p=closest / total))
        chosen.append(nxt)
        closest = np.minimum(closest, _sq_dists(z, z[[nxt]])[:, 0])
    return z[chosen].copy()


def lloyd(z: np.ndarray, centroids: np.ndarray, max_iter: int = 300, tol: float = 1e-6):
    """Lloyd iterations from ``centroids``; returns ``(centroids, labels, inertia_history)``.

    ``inertia_history[t]`` is the inertia right after the t-th assignment step.
    Empty clusters are reseeded at the point farthest from its own centroid.
    """
    centroids = centroids.astype(np.float64).copy()
    k = len(centroids)
    history = []
    for _ in range(max_iter):
        d = _sq_dists(z, centroids)
        labels = d.argmin(axis=1)
        for j in range(k):
            if not np.any(labels == j):
                own = d[np.arange(len(z)), labels]
                far = int(np.argmax(own))
                centroids[j] = z[far]
                d[:, j] = _sq_dists(z, centroids[[j]])[:, 0]
                labels = d.argmin(axis=1)
        history.append(float(d[np.arange(len(z)), labels].sum()))
        new = np.stack([z[labels == j].mean(axis=0) if np.any(labels == j) else centroids[j] for j in range(k)])
        shift = float(np.max(np.abs(new - centroids))) if len(new) else 0.0
        centroids = new
        if shift <= tol:
            break
    d = _sq_dists(z, centroids)
    labels = d.argmin(axis=1)
    history.append(float(d[np.arange(len(z)), labels].sum()))
    return centroids, labels, history


def _stack(embeddings: list[ClientEmbedding]) -> np.ndarray:
    dims = {e.dim for e in embeddings}
    if len(dims) != 1:
        raise InputError(f"embeddings have mixed dimensions {sorted(dims)}")
    return np.stack([e.vector for e in embeddings]).astype(np.float64)


def kmeans_fit(
    embeddings: list[ClientEmbedding],
    k: int,
    restarts: int = 10,
    max_iter: int = 300,
    tol: float = 1e-6,
    seed: int = 0,
) -> tuple[KMeansModel, ClusterAssignment]:
    if k < 1:
        raise ConfigurationError("k must be >= 1")
    if len(embeddings) < k:
        raise ConfigurationError(f"cannot fit k={k} clusters on {len(embeddings)} embeddings")
    if restarts < 1 or max_iter < 1:
        raise ConfigurationError("restarts and max_iter must be >= 1")
    x = _stack(embeddings)
    shift = x.mean(axis=0)
    scale = x.std(axis=0)
    scale[~(scale > 1e-12)] = 1.0
    z = (x - shift) / scale
    best = None
    for r in range(restarts):
        rng = rng_for(seed, "kmeans-restart", r)
        centroids, _, history = lloyd(z, kmeans_plus_plus(z, k, rng), max_iter, tol)
        # strict < keeps the lowest restart index on ties
        if best is None or history[-1] < best[0]:
            best = (history[-1], centroids)
    # persisted centroids are float32; assign with exactly those values
    centroids = best[1].astype(np.float32)
    d = _sq_dists(z, centroids)
    labels = d.argmin(axis=1)
    inertia = float(d[np.arange(len(z)), labels].sum())
    model = KMeansModel(centroids, shift, scale, inertia)
    return model, {e.client_id: int(c) for e, c in zip(embeddings, labels)}


def kmeans_predict(model: KMeansModel, embedding: ClientEmbedding | np.ndarray) -> int:
    vec = embedding.vector if isinstance(embedding, ClientEmbedding) else np.asarray(embedding).ravel()
    if vec.size != model.dim:
        raise InputError(f"embedding dim {vec.size} does not match model dim {model.dim}")
    d = _sq_dists(model.standardize(vec)[None, :], model.centroids)[0]
    return int(np.argmin(d))


def save_kmeans(path: str | Path, model: KMeansModel, assignment: ClusterAssignment, **meta) -> Path:
    info = {"kind": "kmeans", "k": model.k, "shift": model.shift.tolist(), "scale": model.scale.tolist(),
            "inertia": model.inertia, "assignment": {str(c): a for c, a in sorted(assignment.items())}, **meta}
    return save_array(path, model.centroids, info)


def load_kmeans(path: str | Path) -> tuple[KMeansModel, ClusterAssignment, dict]:
    centroids, meta = load_array(path)
    model = KMeansModel(centroids, np.asarray(meta["shift"], dtype=np.float64),
                        np.asarray(meta["scale"], dtype=np.float64), float(meta["inertia"]))
    assignment = {int(c): int(a) for c, a in meta["assignment"].items()}
    return model, assignment, meta
