"""Image pools, augmentation pipelines and non-IID client populations."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .errors import ConfigurationError, FormatError, InputError
from .seeding import derive_seed

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 3073
TRAIN_FRACTION = 0.8


@dataclass(frozen=True, eq=False)
class ImageDataset:
    """``images`` is (N, H, W, C) float32 in [0, 1]; ``labels`` may be None for unlabeled views."""

    images: np.ndarray
    labels: np.ndarray | None
    class_count: int
    # row indices into the source pool, used for manifests and seeded noise
    source_index: np.ndarray | None = None

    def __post_init__(self):
        if self.images.ndim != 4:
            raise InputError(f"images must be (N, H, W, C), got shape {self.images.shape}")
        if self.labels is not None:
            if self.labels.shape != (len(self.images),):
                raise InputError("need exactly one label per image")
            if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
                raise InputError("label outside [0, class_count)")

    def __len__(self) -> int:
        return len(self.images)

    def subset(self, idx: np.ndarray) -> "ImageDataset":
        idx = np.asarray(idx, dtype=np.int64)
        src = self.source_index[idx] if self.source_index is not None else idx
        return ImageDataset(
            self.images[idx],
            None if self.labels is None else self.labels[idx],
            self.class_count,
            src,
        )

    def without_labels(self) -> "ImageDataset":
        return replace(self, labels=None)


# ---------------------------------------------------------------- ingestion


def _read_idx(path: Path, magic: int, ndim: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: truncated IDX header")
    found = int.from_bytes(raw[:4], "big")
    if found != magic:
        raise FormatError(f"{path}: bad magic 0x{found:08x}, expected 0x{magic:08x}")
    dims = [int.from_bytes(raw[4 + 4 * i : 8 + 4 * i], "big") for i in range(ndim)]
    count = math.prod(dims)
    if len(raw) - header != count:
        raise FormatError(f"{path}: expected {count} data bytes for dims {dims}, found {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def load_idx(images_path: str | Path, labels_path: str | Path, class_count: int = 10) -> ImageDataset:
    """Parse an IDX image/label file pair (the MNIST distribution format)."""
    pixels = _read_idx(Path(images_path), IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(Path(labels_path), IDX_LABELS_MAGIC, 1)
    if len(pixels) != len(labels):
        raise FormatError(f"{len(pixels)} images but {len(labels)} labels")
    if len(pixels) == 0:
        raise FormatError("IDX files contain no images")
    if labels.max() >= class_count:
        raise FormatError(f"label {labels.max()} outside [0, {class_count})")
    images = (pixels.astype(np.float32) / 255.0)[..., None]
    return ImageDataset(images, labels.astype(np.int64), class_count)


def write_idx(images_path: str | Path, labels_path: str | Path, dataset: ImageDataset) -> None:
    """Write a single-channel dataset as an IDX pair; pixels are quantized to bytes."""
    n, h, w, c = dataset.images.shape
    if c != 1:
        raise InputError("IDX export supports single-channel images only")
    pixels = np.rint(np.clip(dataset.images[..., 0], 0, 1) * 255).astype(np.uint8)
    head = IDX_IMAGES_MAGIC.to_bytes(4, "big") + b"".join(v.to_bytes(4, "big") for v in (n, h, w))
    Path(images_path).write_bytes(head + pixels.tobytes())
    head = IDX_LABELS_MAGIC.to_bytes(4, "big") + n.to_bytes(4, "big")
    Path(labels_path).write_bytes(head + dataset.labels.astype(np.uint8).tobytes())


def load_cifar_binary(paths: Sequence[str | Path]) -> ImageDataset:
    """Concatenate CIFAR-10 binary batch files (label byte + 3072 channel-major pixels)."""
    if isinstance(paths, (str, Path)):
        paths = [paths]
    records = []
    for path in paths:
        raw = Path(path).read_bytes()
        if len(raw) == 0 or len(raw) % CIFAR_RECORD:
            raise FormatError(f"{path}: length {len(raw)} is not a positive multiple of {CIFAR_RECORD}")
        records.append(np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD))
    if not records:
        raise FormatError("no CIFAR batch files given")
    data = np.concatenate(records)
    labels = data[:, 0].astype(np.int64)
    if labels.max() >= 10:
        raise FormatError(f"label byte {labels.max()} is not a CIFAR-10 class")
    images = data[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1).astype(np.float32) / 255.0
    return ImageDataset(np.ascontiguousarray(images), labels, 10)


def load_digits_pool(shift: int = 1, size: int = 8) -> ImageDataset:
    """Offline stand-in for MNIST: scikit-learn's 8x8 handwritten digits.

    Each of the 1797 digits is replicated at every translation in
    ``[-shift, shift]^2`` (zero fill), giving ``1797 * (2 shift + 1)^2`` images.
    ``size`` > 8 zero-pads the canvas symmetrically. The pool is returned in a fixed
    pseudo-random order so that label-sorted shards mix translations evenly.
    """
    from sklearn.datasets import load_digits

    bunch = load_digits()
    base = (bunch.images / 16.0).astype(np.float32)
    if size < 8 or (size - 8) % 2:
        raise ConfigurationError("size must be 8 + an even number")
    pad = (size - 8) // 2
    base = np.pad(base, ((0, 0), (pad, pad), (pad, pad)))
    images, labels = [], []
    for dy in range(-shift, shift + 1):
        for dx in range(-shift, shift + 1):
            moved = np.zeros_like(base)
            ys = slice(max(dy, 0), size + min(dy, 0))
            yd = slice(max(-dy, 0), size + min(-dy, 0))
            xs = slice(max(dx, 0), size + min(dx, 0))
            xd = slice(max(-dx, 0), size + min(-dx, 0))
            moved[:, ys, xs] = base[:, yd, xd]
            images.append(moved)
            labels.append(bunch.target)
    order = np.random.default_rng(0).permutation(len(base) * (2 * shift + 1) ** 2)
    images = np.concatenate(images)[order][..., None]
    return ImageDataset(np.ascontiguousarray(images), np.concatenate(labels)[order].astype(np.int64), 10)


# ---------------------------------------------------------------- augmentation

STEP_KINDS = ("rotate", "gaussian_blur", "gaussian_noise", "invert", "contrast", "brightness", "identity")


@dataclass(frozen=True)
class AugmentationPipeline:
    steps: tuple[tuple[str, float], ...] = ()
    name: str = ""

    def __post_init__(self):
        steps = tuple((str(k), float(v)) for k, v in self.steps)
        for kind, _ in steps:
            if kind not in STEP_KINDS:
                raise ConfigurationError(f"unknown augmentation step {kind!r}")
        object.__setattr__(self, "steps", steps)
        if not self.name:
            label = "+".join(f"{k}({v:g})" for k, v in steps if k != "identity") or "identity"
            object.__setattr__(self, "name", label)

    @property
    def is_identity(self) -> bool:
        return all(kind == "identity" for kind, _ in self.steps)

    def to_dict(self) -> dict:
        return {"name": self.name, "steps": [[k, v] for k, v in self.steps]}

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentationPipeline":
        return cls(tuple((k, v) for k, v in d["steps"]), d["name"])


IDENTITY = AugmentationPipeline((("identity", 0.0),))


def default_catalog() -> list[AugmentationPipeline]:
    return [
        IDENTITY,
        AugmentationPipeline((("rotate", 15.0),)),
        AugmentationPipeline((("rotate", -15.0),)),
        AugmentationPipeline((("gaussian_blur", 0.5),)),
        AugmentationPipeline((("gaussian_blur", 1.0),)),
        AugmentationPipeline((("gaussian_noise", 0.05),)),
        AugmentationPipeline((("gaussian_noise", 0.1),)),
        AugmentationPipeline((("invert", 0.0),)),
        AugmentationPipeline((("contrast", 1.5),)),
        AugmentationPipeline((("brightness", 0.2),)),
    ]


def _apply_step(kind: str, value: float, x: np.ndarray, rng: np.random.Generator | None) -> np.ndarray:
    # x is a single (H, W, C) image
    if kind == "identity":
        return x
    if kind == "rotate":
        out = ndimage.rotate(x, value, axes=(0, 1), reshape=False, order=1, mode="constant", cval=0.0)
    elif kind == "gaussian_blur":
        out = ndimage.gaussian_filter(x, sigma=(value, value, 0), mode="nearest")
    elif kind == "gaussian_noise":
        out = x + rng.normal(0.0, value, size=x.shape)
    elif kind == "invert":
        out = 1.0 - x
    elif kind == "contrast":
        out = (x - 0.5) * value + 0.5
    elif kind == "brightness":
        out = x + value
    else:
        raise ConfigurationError(f"unknown augmentation step {kind!r}")
    return np.clip(out, 0.0, 1.0).astype(x.dtype, copy=False)


def apply_pipeline(pipeline: AugmentationPipeline, image: np.ndarray, seed: int) -> np.ndarray:
    """Apply ``pipeline`` to one (H, W, C) image; noise steps draw from ``seed``."""
    image = np.asarray(image)
    if image.ndim != 3:
        raise InputError("apply_pipeline expects a single (H, W, C) image")
    for kind, _ in pipeline.steps:
        if kind not in STEP_KINDS:
            raise ConfigurationError(f"unknown augmentation step {kind!r}")
    if pipeline.is_identity:
        return image
    rng = np.random.default_rng(seed)
    out = image
    for kind, value in pipeline.steps:
        out = _apply_step(kind, value, out, rng)
    return out


def apply_pipeline_batch(pipeline: AugmentationPipeline, images: np.ndarray, seeds: Sequence[int]) -> np.ndarray:
    if pipeline.is_identity:
        return images
    return np.stack([apply_pipeline(pipeline, img, s) for img, s in zip(images, seeds)])


def image_seed(drift_seed: int, source_index: int) -> int:
    """Noise seed for one pool image; identical across clients sharing the image."""
    return derive_seed(drift_seed, "image", int(source_index))


# ---------------------------------------------------------------- clients


class ClientDataset:
    """One client: raw splits plus a lazily applied augmentation pipeline.

    ``train`` / ``validation`` return the augmented views the client exposes.
    Holdout clients have no training split and do not expose labels for training.
    """

    def __init__(
        self,
        client_id: int,
        role: str,
        train: ImageDataset | None,
        validation: ImageDataset,
        pipeline: AugmentationPipeline = IDENTITY,
        drift_seed: int = 0,
        labels_visible: bool | None = None,
    ):
        if role not in ("training", "holdout"):
            raise ConfigurationError(f"role must be 'training' or 'holdout', got {role!r}")
        if role == "training" and train is None:
            raise ConfigurationError("training clients need a train split")
        if role == "holdout" and train is not None:
            raise ConfigurationError("holdout clients must not have a train split")
        if labels_visible is None:
            labels_visible = role == "training"
        if role == "training" and not labels_visible:
            raise ConfigurationError("training clients must expose labels")
        self.client_id = int(client_id)
        self.role = role
        self.raw_train = train
        self.raw_validation = validation
        self.pipeline = pipeline
        self.drift_seed = int(drift_seed)
        self.labels_visible = labels_visible

    def __repr__(self) -> str:
        n_train = 0 if self.raw_train is None else len(self.raw_train)
        return (f"ClientDataset(id={self.client_id}, role={self.role}, train={n_train}, "
                f"validation={len(self.raw_validation)}, pipeline={self.pipeline.name})")

    def _view(self, raw: ImageDataset) -> ImageDataset:
        seeds = [image_seed(self.drift_seed, s) for s in raw.source_index]
        images = apply_pipeline_batch(self.pipeline, raw.images, seeds)
        return replace(raw, images=images)

    @cached_property
    def train(self) -> ImageDataset | None:
        return None if self.raw_train is None else self._view(self.raw_train)

    @cached_property
    def validation(self) -> ImageDataset:
        return self._view(self.raw_validation)

    @property
    def embedding_split(self) -> ImageDataset:
        """Training clients embed their train split, holdout clients their validation split."""
        return self.train if self.role == "training" else self.validation

    @property
    def train_size(self) -> int:
        return 0 if self.raw_train is None else len(self.raw_train)

    def with_pipeline(self, pipeline: AugmentationPipeline, drift_seed: int) -> "ClientDataset":
        return ClientDataset(self.client_id, self.role, self.raw_train, self.raw_validation,
                             pipeline, drift_seed, self.labels_visible)

    def without_labels(self) -> "ClientDataset":
        strip = lambda d: None if d is None else d.without_labels()  # noqa: E731
        out = ClientDataset(self.client_id, self.role, strip(self.raw_train), strip(self.raw_validation),
                            self.pipeline, self.drift_seed, self.labels_visible)
        return out

    def manifest_entry(self) -> dict:
        return {
            "client_id": self.client_id,
            "role": self.role,
            "train_index": [] if self.raw_train is None else self.raw_train.source_index.tolist(),
            "validation_index": self.raw_validation.source_index.tolist(),
            "pipeline": self.pipeline.to_dict(),
            "drift_seed": self.drift_seed,
            "labels_visible": self.labels_visible,
        }

    @classmethod
    def from_manifest_entry(cls, entry: dict, pool: ImageDataset) -> "ClientDataset":
        train = pool.subset(entry["train_index"]) if entry["role"] == "training" else None
        return cls(entry["client_id"], entry["role"], train, pool.subset(entry["validation_index"]),
                   AugmentationPipeline.from_dict(entry["pipeline"]), entry["drift_seed"],
                   entry["labels_visible"])


def distribution_vector(dataset: ImageDataset) -> np.ndarray:
    if dataset.labels is None:
        raise InputError("distribution_vector needs labels")
    return np.bincount(dataset.labels, minlength=dataset.class_count).astype(np.int64)


def client_distribution(client: ClientDataset) -> np.ndarray:
    """Class counts of the split the client embeds (train for training clients)."""
    split = client.raw_train if client.role == "training" else client.raw_validation
    return distribution_vector(split)


def _stratified_split(labels: np.ndarray, idx: np.ndarray, rng: np.random.Generator):
    train, val = [], []
    for cls in np.unique(labels[idx]):
        members = idx[labels[idx] == cls]
        members = members[rng.permutation(len(members))]
        n_val = int(round((1 - TRAIN_FRACTION) * len(members)))
        val.append(members[:n_val])
        train.append(members[n_val:])
    train, val = np.concatenate(train), np.concatenate(val)
    if len(val) == 0 and len(train) > 1:
        val, train = train[-1:], train[:-1]
    if len(train) == 0 and len(val) > 1:
        train, val = val[-1:], val[:-1]
    return np.sort(train), np.sort(val)


def _build_clients(src: ImageDataset, groups: list[np.ndarray], holdout_fraction: float,
                   rng: np.random.Generator) -> list[ClientDataset]:
    if not 0 <= holdout_fraction < 1:
        raise ConfigurationError("holdout_fraction must be in [0, 1)")
    n = len(groups)
    n_holdout = math.ceil(holdout_fraction * n - 1e-9)
    if n_holdout >= n and n > 0:
        raise ConfigurationError("holdout_fraction leaves no training clients")
    order = rng.permutation(n)
    holdout = set(order[n - n_holdout :].tolist()) if n_holdout else set()
    clients = []
    for cid, idx in enumerate(groups):
        idx = np.sort(np.asarray(idx, dtype=np.int64))
        if cid in holdout:
            clients.append(ClientDataset(cid, "holdout", None, src.subset(idx)))
            continue
        if len(idx) < 2:
            raise ConfigurationError(f"client {cid} has fewer than 2 images; cannot split train/validation")
        train, val = _stratified_split(src.labels, idx, rng)
        clients.append(ClientDataset(cid, "training", src.subset(train), src.subset(val)))
    return clients


def partition_pathological(
    src: ImageDataset,
    n_clients: int,
    classes_per_client: int = 2,
    shards_per_client: int = 2,
    holdout_fraction: float = 0.0,
    seed: int = 0,
) -> list[ClientDataset]:
    """Sort by label, cut class-pure shards, deal ``shards_per_client`` to each client.

    Shards never straddle a class boundary: the ``n_clients * shards_per_client``
    shards are apportioned to classes by size (largest remainder) and each class is
    cut into its share of near-equal pieces. Each client therefore sees at most
    ``shards_per_client`` classes.
    """
    if n_clients < 1 or shards_per_client < 1:
        raise ConfigurationError("n_clients and shards_per_client must be >= 1")
    if classes_per_client < shards_per_client:
        raise ConfigurationError("classes_per_client must be >= shards_per_client for class-pure dealing")
    n_shards = n_clients * shards_per_client
    order = np.argsort(src.labels, kind="stable")
    counts = np.bincount(src.labels, minlength=src.class_count)
    present = np.flatnonzero(counts)
    if n_shards < len(present):
        raise ConfigurationError(f"{n_shards} shards cannot cover {len(present)} classes")
    if len(src) < n_shards:
        raise ConfigurationError(f"{len(src)} images cannot fill {n_shards} shards")
    quota = counts[present] * n_shards / counts.sum()
    alloc = np.maximum(np.floor(quota).astype(int), 1)
    while alloc.sum() > n_shards:
        alloc[np.argmax(alloc - quota)] -= 1
    remainder = quota - alloc
    for j in np.argsort(-remainder, kind="stable")[: n_shards - alloc.sum()]:
        alloc[j] += 1
    if np.any(alloc > counts[present]):
        raise ConfigurationError("a class has fewer images than shards assigned to it")
    shards = []
    bounds = np.concatenate([[0], np.cumsum(counts)])
    for cls, k in zip(present, alloc):
        members = order[bounds[cls] : bounds[cls + 1]]
        shards.extend(np.array_split(members, k))
    rng = np.random.default_rng(seed)
    deal = rng.permutation(n_shards)
    groups = [np.concatenate([shards[s] for s in deal[i * shards_per_client : (i + 1) * shards_per_client]])
              for i in range(n_clients)]
    return _build_clients(src, groups, holdout_fraction, rng)


def partition_label_skew(
    src: ImageDataset,
    n_clients: int,
    major_classes_per_client: int,
    major_mass: float,
    samples_per_client: int,
    holdout_fraction: float = 0.0,
    seed: int = 0,
) -> list[ClientDataset]:
    """Each client over-represents ``major_classes_per_client`` random classes.

    Class labels are drawn multinomially with ``major_mass`` spread evenly over the
    major classes and the rest over the others; images are then taken from the pool
    without replacement (across all clients, so the clients stay disjoint).
    """
    k = src.class_count
    if not 1 <= major_classes_per_client <= k:
        raise ConfigurationError("major_classes_per_client must be in [1, class_count]")
    if not 0 < major_mass < 1 and not (major_mass == 1 and major_classes_per_client == k):
        raise ConfigurationError("major_mass must be in (0, 1)")
    if samples_per_client < 2 or n_clients < 1:
        raise ConfigurationError("need n_clients >= 1 and samples_per_client >= 2")
    rng = np.random.default_rng(seed)
    pools = []
    for cls in range(k):
        members = np.flatnonzero(src.labels == cls)
        pools.append(list(members[rng.permutation(len(members))]))
    cursor = [0] * k
    groups = []
    for _ in range(n_clients):
        major = rng.choice(k, size=major_classes_per_client, replace=False)
        probs = np.full(k, (1 - major_mass) / (k - major_classes_per_client) if k > major_classes_per_client else 0.0)
        probs[major] = major_mass / major_classes_per_client
        probs /= probs.sum()
        counts = rng.multinomial(samples_per_client, probs)
        idx = []
        for cls, c in enumerate(counts):
            if cursor[cls] + c > len(pools[cls]):
                raise ConfigurationError(
                    f"class {cls} exhausted: samples_per_client={samples_per_client} exceeds availability")
            idx.extend(pools[cls][cursor[cls] : cursor[cls] + c])
            cursor[cls] += c
        groups.append(np.asarray(idx, dtype=np.int64))
    return _build_clients(src, groups, holdout_fraction, rng)


def assign_concept_drift(clients: list[ClientDataset], catalog: list[AugmentationPipeline],
                         seed: int) -> list[ClientDataset]:
    """Round-robin over a seeded shuffle of ``catalog`` in client-id order."""
    if not catalog:
        raise ConfigurationError("augmentation catalog is empty")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(catalog))
    ranked = sorted(clients, key=lambda c: c.client_id)
    drift_seed = derive_seed(seed, "pipeline-noise")
    return [c.with_pipeline(catalog[order[i % len(catalog)]], drift_seed) for i, c in enumerate(ranked)]


def partition_manifest(clients: list[ClientDataset], **provenance) -> dict:
    return {"clients": [c.manifest_entry() for c in sorted(clients, key=lambda c: c.client_id)],
            "provenance": provenance}


def clients_from_manifest(manifest: dict, pool: ImageDataset) -> list[ClientDataset]:
    return [ClientDataset.from_manifest_entry(e, pool) for e in manifest["clients"]]
