"""Clustered federated learning with training-free client embeddings (REPA).

Clients are summarized by per-dimension statistics of a shared encoder's outputs on
their unlabeled data, grouped with K-Means, and each group trains its own model with
FedAvg/FedProx.
"""

from .clustering import KMeansModel, kmeans_fit, kmeans_predict, load_kmeans, save_kmeans
from .config import ExperimentConfig, load_config, parse_config, save_config
from .data import (
    AugmentationPipeline,
    ClientDataset,
    ImageDataset,
    assign_concept_drift,
    default_catalog,
    load_cifar_binary,
    load_digits_pool,
    load_idx,
    partition_label_skew,
    partition_pathological,
)
from .embedding import ClientEmbedding, StatisticsConfig, repa_embed, wd_embed
from .engine import TrainingConfig, evaluate, fedavg_aggregate, run_round, sample_participants, train_rounds
from .errors import (
    CapabilityError,
    ClusterFLError,
    ConfigurationError,
    FormatError,
    InputError,
    InternalError,
    SamplingError,
    UndefinedCorrelationError,
)
from .metrics import (
    concept_drift_similarity,
    correlation,
    generate_similar_client,
    label_skew_similarity,
    robustness,
    uniformity,
)
from .nn import ModelParameters, NetworkSpec, backward, encode, forward, init_params, train_local
from .pipeline import run_experiment, run_pipeline
from .seeding import derive_seed

__version__ = "0.1.0"

__all__ = [
    "AugmentationPipeline",
    "CapabilityError",
    "ClientDataset",
    "ClientEmbedding",
    "ClusterFLError",
    "ConfigurationError",
    "ExperimentConfig",
    "FormatError",
    "ImageDataset",
    "InputError",
    "InternalError",
    "KMeansModel",
    "ModelParameters",
    "NetworkSpec",
    "SamplingError",
    "StatisticsConfig",
    "TrainingConfig",
    "UndefinedCorrelationError",
    "assign_concept_drift",
    "backward",
    "concept_drift_similarity",
    "correlation",
    "default_catalog",
    "derive_seed",
    "encode",
    "evaluate",
    "fedavg_aggregate",
    "forward",
    "generate_similar_client",
    "init_params",
    "kmeans_fit",
    "kmeans_predict",
    "label_skew_similarity",
    "load_cifar_binary",
    "load_config",
    "load_digits_pool",
    "load_idx",
    "load_kmeans",
    "parse_config",
    "partition_label_skew",
    "partition_pathological",
    "repa_embed",
    "robustness",
    "run_experiment",
    "run_pipeline",
    "run_round",
    "sample_participants",
    "save_config",
    "save_kmeans",
    "train_local",
    "train_rounds",
    "uniformity",
    "wd_embed",
]
