"""
Label-free client embeddings
============================

An encoder warmed up with a few FedAvg rounds maps each client's images to
points; summary statistics of those points form the client embedding. Clients
with similar label mixes end up with similar embeddings.
"""

# %%
import numpy as np

from clusterfl import NetworkSpec, StatisticsConfig, TrainingConfig, init_params, load_digits_pool, partition_label_skew
from clusterfl import repa_embed, train_rounds
from clusterfl.data import client_distribution
from clusterfl.metrics import correlation, embedding_similarity_matrix, label_skew_similarity_matrix

pool = load_digits_pool()
clients = partition_label_skew(pool, 40, 2, 0.9, 100, seed=0)
spec = NetworkSpec((8, 8, 1), 32, 10, "SAE")

# %%
params = init_params(spec, 0)
everyone = {c.client_id: 0 for c in clients}
models, history = train_rounds({0: params}, clients, everyone, TrainingConfig(lr=0.1, batch_size=16, seed=0),
                               spec, 3, stage="warmup")
encoder = models[0]
print("warm-up accuracy", [round(r.overall_val_accuracy, 3) for r in history])

# %%
stats = StatisticsConfig(include_mean=True, include_std=False, quantiles=(0.25, 0.5, 0.75))
embeddings = [repa_embed(encoder, spec, c, stats) for c in clients]
print("embedding dim", embeddings[0].dim)

# labels are never read; dropping them gives the same vector
assert repa_embed(encoder, spec, clients[0].without_labels(), stats).vector.tobytes() == embeddings[0].vector.tobytes()

# %%
truth = label_skew_similarity_matrix({c.client_id: client_distribution(c) for c in clients})
print("Pearson r vs label-mix similarity:", round(correlation(truth, embedding_similarity_matrix(embeddings)), 3))
