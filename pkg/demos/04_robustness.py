"""
Robustness of a clustering
==========================

Generate fresh clients that resemble an existing member of a cluster and check
how often the fitted K-Means model puts them back in the same cluster.
"""

# %%
from clusterfl import NetworkSpec, TrainingConfig, init_params, kmeans_fit, load_digits_pool, partition_label_skew
from clusterfl import repa_embed, robustness, train_rounds
from clusterfl.data import client_distribution
from clusterfl.metrics import generate_similar_client

pool = load_digits_pool()
clients = partition_label_skew(pool, 30, 2, 0.9, 150, seed=0)
spec = NetworkSpec((8, 8, 1), 32, 10, "SAE")
models, _ = train_rounds({0: init_params(spec, 0)}, clients, {c.client_id: 0 for c in clients},
                         TrainingConfig(lr=0.1, batch_size=16, seed=0), spec, 3, stage="warmup")
encoder = models[0]

# %%
twin = generate_similar_client(clients[0], pool, seed=1)
print("reference", client_distribution(clients[0]).round(2))
print("generated", client_distribution(twin).round(2))

# %%
embed = lambda c: repa_embed(encoder, spec, c)  # noqa: E731
model, assignment = kmeans_fit([embed(c) for c in clients], 5, seed=0)
for k in range(5):
    members = [c for c in clients if assignment[c.client_id] == k]
    if members:
        print(k, len(members), robustness(k, members, embed, model, pool, n=20, seed=0))
