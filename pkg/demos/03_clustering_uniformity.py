"""
Clustering clients and scoring the clusters
===========================================

K-Means over client embeddings, compared with clustering the true label
distributions and with a random assignment.
"""

# %%
from clusterfl import ClientEmbedding, NetworkSpec, TrainingConfig, init_params, kmeans_fit, load_digits_pool
from clusterfl import partition_pathological, repa_embed, train_rounds, uniformity
from clusterfl.data import client_distribution
from clusterfl.metrics import random_assignment_uniformity

pool = load_digits_pool()
clients = partition_pathological(pool, 50, seed=0)
spec = NetworkSpec((8, 8, 1), 32, 10, "SAE")
models, _ = train_rounds({0: init_params(spec, 0)}, clients, {c.client_id: 0 for c in clients},
                         TrainingConfig(lr=0.1, batch_size=16, seed=0), spec, 2, stage="warmup")

# %%
embeddings = [repa_embed(models[0], spec, c) for c in clients]
model, assignment = kmeans_fit(embeddings, 5, seed=0)
print("cluster sizes", [list(assignment.values()).count(k) for k in range(5)])

# %%
dvs = {c.client_id: client_distribution(c) for c in clients}
_, given = kmeans_fit([ClientEmbedding(i, "DIST", v) for i, v in dvs.items()], 5, seed=0)
print("uniformity  embeddings %.3f" % uniformity(assignment, dvs))
print("            distributions %.3f" % uniformity(given, dvs))
print("            random %.3f" % random_assignment_uniformity(dvs, 5, 100, seed=0))
