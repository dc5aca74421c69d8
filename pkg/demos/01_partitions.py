"""
Building non-IID client populations
===================================

Three ways to split an image pool across clients: class-pure shards, a
label-skewed mix and concept drift from per-client augmentation pipelines.
"""

# %%
import numpy as np

from clusterfl import assign_concept_drift, default_catalog, load_digits_pool, partition_label_skew, partition_pathological
from clusterfl.data import client_distribution

pool = load_digits_pool(shift=1)
print(len(pool), "images of shape", pool.images.shape[1:], "with", pool.class_count, "classes")

# %%
# Shards: every client holds two class-pure shards, so at most two labels.
clients = partition_pathological(pool, 20, holdout_fraction=0.2, seed=0)
for c in clients[:4]:
    print(c.client_id, c.role, np.flatnonzero(client_distribution(c)).tolist())
print(sum(c.role == "holdout" for c in clients), "holdout clients")

# %%
# Label skew: 90% of each client's samples come from two major classes.
skewed = partition_label_skew(pool, 10, 2, 0.9, 150, seed=1)
counts = client_distribution(skewed[0])
print(counts, np.round(counts / counts.sum(), 2))

# %%
# Concept drift: same label mix, different input transformation per client.
drifted = assign_concept_drift(skewed, default_catalog(), seed=2)
for c in drifted[:4]:
    print(c.client_id, c.pipeline)
