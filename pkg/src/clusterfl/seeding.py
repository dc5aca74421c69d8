"""Named-stage seed derivation.

Every random stream in a run is keyed by ``(master seed, stage, *index)`` so that
adding a new stage never shifts the randomness consumed by another one.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(master: int, stage: str, *index: int | str) -> int:
    key = "/".join([str(int(master)), stage, *map(str, index)])
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def rng_for(master: int, stage: str, *index: int | str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, stage, *index))
