"""Synthetic identity-cluster datasets.

Each identity is a Gaussian cluster around a random center; each sample
adds a per-camera offset and isotropic noise, both scaled by ``noise``
(so ``noise=0`` collapses every sample onto its identity center
exactly).  Samples are split deterministically into train / query /
gallery roles, with cameras assigned round-robin so every identity is
seen from several cameras and the cross-camera evaluation protocol
always has true matches to find.

Generation is deterministic per seed, down to the byte level once
written out.
"""

from __future__ import annotations

import math

import numpy as np

from .io import EmbeddingSet, Role

__all__ = ["make_synthetic_dataset"]


def make_synthetic_dataset(ids: int, per_id: int, dim: int, noise: float,
                           cameras: int = 4, seed: int = 0,
                           train_frac: float = 0.5, query_frac: float = 0.25,
                           spread: float = 1.0) -> EmbeddingSet:
    """Build an identity-clustered vector dataset with role splits."""
    if ids < 1 or per_id < 1 or dim < 1 or cameras < 1:
        raise ValueError("ids, per_id, dim and cameras must be positive")
    if noise < 0:
        raise ValueError("noise must be non-negative")
    if not (0 <= train_frac <= 1 and 0 <= query_frac <= 1
            and train_frac + query_frac <= 1):
        raise ValueError("role fractions must be non-negative and sum to at most 1")

    rng = np.random.default_rng(seed)
    centers = rng.normal(0.0, spread, size=(ids, dim))
    camera_shift = rng.normal(0.0, 1.0, size=(cameras, dim))

    n_train = math.floor(train_frac * per_id)
    n_query = math.floor(query_frac * per_id)

    vectors = np.empty((ids * per_id, dim), dtype=np.float32)
    person_ids = np.empty(ids * per_id, dtype=np.int64)
    camera_ids = np.empty_like(person_ids)
    roles = np.empty_like(person_ids)
    row = 0
    for pid in range(ids):
        jitter = rng.normal(0.0, 1.0, size=(per_id, dim))
        for k in range(per_id):
            cam = k % cameras
            vec = centers[pid] + noise * (camera_shift[cam] + jitter[k])
            if k < n_train:
                role = Role.TRAIN
            elif k < n_train + n_query:
                role = Role.QUERY
            else:
                role = Role.GALLERY
            vectors[row] = vec.astype(np.float32)
            person_ids[row] = pid
            camera_ids[row] = cam
            roles[row] = int(role)
            row += 1
    return EmbeddingSet(vectors, person_ids, camera_ids, roles)
