"""PK batch sampling with an optional hard-sample pool.

A PK batch holds P identities with K instances each.  Identities are
drawn without replacement; instances are drawn without replacement when
an identity has at least K instances and with replacement otherwise.

The hard pool remembers, per identity, the dataset indices whose hinge
was positive in recent batches (capacity-bounded, highest hinge kept).
``pk_sample_hard`` then fills ``ceil(mix_ratio * K)`` of each identity's
slots from the pool when entries are available and draws the remainder
uniformly.  With an empty pool or ``mix_ratio == 0`` it consumes the
random stream exactly like ``pk_sample``, so the two produce identical
batches for the same seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = ["PkBatch", "HardPool", "pk_sample", "pk_sample_hard", "update_hard_pool"]


@dataclass
class PkBatch:
    """A sampled batch: features plus identity/camera labels.

    ``dataset_indices`` point back into the source dataset so that pool
    bookkeeping can reference concrete records.
    """

    features: np.ndarray
    person_ids: np.ndarray
    camera_ids: np.ndarray
    dataset_indices: np.ndarray
    ids_per_batch: int
    instances_per_id: int

    def __post_init__(self) -> None:
        n = self.ids_per_batch * self.instances_per_id
        if not (len(self.features) == len(self.person_ids)
                == len(self.camera_ids) == len(self.dataset_indices) == n):
            raise ValueError("batch arrays do not match P*K")
        uniq, counts = np.unique(self.person_ids, return_counts=True)
        if uniq.size != self.ids_per_batch or np.any(counts != self.instances_per_id):
            raise ValueError("batch must hold exactly P ids with K instances each")

    def __len__(self) -> int:
        return len(self.features)


class HardPool:
    """Bounded per-identity store of hard sample indices.

    Entries are ``(dataset_index, hinge)``; each identity keeps at most
    ``capacity_per_id`` entries, evicting the lowest hinge first.  Ties
    evict the higher dataset index, keeping eviction deterministic.
    """

    def __init__(self, capacity_per_id: int):
        if capacity_per_id < 1:
            raise ValueError("pool capacity must be at least 1")
        self.capacity_per_id = capacity_per_id
        self._entries: dict[int, list[tuple[int, float]]] = {}

    def insert(self, pid: int, index: int, hinge: float) -> None:
        bucket = dict(self._entries.get(int(pid), []))
        prev = bucket.get(int(index))
        if prev is None or hinge > prev:
            bucket[int(index)] = float(hinge)
        ranked = sorted(bucket.items(), key=lambda kv: (-kv[1], kv[0]))
        self._entries[int(pid)] = ranked[: self.capacity_per_id]

    def indices_for(self, pid: int) -> list[int]:
        return [idx for idx, _ in self._entries.get(int(pid), [])]

    def size(self, pid: int | None = None) -> int:
        if pid is not None:
            return len(self._entries.get(int(pid), []))
        return sum(len(v) for v in self._entries.values())

    @property
    def is_empty(self) -> bool:
        return self.size() == 0


def _as_generator(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def _instances_by_id(person_ids: np.ndarray) -> dict[int, np.ndarray]:
    order = {}
    for pid in np.unique(person_ids):
        order[int(pid)] = np.nonzero(person_ids == pid)[0]
    return order


def pk_sample(dataset, ids_per_batch: int, instances_per_id: int, rng) -> PkBatch:
    """Draw a plain PK batch (no hard mining).

    ``dataset`` is any record set exposing ``vectors``, ``person_ids``
    and ``camera_ids`` arrays.  Deterministic for a given seed.
    """
    return pk_sample_hard(dataset, None, ids_per_batch, instances_per_id,
                          mix_ratio=0.0, rng=rng)


def pk_sample_hard(dataset, pool: HardPool | None, ids_per_batch: int,
                   instances_per_id: int, mix_ratio: float, rng) -> PkBatch:
    """Draw a PK batch, preferring pooled hard samples per identity.

    For each chosen identity, ``ceil(mix_ratio * K)`` slots come from the
    pool (fewer if the pool holds fewer entries, without replacement) and
    the rest are uniform draws over all of that identity's instances.
    No randomness is consumed for the pool when it has nothing to offer,
    which makes the empty-pool case bit-identical to ``pk_sample``.
    """
    if not 0.0 <= mix_ratio <= 1.0:
        raise ValueError("mix_ratio must lie in [0, 1]")
    if ids_per_batch < 1 or instances_per_id < 1:
        raise ValueError("P and K must be positive")
    gen = _as_generator(rng)
    person_ids = np.asarray(dataset.person_ids)
    by_id = _instances_by_id(person_ids)
    if len(by_id) < ids_per_batch:
        raise ValueError(
            f"dataset has {len(by_id)} identities, need at least {ids_per_batch}")

    all_ids = np.array(sorted(by_id.keys()))
    chosen = gen.choice(all_ids, size=ids_per_batch, replace=False)

    want_pool = math.ceil(mix_ratio * instances_per_id)
    picks: list[np.ndarray] = []
    for pid in chosen:
        instances = by_id[int(pid)]
        taken: list[np.ndarray] = []
        pooled = pool.indices_for(int(pid)) if pool is not None else []
        take = min(want_pool, len(pooled), instances_per_id)
        if take:
            taken.append(gen.choice(np.array(pooled), size=take, replace=False))
        rest = instances_per_id - take
        if rest:
            replace = len(instances) < rest
            taken.append(gen.choice(instances, size=rest, replace=replace))
        picks.append(np.concatenate(taken))

    index = np.concatenate(picks).astype(np.int64)
    return PkBatch(
        features=np.asarray(dataset.vectors, dtype=np.float32)[index],
        person_ids=person_ids[index],
        camera_ids=np.asarray(dataset.camera_ids)[index],
        dataset_indices=index,
        ids_per_batch=ids_per_batch,
        instances_per_id=instances_per_id,
    )


def update_hard_pool(pool: HardPool, batch: PkBatch, out) -> HardPool:
    """Insert every anchor whose hinge was positive into the pool."""
    for i in np.nonzero(out.hinge > 0)[0]:
        pool.insert(int(batch.person_ids[i]), int(batch.dataset_indices[i]),
                    float(out.hinge[i]))
    return pool
