import numpy as np
import pytest


def lattice(rng: np.random.Generator, shape, step: float = 2.0 ** -6,
            span: int = 64) -> np.ndarray:
    """Random points on a dyadic lattice.

    Coordinates are integer multiples of a small power of two, so squared
    distances between points are exact in binary32 and binary64 alike and
    argmin/argmax decisions cannot flip between the two.
    """
    ints = rng.integers(-span, span + 1, size=shape)
    return (ints * step).astype(np.float32)


def labelled_batch(rng: np.random.Generator, n_ids: int, per_id: int, dim: int,
                   span: int = 64):
    emb = lattice(rng, (n_ids * per_id, dim), span=span)
    labels = np.repeat(np.arange(n_ids), per_id)
    perm = rng.permutation(len(labels))
    return emb[perm], labels[perm]


def three_cluster_set(seed: int = 5, dim: int = 16, sigma: float = 1.4):
    """Committed noisy retrieval fixture: 30 queries, 90 gallery.

    Three Gaussian identity clusters; 10% of the gallery labels are
    flipped to a different identity.  Queries sit on camera 0 and the
    gallery on camera 1, so the junk rule never fires and no query is
    dropped.  Parameters are frozen: the re-ranking improvement check
    depends on this exact draw.
    """
    gen = np.random.default_rng(seed)
    centers = 2.0 * gen.standard_normal((3, dim))
    q = np.vstack([centers[i] + sigma * gen.standard_normal((10, dim))
                   for i in range(3)]).astype(np.float32)
    g = np.vstack([centers[i] + sigma * gen.standard_normal((30, dim))
                   for i in range(3)]).astype(np.float32)
    q_pids = np.repeat(np.arange(3), 10)
    g_pids = np.repeat(np.arange(3), 30)
    flip = gen.choice(90, size=9, replace=False)
    g_pids = g_pids.copy()
    g_pids[flip] = (g_pids[flip] + gen.integers(1, 3, size=9)) % 3
    return (q, q_pids, np.zeros(30, dtype=np.int64),
            g, g_pids, np.ones(90, dtype=np.int64))


@pytest.fixture
def rng():
    return np.random.default_rng(0)
