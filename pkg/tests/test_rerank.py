"""k-reciprocal re-ranking: exact endpoints and the improvement fixture."""

import numpy as np
import pytest

from conftest import three_cluster_set
from reidmx.evaluation import cmc_map, distmat, k_reciprocal_rerank


def test_lambda_one_reproduces_plain_distances_bit_exactly(rng):
    q = rng.standard_normal((12, 8)).astype(np.float32)
    g = rng.standard_normal((25, 8)).astype(np.float32)
    out = k_reciprocal_rerank(q, g, k1=10, k2=4, lambda_value=1.0)
    assert out.dtype == np.float32
    assert np.array_equal(out, distmat(q, g))


def test_identical_population_gives_zero_jaccard_distance():
    # every point is every other point's reciprocal neighbor, so the
    # weight vectors coincide and the Jaccard distance collapses to 0
    q = np.ones((4, 6), dtype=np.float32)
    g = np.ones((8, 6), dtype=np.float32)
    out = k_reciprocal_rerank(q, g, k1=12, k2=1, lambda_value=0.0)
    assert out.shape == (4, 8)
    assert np.all(out == 0.0)


def test_jaccard_orders_far_clusters_correctly(rng):
    a = rng.standard_normal((13, 8)).astype(np.float32) * 0.3
    b = a + 10.0
    q = np.vstack([a[:3], b[:3]])
    g = np.vstack([a[3:], b[3:]])
    out = k_reciprocal_rerank(q, g, k1=8, k2=3, lambda_value=0.0)
    for qi in range(3):
        assert out[qi, :10].max() < out[qi, 10:].min()
        assert out[qi + 3, 10:].max() < out[qi + 3, :10].min()


def test_committed_noisy_fixture_mean_ap_improves():
    q, q_pids, q_cams, g, g_pids, g_cams = three_cluster_set()
    _, plain_map, evaluated, dropped = cmc_map(distmat(q, g), q_pids, q_cams,
                                               g_pids, g_cams)
    assert (evaluated, dropped) == (30, 0)
    reranked = k_reciprocal_rerank(q, g)
    _, rr_map, _, _ = cmc_map(reranked, q_pids, q_cams, g_pids, g_cams)
    assert rr_map >= plain_map
    assert rr_map > plain_map + 0.02  # frozen draw leaves real headroom


def test_rerank_parameter_validation(rng):
    q = rng.standard_normal((5, 4)).astype(np.float32)
    g = rng.standard_normal((9, 4)).astype(np.float32)
    with pytest.raises(ValueError):
        k_reciprocal_rerank(q, g, k1=4, k2=5)
    with pytest.raises(ValueError):
        k_reciprocal_rerank(q, g, k1=15, k2=2)
    with pytest.raises(ValueError):
        k_reciprocal_rerank(q, g, k2=0)
    with pytest.raises(ValueError):
        k_reciprocal_rerank(q, g, lambda_value=-0.1)
    with pytest.raises(ValueError):
        k_reciprocal_rerank(q, g, lambda_value=1.0001)
    with pytest.raises(ValueError):
        k_reciprocal_rerank(q, np.zeros((3, 5), np.float32))


def test_rerank_is_deterministic(rng):
    q = rng.standard_normal((10, 8)).astype(np.float32)
    g = rng.standard_normal((30, 8)).astype(np.float32)
    first = k_reciprocal_rerank(q, g, k1=12, k2=4, lambda_value=0.3)
    second = k_reciprocal_rerank(q, g, k1=12, k2=4, lambda_value=0.3)
    assert np.array_equal(first, second)
