"""Retrieval evaluation: distances, CMC/mAP, k-reciprocal re-ranking.

Protocol (single-query, cross-camera): for each query the gallery is
ranked by ascending distance with ties broken by ascending gallery
index (stable sort).  Gallery entries sharing both the query's person
id *and* camera id are excluded from that query's ranking.  A query
with no remaining true match is dropped from the averages entirely.

CMC at rank k is the fraction of retained queries whose first true
match appears within the top k.  Average precision per query is the
mean, over its true-match positions, of matches-so-far / rank; mAP
averages over retained queries.

Re-ranking follows the k-reciprocal-encoding scheme: reciprocal
neighbor sets expanded by half-k1 sets (two-thirds overlap rule),
Gaussian-kernel sparse feature vectors, local query expansion over k2
and a Jaccard distance computed through min/sum; the final distance is
``(1 - lambda) * d_jaccard + lambda * d_original``.  At ``lambda == 1``
the output equals the original distance matrix bit-exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .half import quantize_f16
from .tensor import Precision

__all__ = ["EvalError", "EvalReport", "distmat", "cmc_map", "cmc", "mean_ap",
           "k_reciprocal_rerank"]


class EvalError(Exception):
    """The evaluation protocol could not retain any query."""


@dataclass
class EvalReport:
    """Evaluation result: CMC rates by rank, mAP, and bookkeeping."""

    cmc: dict
    mean_ap: float
    variant: str
    precision_mode: Precision
    queries_evaluated: int
    queries_dropped: int


def distmat(queries, gallery, mode: Precision = Precision.BINARY32,
            block_rows: int = 256) -> np.ndarray:
    """Euclidean distance matrix between query and gallery vectors.

    In binary16 mode both operand sets are quantized first; the sums of
    squares always accumulate in binary32.  Computed from explicit
    differences (not the dot-product expansion), so identical vectors
    give exactly zero and the matrix is exactly symmetric for q == g.
    """
    q = np.asarray(queries, dtype=np.float32)
    g = np.asarray(gallery, dtype=np.float32)
    if q.ndim != 2 or g.ndim != 2 or q.shape[1] != g.shape[1]:
        raise ValueError(f"incompatible shapes {q.shape} and {g.shape}")
    if mode is Precision.BINARY16:
        q = quantize_f16(q)
        g = quantize_f16(g)
    out = np.empty((q.shape[0], g.shape[0]), dtype=np.float32)
    step = max(1, block_rows)
    for i in range(0, q.shape[0], step):
        diff = q[i:i + step, None, :] - g[None, :, :]
        out[i:i + step] = np.sqrt(np.einsum("qgd,qgd->qg", diff, diff))
    return out


def _ranked_matches(dist_row: np.ndarray, q_pid: int, q_cam: int,
                    g_pids: np.ndarray, g_cams: np.ndarray) -> np.ndarray | None:
    """Match flags of one query's kept ranking, or None if it drops."""
    order = np.argsort(dist_row, kind="stable")
    junk = (g_pids[order] == q_pid) & (g_cams[order] == q_cam)
    matches = (g_pids[order] == q_pid)[~junk]
    if not matches.any():
        return None
    return matches


def cmc_map(dist: np.ndarray, q_pids, q_cams, g_pids, g_cams,
            ranks=(1, 5, 10)) -> tuple[dict, float, int, int]:
    """CMC rates and mAP in one pass over the queries.

    Returns ``(cmc_rates, mAP, evaluated, dropped)``.  Raises
    :class:`EvalError` when every query is dropped.
    """
    dist = np.asarray(dist)
    q_pids = np.asarray(q_pids)
    q_cams = np.asarray(q_cams)
    g_pids = np.asarray(g_pids)
    g_cams = np.asarray(g_cams)
    nq, ng = dist.shape
    if not (len(q_pids) == len(q_cams) == nq and len(g_pids) == len(g_cams) == ng):
        raise ValueError("label arrays do not match the distance matrix")
    ranks = sorted(set(int(r) for r in ranks))
    if not ranks or ranks[0] < 1:
        raise ValueError("ranks must be positive")

    hits = {k: 0 for k in ranks}
    ap_sum = 0.0
    evaluated = 0
    dropped = 0
    for qi in range(nq):
        matches = _ranked_matches(dist[qi], q_pids[qi], q_cams[qi], g_pids, g_cams)
        if matches is None:
            dropped += 1
            continue
        evaluated += 1
        first = int(np.nonzero(matches)[0][0])
        for k in ranks:
            if first < k:
                hits[k] += 1
        # AP: precision at each true-match position, ascending ranks.
        positions = np.nonzero(matches)[0]
        ap = 0.0
        for j, pos in enumerate(positions, start=1):
            ap += j / (int(pos) + 1)
        ap_sum += ap / len(positions)
    if evaluated == 0:
        raise EvalError("every query was dropped; no cross-camera true matches")
    return ({k: hits[k] / evaluated for k in ranks}, ap_sum / evaluated,
            evaluated, dropped)


def cmc(dist, q_pids, q_cams, g_pids, g_cams, ranks=(1, 5, 10)) -> dict:
    rates, _, _, _ = cmc_map(dist, q_pids, q_cams, g_pids, g_cams, ranks)
    return rates


def mean_ap(dist, q_pids, q_cams, g_pids, g_cams) -> float:
    _, value, _, _ = cmc_map(dist, q_pids, q_cams, g_pids, g_cams, ranks=(1,))
    return value


def _k_reciprocal_set(initial_rank: np.ndarray, i: int, k: int) -> np.ndarray:
    forward = initial_rank[i, : k + 1]
    backward = initial_rank[forward, : k + 1]
    fi = np.nonzero(backward == i)[0]
    return forward[fi]


def k_reciprocal_rerank(queries, gallery, k1: int = 20, k2: int = 6,
                        lambda_value: float = 0.3) -> np.ndarray:
    """Re-rank query-gallery distances with k-reciprocal encoding.

    Returns a (Q, G) float32 matrix ``(1 - lambda) * jaccard + lambda *
    original`` where the original is the plain Euclidean ``distmat``.
    """
    q = np.asarray(queries, dtype=np.float32)
    g = np.asarray(gallery, dtype=np.float32)
    if q.ndim != 2 or g.ndim != 2 or q.shape[1] != g.shape[1]:
        raise ValueError(f"incompatible shapes {q.shape} and {g.shape}")
    nq, ngal = q.shape[0], g.shape[0]
    n = nq + ngal
    if not 1 <= k2 <= k1:
        raise ValueError("need 1 <= k2 <= k1")
    if k1 > n or k2 > n:
        raise ValueError(f"k1/k2 exceed the population of {n} vectors")
    if not 0.0 <= lambda_value <= 1.0:
        raise ValueError("lambda must lie in [0, 1]")

    original = distmat(q, g)
    if lambda_value == 1.0:
        # The blend is exact here anyway; skip the neighborhood work.
        return original.copy()

    feats = np.vstack([q, g]).astype(np.float64)
    # Squared distances over the joint population, column-normalized so
    # the Gaussian kernel weights are scale-free.
    diff2 = np.square(feats[:, None, :] - feats[None, :, :]).sum(axis=2)
    col_max = diff2.max(axis=0)
    col_max[col_max == 0.0] = 1.0
    dn = (diff2 / col_max).T
    initial_rank = np.argsort(dn, axis=1, kind="stable")

    k1_cap = min(k1, n - 1)
    half = max(1, int(round(k1_cap / 2)))
    V = np.zeros((n, n), dtype=np.float64)
    for i in range(n):
        expansion = _k_reciprocal_set(initial_rank, i, k1_cap)
        candidates = expansion.copy()
        for cand in expansion:
            cand_set = _k_reciprocal_set(initial_rank, int(cand), half)
            inter = np.intersect1d(cand_set, expansion, assume_unique=False)
            if len(inter) > 2 / 3 * len(cand_set):
                candidates = np.append(candidates, cand_set)
        candidates = np.unique(candidates)
        weights = np.exp(-dn[i, candidates])
        V[i, candidates] = weights / weights.sum()

    if k2 > 1:  # local query expansion: average V over the k2 neighbors
        V = np.mean(V[initial_rank[:, :k2], :], axis=1)

    # Inverted index: for each element, who assigned it nonzero weight.
    owners = [np.nonzero(V[:, col])[0] for col in range(n)]
    jaccard = np.zeros((nq, n), dtype=np.float64)
    for qi in range(nq):
        temp_min = np.zeros(n)
        nz = np.nonzero(V[qi])[0]
        for col in nz:
            rows = owners[col]
            temp_min[rows] += np.minimum(V[qi, col], V[rows, col])
        jaccard[qi] = 1.0 - temp_min / (2.0 - temp_min)

    blended = ((1.0 - lambda_value) * jaccard[:, nq:]
               + lambda_value * original.astype(np.float64))
    return blended.astype(np.float32)
