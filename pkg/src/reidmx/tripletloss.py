"""Batch-hard triplet loss over identity-labeled embeddings.

Every batch element acts as an anchor.  For anchor ``a`` the hardest
positive is the same-identity element at maximal distance and the
hardest negative the different-identity element at minimal distance;
the per-anchor term is

    hinge(a) = max(0, margin + d(a, p*) - d(a, n*))

and the loss is the mean of the hinges.  Distances are *squared*
Euclidean by default, matching the formula literally; an unsquared
variant sits behind ``squared=False`` and is off everywhere by default.

Ties in the hardest-positive / hardest-negative selection break to the
lowest batch index (first occurrence), deterministically.

The loss itself is computed in binary32 regardless of how the network
that produced the embeddings was planned.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["TripletLossOut", "batch_hard_triplet_loss", "triplet_loss_gradient"]


@dataclass
class TripletLossOut:
    """Loss value plus the per-anchor mining results.

    ``hardest_pos[i]`` / ``hardest_neg[i]`` are batch indices; ``hinge``
    holds the pre-mean per-anchor terms, so ``loss == hinge.mean()``.
    """

    loss: float
    hardest_pos: np.ndarray
    hardest_neg: np.ndarray
    hinge: np.ndarray
    pos_dist: np.ndarray
    neg_dist: np.ndarray
    margin: float
    squared: bool


def _squared_distances(emb: np.ndarray) -> np.ndarray:
    diff = emb[:, None, :] - emb[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def batch_hard_triplet_loss(embeddings, labels, margin: float,
                            squared: bool = True) -> TripletLossOut:
    """Mine the hardest positive/negative per anchor and average the hinges.

    Raises ``ValueError`` if any label occurs only once (no positive
    exists), if only one label is present (no negative exists), or if
    the embeddings contain NaN.
    """
    emb = np.asarray(embeddings, dtype=np.float32)
    lab = np.asarray(labels)
    if emb.ndim != 2 or emb.shape[0] != lab.shape[0]:
        raise ValueError(f"embeddings {emb.shape} do not match {lab.shape[0]} labels")
    n = emb.shape[0]
    if n < 2:
        raise ValueError("need at least two embeddings")
    if np.isnan(emb).any():
        raise ValueError("embeddings contain NaN")
    uniq, counts = np.unique(lab, return_counts=True)
    if counts.min() < 2:
        lonely = uniq[counts.argmin()]
        raise ValueError(f"label {lonely!r} has a single instance; no positive exists")
    if uniq.size < 2:
        raise ValueError("all embeddings share one label; no negative exists")

    d2 = _squared_distances(emb)
    same = lab[:, None] == lab[None, :]
    pos_mask = same & ~np.eye(n, dtype=bool)

    # argmax/argmin return the first occurrence, giving the lowest-index
    # tie-break.  Squared and plain distances order identically, so the
    # selection always runs on d2.
    pos_cand = np.where(pos_mask, d2, np.float32(-1.0))
    hardest_pos = pos_cand.argmax(axis=1)
    neg_cand = np.where(~same, d2, np.float32(np.inf))
    hardest_neg = neg_cand.argmin(axis=1)

    idx = np.arange(n)
    pos_d2 = d2[idx, hardest_pos]
    neg_d2 = d2[idx, hardest_neg]
    if squared:
        pos_d, neg_d = pos_d2, neg_d2
    else:
        pos_d, neg_d = np.sqrt(pos_d2), np.sqrt(neg_d2)
    hinge = np.maximum(np.float32(0.0), np.float32(margin) + pos_d - neg_d)
    return TripletLossOut(
        loss=float(hinge.mean(dtype=np.float32)),
        hardest_pos=hardest_pos,
        hardest_neg=hardest_neg,
        hinge=hinge.astype(np.float32, copy=False),
        pos_dist=pos_d.astype(np.float32, copy=False),
        neg_dist=neg_d.astype(np.float32, copy=False),
        margin=float(margin),
        squared=squared,
    )


def triplet_loss_gradient(embeddings, out: TripletLossOut) -> np.ndarray:
    """Gradient of the mean batch-hard loss w.r.t. the embeddings.

    The mined indices are treated as locally constant (argmax/argmin are
    piecewise constant in the embeddings), so only anchors with an
    active hinge contribute.  Returns a float32 array shaped like the
    embeddings.
    """
    emb = np.asarray(embeddings, dtype=np.float32)
    n = emb.shape[0]
    grad = np.zeros_like(emb)
    active = np.nonzero(out.hinge > 0)[0]
    for a in active:
        p = out.hardest_pos[a]
        ng = out.hardest_neg[a]
        ap = emb[a] - emb[p]
        an = emb[a] - emb[ng]
        if out.squared:
            # d/d e of squared distances: 2 * differences.
            ga = 2.0 * (ap - an)
            gp = -2.0 * ap
            gn = 2.0 * an
        else:
            dp = max(float(out.pos_dist[a]), 1e-12)
            dn = max(float(out.neg_dist[a]), 1e-12)
            ga = ap / dp - an / dn
            gp = -ap / dp
            gn = an / dn
        grad[a] += ga
        grad[p] += gp
        grad[ng] += gn
    grad /= np.float32(n)
    return grad
