"""Training objective: cross-entropy over pseudo-label logits plus batch-hard
triplet loss, combined as an unweighted sum.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

__all__ = ["LossError", "TripletConfig", "cross_entropy", "triplet_batch_hard", "total_loss"]

_DIST_EPS = 1e-12


class LossError(Exception):
    pass


@dataclass(frozen=True)
class TripletConfig:
    margin: float = 0.3
    distance: str = "euclidean"  # or "cosine"

    def __post_init__(self):
        if self.margin < 0:
            raise LossError(f"margin must be non-negative, got {self.margin}")
        if self.distance not in ("euclidean", "cosine"):
            raise LossError(f"unknown distance {self.distance!r}")


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean of -log softmax(logits)[label], stabilized by max subtraction."""
    if logits.ndim != 2:
        raise LossError(f"logits must be 2-D, got shape {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise LossError(f"labels shape {labels.shape} does not match {n} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise LossError(f"labels out of range [0, {k})")
    # Row max is detached; the shift cancels analytically.
    row_max = Tensor(logits.data.max(axis=1, keepdims=True))
    shifted = ad.sub(logits, row_max)
    lse = ad.log(ad.reduce_sum(ad.exp(shifted), axis=1))
    picked = ad.take_per_row(shifted, labels)
    return ad.reduce_mean(ad.sub(lse, picked))


def _pairwise_distances(emb: np.ndarray, distance: str) -> np.ndarray:
    if distance == "euclidean":
        sq = (emb * emb).sum(axis=1)
        d2 = sq[:, None] - 2.0 * emb @ emb.T + sq[None, :]
        return np.sqrt(np.maximum(d2, 0.0) + _DIST_EPS)
    norms = np.sqrt((emb * emb).sum(axis=1, keepdims=True) + _DIST_EPS)
    unit = emb / norms
    return 1.0 - unit @ unit.T


def _row_distance(a: Tensor, b: Tensor, distance: str) -> Tensor:
    """Differentiable per-row distance between two (m, d) tensors."""
    if distance == "euclidean":
        diff = ad.sub(a, b)
        return ad.sqrt(ad.reduce_sum(ad.mul(diff, diff), axis=1) + _DIST_EPS)
    ua = ad.l2_normalize_rows(a)
    ub = ad.l2_normalize_rows(b)
    return 1.0 - ad.reduce_sum(ad.mul(ua, ub), axis=1)


def triplet_batch_hard(embeddings: Tensor, labels: np.ndarray, cfg: TripletConfig) -> Tensor:
    """Batch-hard mining: per anchor, the farthest same-label sample and the
    nearest different-label sample, hinged at cfg.margin.

    Anchors whose label is unique in the batch, or batches with a single
    label, contribute nothing; if no anchor is valid the loss is a constant
    zero. Ties pick the lowest index.
    """
    if embeddings.ndim != 2:
        raise LossError(f"embeddings must be 2-D, got shape {embeddings.shape}")
    n, d = embeddings.shape
    if n < 2:
        raise LossError(f"need at least 2 samples, got {n}")
    if d == 0:
        raise LossError("embedding dimension must be positive")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (n,):
        raise LossError(f"labels shape {labels.shape} does not match {n} rows")

    dist = _pairwise_distances(embeddings.data.astype(np.float64), cfg.distance)
    same = labels[:, None] == labels[None, :]
    anchors, positives, negatives = [], [], []
    for a in range(n):
        pos_mask = same[a].copy()
        pos_mask[a] = False
        neg_mask = ~same[a]
        if not pos_mask.any() or not neg_mask.any():
            continue
        pos_row = np.where(pos_mask, dist[a], -np.inf)
        neg_row = np.where(neg_mask, dist[a], np.inf)
        anchors.append(a)
        positives.append(int(np.argmax(pos_row)))
        negatives.append(int(np.argmin(neg_row)))
    if not anchors:
        return Tensor(np.zeros((), dtype=embeddings.dtype))

    a_rows = ad.gather_rows(embeddings, np.asarray(anchors))
    p_rows = ad.gather_rows(embeddings, np.asarray(positives))
    n_rows = ad.gather_rows(embeddings, np.asarray(negatives))
    d_pos = _row_distance(a_rows, p_rows, cfg.distance)
    d_neg = _row_distance(a_rows, n_rows, cfg.distance)
    return ad.reduce_mean(ad.relu(ad.sub(d_pos, d_neg) + cfg.margin))


def total_loss(cls: Tensor, tri: Tensor) -> Tensor:
    """Unweighted sum of the classification and triplet terms."""
    if not np.all(np.isfinite(cls.data)) or not np.all(np.isfinite(tri.data)):
        raise LossError("non-finite loss term")
    return ad.add(cls, tri)
