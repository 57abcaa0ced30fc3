"""Density-based pseudo-label generation and clustering-agreement metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "ClusteringError",
    "NOISE",
    "DbscanConfig",
    "ClusterAssignment",
    "dbscan",
    "adjusted_mutual_info",
    "fowlkes_mallows",
]

NOISE = -1


class ClusteringError(Exception):
    pass


@dataclass(frozen=True)
class DbscanConfig:
    epsilon: float = 0.5
    min_points: int = 4
    metric: str = "cosine"  # or "euclidean"

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ClusteringError(f"epsilon must be positive, got {self.epsilon}")
        if self.min_points < 1:
            raise ClusteringError(f"min_points must be >= 1, got {self.min_points}")
        if self.metric not in ("cosine", "euclidean"):
            raise ClusteringError(f"unknown metric {self.metric!r}")


@dataclass(frozen=True)
class ClusterAssignment:
    """Cluster id per sample (NOISE = -1), ids contiguous from 0."""

    labels: np.ndarray
    num_clusters: int

    @property
    def num_noise(self) -> int:
        return int((self.labels == NOISE).sum())

    def members(self, cluster: int) -> np.ndarray:
        return np.flatnonzero(self.labels == cluster)


def _pairwise(points: np.ndarray, metric: str) -> np.ndarray:
    if metric == "cosine":
        norms = np.sqrt((points * points).sum(axis=1, keepdims=True))
        norms = np.maximum(norms, 1e-12)
        unit = points / norms
        return np.clip(1.0 - unit @ unit.T, 0.0, None)
    sq = (points * points).sum(axis=1)
    d2 = sq[:, None] - 2.0 * points @ points.T + sq[None, :]
    return np.sqrt(np.maximum(d2, 0.0))


def dbscan(points: np.ndarray, cfg: DbscanConfig) -> ClusterAssignment:
    """Classical DBSCAN over an (n, d) point array.

    A point is core iff it has >= min_points neighbors within epsilon,
    counting itself and using distance <= epsilon at the boundary. Clusters
    are the connected components of core points; non-core points within
    epsilon of a core join the cluster of the lowest-indexed such core, the
    rest are NOISE. The labeling is independent of input order: clusters are
    numbered by their lowest-indexed core point.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[0] < 1 or points.shape[1] < 1:
        raise ClusteringError(f"points must be a non-empty (n, d) array, got shape {points.shape}")
    if not np.all(np.isfinite(points)):
        raise ClusteringError("points contain non-finite coordinates")

    n = points.shape[0]
    dist = _pairwise(points, cfg.metric)
    within = dist <= cfg.epsilon
    core = within.sum(axis=1) >= cfg.min_points

    labels = np.full(n, NOISE, dtype=np.int64)
    next_id = 0
    for seed in range(n):
        if not core[seed] or labels[seed] != NOISE:
            continue
        labels[seed] = next_id
        frontier = [seed]
        while frontier:
            p = frontier.pop()
            for q in np.flatnonzero(within[p]):
                if not core[q] or labels[q] != NOISE:
                    continue
                labels[q] = next_id
                frontier.append(int(q))
        next_id += 1

    # Border points attach to the lowest-indexed core within epsilon.
    core_idx = np.flatnonzero(core)
    if core_idx.size:
        for p in range(n):
            if core[p] or not within[p, core_idx].any():
                continue
            owner = core_idx[within[p, core_idx]].min()
            labels[p] = labels[owner]
    return ClusterAssignment(labels=labels, num_clusters=next_id)


def _contingency(labels_a: np.ndarray, labels_b: np.ndarray) -> np.ndarray:
    _, ia = np.unique(labels_a, return_inverse=True)
    _, ib = np.unique(labels_b, return_inverse=True)
    r, c = ia.max() + 1, ib.max() + 1
    table = np.zeros((r, c), dtype=np.int64)
    np.add.at(table, (ia, ib), 1)
    return table


def _validate_pair(labels_a, labels_b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(labels_a)
    b = np.asarray(labels_b)
    if a.ndim != 1 or b.ndim != 1:
        raise ClusteringError("labelings must be 1-D")
    if a.shape != b.shape:
        raise ClusteringError(f"length mismatch: {a.shape} vs {b.shape}")
    if a.size == 0:
        raise ClusteringError("empty labelings")
    return a, b


def _entropy(sizes: np.ndarray, n: int) -> float:
    p = sizes[sizes > 0] / n
    return float(-(p * np.log(p)).sum())


def _mutual_info(table: np.ndarray, n: int) -> float:
    a = table.sum(axis=1)
    b = table.sum(axis=0)
    mi = 0.0
    for i in range(table.shape[0]):
        for j in range(table.shape[1]):
            nij = table[i, j]
            if nij == 0:
                continue
            mi += (nij / n) * math.log(n * nij / (a[i] * b[j]))
    return mi


def _expected_mutual_info(table: np.ndarray, n: int) -> float:
    """E[MI] under the permutation model with fixed marginals (hypergeometric)."""
    a = table.sum(axis=1)
    b = table.sum(axis=0)
    lg = math.lgamma
    emi = 0.0
    for ai in a:
        for bj in b:
            lo = max(1, ai + bj - n)
            hi = min(ai, bj)
            for nij in range(lo, hi + 1):
                log_term = (
                    lg(ai + 1)
                    + lg(bj + 1)
                    + lg(n - ai + 1)
                    + lg(n - bj + 1)
                    - lg(n + 1)
                    - lg(nij + 1)
                    - lg(ai - nij + 1)
                    - lg(bj - nij + 1)
                    - lg(n - ai - bj + nij + 1)
                )
                emi += (nij / n) * math.log(n * nij / (ai * bj)) * math.exp(log_term)
    return emi


def adjusted_mutual_info(labels_a, labels_b) -> float:
    """Chance-corrected mutual information between two labelings, in (-1, 1].

    (MI - E[MI]) / (mean(H_a, H_b) - E[MI]); identical partitions score 1.0,
    and the degenerate 0/0 case (both single-cluster) is defined as 1.0.
    """
    a, b = _validate_pair(labels_a, labels_b)
    table = _contingency(a, b)
    n = int(a.size)
    h_a = _entropy(table.sum(axis=1), n)
    h_b = _entropy(table.sum(axis=0), n)
    mi = _mutual_info(table, n)
    emi = _expected_mutual_info(table, n)
    denom = 0.5 * (h_a + h_b) - emi
    if abs(denom) < 1e-15:
        return 1.0
    return (mi - emi) / denom


def fowlkes_mallows(labels_a, labels_b) -> float:
    """Pair-counting agreement: TP / sqrt((TP+FP) * (TP+FN)) over sample pairs."""
    a, b = _validate_pair(labels_a, labels_b)
    table = _contingency(a, b)

    def pairs(x: np.ndarray) -> int:
        return int((x.astype(np.int64) * (x.astype(np.int64) - 1) // 2).sum())

    tp = pairs(table.reshape(-1))
    pairs_a = pairs(table.sum(axis=1))
    pairs_b = pairs(table.sum(axis=0))
    if pairs_a == 0 or pairs_b == 0:
        return 0.0
    return tp / math.sqrt(pairs_a * pairs_b)
