"""Retrieval evaluation (mAP, CMC) under the cross-camera protocol, plus
embedding export with an optional 2-D projection.

A gallery item is a valid match for a query iff it shares the identity and
comes from a different camera; same-identity same-camera items are excluded
from that query's ranking. Queries with no valid match are dropped and
counted.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .data import Dataset
from .model import Backbone
from .pipeline import embed_records

__all__ = [
    "EvaluationError",
    "RetrievalProtocol",
    "ModeResult",
    "EvalReport",
    "rank_gallery",
    "mean_average_precision",
    "cmc_curve",
    "evaluate",
    "export_embeddings",
    "pca_top2",
]

DEFAULT_KS = (1, 5, 10)


class EvaluationError(Exception):
    pass


@dataclass(frozen=True)
class RetrievalProtocol:
    query_ids: np.ndarray
    query_cams: np.ndarray
    gallery_ids: np.ndarray
    gallery_cams: np.ndarray

    def __post_init__(self):
        if self.gallery_ids.size == 0:
            raise EvaluationError("empty gallery")
        if self.query_ids.shape != self.query_cams.shape or self.gallery_ids.shape != self.gallery_cams.shape:
            raise EvaluationError("id/camera arrays must align")

    @classmethod
    def from_dataset(cls, dataset: Dataset, domain: int) -> "RetrievalProtocol":
        q = dataset.select(domain, "query")
        g = dataset.select(domain, "gallery")
        if not q or not g:
            raise EvaluationError(f"domain {domain} has no query/gallery splits")
        return cls(
            query_ids=np.array([r.identity for r in q], dtype=np.int64),
            query_cams=np.array([r.camera_id for r in q], dtype=np.int64),
            gallery_ids=np.array([r.identity for r in g], dtype=np.int64),
            gallery_cams=np.array([r.camera_id for r in g], dtype=np.int64),
        )


def rank_gallery(query_features: np.ndarray, gallery_features: np.ndarray, metric: str = "cosine") -> np.ndarray:
    """Per query, gallery indices sorted by ascending distance; ties break by
    ascending gallery index (stable sort)."""
    if gallery_features.shape[0] == 0:
        raise EvaluationError("empty gallery")
    if query_features.shape[1] != gallery_features.shape[1]:
        raise EvaluationError("query/gallery feature dims differ")
    if metric == "cosine":
        dist = 1.0 - query_features @ gallery_features.T
    elif metric == "euclidean":
        qs = (query_features * query_features).sum(axis=1)
        gs = (gallery_features * gallery_features).sum(axis=1)
        dist = np.sqrt(np.maximum(qs[:, None] - 2.0 * query_features @ gallery_features.T + gs[None, :], 0.0))
    else:
        raise EvaluationError(f"unknown metric {metric!r}")
    return np.argsort(dist, axis=1, kind="stable")


def _query_outcome(order: np.ndarray, qid: int, qcam: int, protocol: RetrievalProtocol) -> Optional[np.ndarray]:
    """Post-exclusion boolean match sequence for one query, or None if the
    query has no valid match and is dropped."""
    gids = protocol.gallery_ids[order]
    gcams = protocol.gallery_cams[order]
    excluded = (gids == qid) & (gcams == qcam)
    matches = (gids == qid) & (gcams != qcam)
    kept = matches[~excluded]
    if not kept.any():
        return None
    return kept


def mean_average_precision(rankings: np.ndarray, protocol: RetrievalProtocol) -> tuple:
    """(mAP over retained queries, dropped-query count)."""
    aps = []
    dropped = 0
    for qi in range(rankings.shape[0]):
        kept = _query_outcome(rankings[qi], protocol.query_ids[qi], protocol.query_cams[qi], protocol)
        if kept is None:
            dropped += 1
            continue
        ranks = np.flatnonzero(kept) + 1  # post-exclusion, 1-based
        precisions = np.arange(1, ranks.size + 1) / ranks
        aps.append(precisions.mean())
    if not aps:
        raise EvaluationError("no retained queries (every query lacked a valid match)")
    return float(np.mean(aps)), dropped


def cmc_curve(rankings: np.ndarray, protocol: RetrievalProtocol, ks: Sequence[int] = DEFAULT_KS) -> np.ndarray:
    """Rank-k accuracies: fraction of retained queries whose first valid
    match lands at post-exclusion rank <= k."""
    first_ranks = []
    for qi in range(rankings.shape[0]):
        kept = _query_outcome(rankings[qi], protocol.query_ids[qi], protocol.query_cams[qi], protocol)
        if kept is None:
            continue
        first_ranks.append(int(np.flatnonzero(kept)[0]) + 1)
    if not first_ranks:
        raise EvaluationError("no retained queries (every query lacked a valid match)")
    first = np.array(first_ranks)
    return np.array([float((first <= k).mean()) for k in ks])


@dataclass
class ModeResult:
    map: float
    cmc: Dict[int, float]
    dropped_queries: int

    def to_dict(self) -> dict:
        return {
            "map": self.map,
            "cmc": {str(k): v for k, v in self.cmc.items()},
            "dropped_queries": self.dropped_queries,
        }


@dataclass
class EvalReport:
    target_domain: int
    modes: Dict[str, ModeResult] = field(default_factory=dict)
    ami: Optional[float] = None
    fmi: Optional[float] = None

    def to_dict(self) -> dict:
        return {
            "target_domain": self.target_domain,
            "modes": {name: r.to_dict() for name, r in self.modes.items()},
            "ami": self.ami,
            "fmi": self.fmi,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def evaluate(
    backbone: Backbone,
    dataset: Dataset,
    target_domain: int,
    feature_modes: Sequence[str] = ("fused",),
    ks: Sequence[int] = DEFAULT_KS,
    batch: int = 64,
) -> EvalReport:
    """Retrieval metrics on one domain's query/gallery for each feature mode.

    Modes: "fused" averages all domain paths; "path_<d>" uses path d alone.
    """
    protocol = RetrievalProtocol.from_dataset(dataset, target_domain)
    q_recs = dataset.select(target_domain, "query")
    g_recs = dataset.select(target_domain, "gallery")
    q_imgs = dataset.stack(q_recs).astype(np.float32)
    g_imgs = dataset.stack(g_recs).astype(np.float32)

    report = EvalReport(target_domain=target_domain)
    for mode in feature_modes:
        if mode == "fused":
            path: Optional[int] = None
        elif mode.startswith("path_"):
            path = int(mode.split("_", 1)[1])
            if not 0 <= path < backbone.num_domains:
                raise EvaluationError(f"path index {path} out of range [0, {backbone.num_domains})")
        else:
            raise EvaluationError(f"unknown feature mode {mode!r}")
        qf = embed_records(backbone, q_imgs, "eval", path, batch)
        gf = embed_records(backbone, g_imgs, "eval", path, batch)
        rankings = rank_gallery(qf, gf, "cosine")
        map_value, dropped = mean_average_precision(rankings, protocol)
        cmc = cmc_curve(rankings, protocol, ks)
        report.modes[mode] = ModeResult(
            map=map_value,
            cmc={int(k): float(v) for k, v in zip(ks, cmc)},
            dropped_queries=dropped,
        )
    return report


# ---------------------------------------------------------------------------
# Embedding export


def pca_top2(features: np.ndarray, iters: int = 200, tol: float = 1e-7) -> np.ndarray:
    """Top-2 principal directions by power iteration with deflation; (2, d)."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise EvaluationError("pca_top2 needs at least two rows")
    xc = x - x.mean(axis=0, keepdims=True)
    cov = xc.T @ xc / x.shape[0]
    d = cov.shape[0]
    rng = np.random.default_rng(0)
    comps = []
    m = cov.copy()
    for _ in range(2):
        v = rng.normal(size=d)
        v /= np.linalg.norm(v)
        for _ in range(iters):
            w = m @ v
            norm = np.linalg.norm(w)
            if norm < 1e-30:
                break  # deflated to (numerically) zero; keep current v
            w /= norm
            if min(np.linalg.norm(w - v), np.linalg.norm(w + v)) < tol:
                v = w
                break
            v = w
        comps.append(v.copy())
        lam = float(v @ m @ v)
        m = m - lam * np.outer(v, v)
    return np.stack(comps)


def export_embeddings(
    backbone: Backbone,
    dataset: Dataset,
    out_path,
    project_2d: bool = False,
    batch: int = 64,
) -> Path:
    """Write one row per (sample, domain path) as tab-separated text.

    Columns: sample_id, domain_id, path_id, then the embedding values or the
    2-D projection (shared PCA over all exported rows).
    """
    out = Path(out_path)
    records = sorted(dataset.records, key=lambda r: r.sample_id)
    images = dataset.stack(records).astype(np.float32)
    rows_meta: List[tuple] = []
    embeddings: List[np.ndarray] = []
    for path in range(backbone.num_domains):
        emb = embed_records(backbone, images, "eval", path, batch)
        for rec, vec in zip(records, emb):
            rows_meta.append((rec.sample_id, rec.domain_id, path))
            embeddings.append(vec)
    matrix = np.stack(embeddings)

    if project_2d:
        comps = pca_top2(matrix)
        centered = matrix - matrix.mean(axis=0, keepdims=True)
        values = centered @ comps.T
        value_names = ["x", "y"]
    else:
        values = matrix
        value_names = [f"e{i}" for i in range(matrix.shape[1])]

    header = "sample_id\tdomain_id\tpath_id\t" + "\t".join(value_names)
    lines = [header]
    for (sid, dom, path), vec in zip(rows_meta, values):
        lines.append(f"{sid}\t{dom}\t{path}\t" + "\t".join(f"{v:.8g}" for v in vec))
    out.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return out
