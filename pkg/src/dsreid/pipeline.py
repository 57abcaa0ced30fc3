"""The alternating training loop: extract per-domain features, cluster them
into pseudo-labels, train one epoch over all domains, repeat.

Three run modes share the loop: "unDG" re-clusters every epoch and trains on
pseudo-labels; "supervisedDG" uses true identities with fixed heads;
"UDAwoSL" is unDG plus random-erasing augmentation, evaluated on the source
domains' own query/gallery splits.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import NumericalError
from .clustering import NOISE, ClusterAssignment, DbscanConfig, adjusted_mutual_info, dbscan, fowlkes_mallows
from .data import BatchSpec, Dataset, DatasetError, DomainSkipped, augment, sample_pk_batch
from .losses import LossError, TripletConfig, cross_entropy, total_loss, triplet_batch_hard
from .model import Backbone, ClassifierBank, ModelConfig, load_checkpoint, save_checkpoint
from .optim import Adam

__all__ = [
    "PipelineError",
    "TrainingDiverged",
    "TrainConfig",
    "EpochLog",
    "RunResult",
    "extract_features",
    "relabel",
    "train_epoch",
    "run",
]

MODES = ("unDG", "supervisedDG", "UDAwoSL")


class PipelineError(Exception):
    pass


class TrainingDiverged(PipelineError):
    """A loss went non-finite; diagnostics were dumped to the run directory."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    iters_per_domain: Optional[int] = None  # default: ceil(largest domain / batch)
    learning_rate: float = 3.5e-4
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    batch: BatchSpec = BatchSpec()
    dbscan: DbscanConfig = DbscanConfig()
    triplet: TripletConfig = TripletConfig()
    mode: str = "unDG"
    seed: int = 0
    train_domains: Optional[tuple] = None  # dataset domain ids; None = all
    eval_batch: int = 64
    audit_batches: bool = False
    # When set, each domain's clustering radius is this quantile of its own
    # pairwise feature distances (recomputed every epoch) instead of the
    # fixed dbscan.epsilon. The rule is identical for every arm, so
    # comparisons stay parameter-relative while the radius tracks the
    # distance scale as training reshapes the embedding.
    dbscan_eps_quantile: Optional[float] = None

    def __post_init__(self):
        if self.epochs < 1:
            raise PipelineError(f"epochs must be >= 1, got {self.epochs}")
        if self.learning_rate < 0:
            raise PipelineError(f"learning rate must be non-negative, got {self.learning_rate}")
        if self.mode not in MODES:
            raise PipelineError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.dbscan_eps_quantile is not None and not 0.0 < self.dbscan_eps_quantile < 1.0:
            raise PipelineError(f"dbscan_eps_quantile must lie in (0, 1), got {self.dbscan_eps_quantile}")

    @property
    def random_erasing(self) -> bool:
        return self.mode == "UDAwoSL"

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "iters_per_domain": self.iters_per_domain,
            "learning_rate": self.learning_rate,
            "betas": list(self.betas),
            "adam_eps": self.adam_eps,
            "batch": {"p": self.batch.p, "k": self.batch.k},
            "dbscan": {
                "epsilon": self.dbscan.epsilon,
                "min_points": self.dbscan.min_points,
                "metric": self.dbscan.metric,
            },
            "triplet": {"margin": self.triplet.margin, "distance": self.triplet.distance},
            "mode": self.mode,
            "seed": self.seed,
            "train_domains": list(self.train_domains) if self.train_domains is not None else None,
            "eval_batch": self.eval_batch,
            "audit_batches": self.audit_batches,
            "dbscan_eps_quantile": self.dbscan_eps_quantile,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise PipelineError(f"unknown config field(s): {sorted(unknown)}")
        if "batch" in d and isinstance(d["batch"], dict):
            d["batch"] = BatchSpec(**d["batch"])
        if "dbscan" in d and isinstance(d["dbscan"], dict):
            d["dbscan"] = DbscanConfig(**d["dbscan"])
        if "triplet" in d and isinstance(d["triplet"], dict):
            d["triplet"] = TripletConfig(**d["triplet"])
        if d.get("betas") is not None:
            d["betas"] = tuple(d["betas"])
        if d.get("train_domains") is not None:
            d["train_domains"] = tuple(d["train_domains"])
        return cls(**d)


@dataclass
class EpochLog:
    epoch: int
    per_domain: Dict[int, dict] = field(default_factory=dict)
    mean_cls: float = 0.0
    mean_tri: float = 0.0
    wall_time: float = 0.0
    batch_audit: Optional[list] = None

    def to_json_line(self) -> str:
        payload = {
            "epoch": self.epoch,
            "per_domain": {str(k): v for k, v in self.per_domain.items()},
            "mean_cls": self.mean_cls,
            "mean_tri": self.mean_tri,
            "wall_time": self.wall_time,
        }
        if self.batch_audit is not None:
            payload["batch_audit"] = self.batch_audit
        return json.dumps(payload, sort_keys=True)


@dataclass
class RunResult:
    out_dir: Path
    final_checkpoint: Path
    epoch_logs: List[EpochLog]
    summary: dict


def extract_features(dataset: Dataset, domain: int, backbone: Backbone, path_index: int, batch: int = 64) -> np.ndarray:
    """Eval-mode clustering features of a domain's train split.

    Embeddings are centered on the domain mean before L2 normalization:
    pooled CNN features share a large constant component that would otherwise
    collapse all cosine distances toward zero and make any fixed clustering
    radius degenerate.
    """
    records = dataset.select(domain, "train")
    if not records:
        raise PipelineError(f"domain {domain} has no train records")
    chunks = []
    with ad.no_grad():
        for start in range(0, len(records), batch):
            imgs = dataset.stack(records[start : start + batch]).astype(np.float32)
            chunks.append(backbone.forward_embed(imgs, path_index, "eval").data)
    emb = np.concatenate(chunks, axis=0)
    emb = emb - emb.mean(axis=0, keepdims=True)
    norms = np.sqrt((emb * emb).sum(axis=1, keepdims=True) + 1e-12)
    return emb / norms


def embed_records(backbone: Backbone, images: np.ndarray, mode: str, path_index: Optional[int], batch: int = 64) -> np.ndarray:
    """Eval embeddings for raw images; path_index None means fused."""
    chunks = []
    with ad.no_grad():
        for start in range(0, images.shape[0], batch):
            x = images[start : start + batch]
            if path_index is None:
                emb = backbone.forward_fused(x)
            else:
                emb = backbone.forward_embed(x, path_index, "eval")
            chunks.append(ad.l2_normalize_rows(emb).data)
    return np.concatenate(chunks, axis=0)


def _quantile_epsilon(features: np.ndarray, metric: str, quantile: float) -> float:
    if metric == "cosine":
        norms = np.sqrt((features * features).sum(axis=1, keepdims=True))
        unit = features / np.maximum(norms, 1e-12)
        dist = np.clip(1.0 - unit @ unit.T, 0.0, None)
    else:
        sq = (features * features).sum(axis=1)
        dist = np.sqrt(np.maximum(sq[:, None] - 2.0 * features @ features.T + sq[None, :], 0.0))
    upper = dist[np.triu_indices(dist.shape[0], k=1)]
    return max(float(np.quantile(upper, quantile)), 1e-6)


def relabel(
    features: Dict[int, np.ndarray],
    cfg: DbscanConfig,
    heads: ClassifierBank,
    rng: np.random.Generator,
    eps_quantile: Optional[float] = None,
) -> Dict[int, ClusterAssignment]:
    """Cluster each domain independently and rebuild its classifier head.

    Label spaces are per-domain. A domain that collapses to zero clusters
    keeps no head and is skipped for the epoch. With eps_quantile set, each
    domain's radius comes from its own distance distribution.
    """
    assignments: Dict[int, ClusterAssignment] = {}
    for d in sorted(features):
        domain_cfg = cfg
        if eps_quantile is not None:
            domain_cfg = DbscanConfig(
                epsilon=_quantile_epsilon(features[d], cfg.metric, eps_quantile),
                min_points=cfg.min_points,
                metric=cfg.metric,
            )
        assignment = dbscan(features[d], domain_cfg)
        assignments[d] = assignment
        if assignment.num_clusters >= 1:
            heads.rebuild(d, assignment.num_clusters, rng)
        else:
            heads.drop(d)
    return assignments


def _cluster_quality(assignment: ClusterAssignment, truth: np.ndarray) -> tuple:
    mask = assignment.labels != NOISE
    if truth is None or not mask.any() or (truth[mask] < 0).any():
        return None, None
    ami = adjusted_mutual_info(assignment.labels[mask], truth[mask])
    fmi = fowlkes_mallows(assignment.labels[mask], truth[mask])
    return float(ami), float(fmi)


def train_epoch(
    backbone: Backbone,
    heads: ClassifierBank,
    opt: Adam,
    dataset: Dataset,
    domains: List[int],
    assignments: Dict[int, np.ndarray],
    cfg: TrainConfig,
    rng: np.random.Generator,
    epoch: int,
    out_dir: Optional[Path] = None,
) -> EpochLog:
    """One epoch of round-robin single-domain P x K steps."""
    iters = cfg.iters_per_domain
    if iters is None:
        largest = max(len(dataset.select(d, "train")) for d in domains)
        iters = max(1, int(np.ceil(largest / cfg.batch.batch_size)))
    log = EpochLog(epoch=epoch, batch_audit=[] if cfg.audit_batches else None)
    cls_sum, tri_sum, steps = 0.0, 0.0, 0
    t0 = time.perf_counter()
    for _ in range(iters):
        for path_index, d in enumerate(domains):
            labels = assignments.get(d)
            if labels is None or heads.num_classes(path_index) == 0:
                continue
            try:
                batch = sample_pk_batch(dataset, d, labels, cfg.batch, rng)
            except DomainSkipped as exc:
                log.per_domain.setdefault(d, {})["skipped"] = str(exc)
                continue
            images = augment(batch.images, rng, erase=cfg.random_erasing)
            try:
                tape = ad.Tape()
                with ad.recording(tape):
                    emb = backbone.forward_embed(images, path_index, "train")
                    logits = heads.classify(emb, path_index)
                    cls = cross_entropy(logits, batch.labels)
                    tri = triplet_batch_hard(emb, batch.labels, cfg.triplet)
                    loss = total_loss(cls, tri)
                tape.backward(loss)
            except (LossError, NumericalError) as exc:
                _dump_diagnostics(out_dir, backbone, batch, epoch, d, exc)
                raise TrainingDiverged(f"non-finite loss in epoch {epoch}, domain {d}: {exc}") from exc
            opt.step()
            opt.zero_grad()
            cls_sum += cls.item()
            tri_sum += tri.item()
            steps += 1
            if log.batch_audit is not None:
                log.batch_audit.append(
                    {
                        "domain": d,
                        "sample_ids": batch.sample_ids.tolist(),
                        "labels": batch.labels.tolist(),
                    }
                )
    log.mean_cls = cls_sum / steps if steps else 0.0
    log.mean_tri = tri_sum / steps if steps else 0.0
    log.wall_time = time.perf_counter() - t0
    return log


def _dump_diagnostics(out_dir: Optional[Path], backbone: Backbone, batch, epoch: int, domain: int, exc) -> None:
    if out_dir is None:
        return
    states = {}
    for name, st in backbone.norm_states().items():
        states[name] = {
            "running_mean_absmax": float(np.abs(st.running_mean).max()),
            "running_var_max": float(st.running_var.max()),
            "batch_count": st.batch_count.tolist(),
        }
    dump = {
        "epoch": epoch,
        "domain": domain,
        "error": str(exc),
        "sample_ids": batch.sample_ids.tolist(),
        "labels": batch.labels.tolist(),
        "norm_states": states,
    }
    (Path(out_dir) / "failure_dump.json").write_text(json.dumps(dump, indent=2, sort_keys=True), encoding="utf-8")


def _supervised_label_arrays(dataset: Dataset, domains: List[int]) -> Dict[int, np.ndarray]:
    out = {}
    for d in domains:
        ids = dataset.identities(d, "train")
        if (ids < 0).any():
            raise DatasetError(f"domain {d}: identities required for supervised training")
        uniq = np.unique(ids)
        remap = {int(v): i for i, v in enumerate(uniq)}
        out[d] = np.array([remap[int(v)] for v in ids], dtype=np.int64)
    return out


def run(
    train_cfg: TrainConfig,
    model_cfg: ModelConfig,
    dataset: Dataset,
    out_dir,
    resume: bool = False,
) -> RunResult:
    """Full training run; emits per-epoch checkpoints, a line-delimited log,
    and a summary. Resuming restarts from the latest checkpoint and
    reproduces the uninterrupted run exactly.
    """
    out = Path(out_dir)
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    log_path = out / "run_log.jsonl"

    domains = list(train_cfg.train_domains) if train_cfg.train_domains is not None else list(dataset.domains)
    for d in domains:
        if d not in dataset.domains:
            raise DatasetError(f"train domain {d} not present in dataset (has {dataset.domains})")
    model_cfg = replace(model_cfg, num_domains=len(domains), seed=train_cfg.seed)

    rng = np.random.default_rng(np.random.SeedSequence([train_cfg.seed, 11]))
    start_epoch = 0
    epoch_logs: List[EpochLog] = []

    if resume:
        existing = sorted(ckpt_dir.glob("epoch_*.ckpt"))
        if not existing:
            raise PipelineError(f"--resume requested but no checkpoints in {ckpt_dir}")
        backbone, heads, opt_state, epoch, extra = load_checkpoint(existing[-1])
        if backbone.config != model_cfg:
            raise PipelineError("checkpoint model config does not match the requested configuration")
        opt = Adam(
            lambda: {**backbone.named_parameters(), **heads.named_parameters()},
            lr=train_cfg.learning_rate,
            betas=train_cfg.betas,
            eps=train_cfg.adam_eps,
        )
        if opt_state is not None:
            opt.load_state_dict(opt_state)
        rng.bit_generator.state = extra["rng_state"]
        start_epoch = epoch + 1
        if log_path.is_file():
            kept = []
            for line in log_path.read_text(encoding="utf-8").splitlines():
                if line.strip() and json.loads(line)["epoch"] <= epoch:
                    kept.append(line)
            log_path.write_text("\n".join(kept) + ("\n" if kept else ""), encoding="utf-8")
    else:
        backbone = Backbone(model_cfg)
        heads = ClassifierBank(model_cfg.embedding_dim)
        opt = Adam(
            lambda: {**backbone.named_parameters(), **heads.named_parameters()},
            lr=train_cfg.learning_rate,
            betas=train_cfg.betas,
            eps=train_cfg.adam_eps,
        )
        log_path.write_text("", encoding="utf-8")

    truth = {d: dataset.identities(d, "train") for d in domains}
    has_truth = {d: bool((truth[d] >= 0).all()) for d in domains}

    supervised = train_cfg.mode == "supervisedDG"
    if supervised:
        label_arrays = _supervised_label_arrays(dataset, domains)
        if start_epoch == 0:
            for path_index, d in enumerate(domains):
                heads.rebuild(path_index, int(label_arrays[d].max()) + 1, rng)

    t_start = time.perf_counter()
    for epoch in range(start_epoch, train_cfg.epochs):
        per_domain: Dict[int, dict] = {}
        if supervised:
            assignments = {d: label_arrays[d] for d in domains}
            for d in domains:
                per_domain[d] = {
                    "num_clusters": int(label_arrays[d].max()) + 1,
                    "num_noise": 0,
                    "ami": 1.0 if has_truth[d] else None,
                    "fmi": 1.0 if has_truth[d] else None,
                }
        else:
            features = {
                path_index: extract_features(dataset, d, backbone, path_index, train_cfg.eval_batch)
                for path_index, d in enumerate(domains)
            }
            opt.drop_state("head.")
            cluster_map = relabel(features, train_cfg.dbscan, heads, rng, train_cfg.dbscan_eps_quantile)
            assignments = {}
            for path_index, d in enumerate(domains):
                assignment = cluster_map[path_index]
                assignments[d] = assignment.labels
                ami, fmi = _cluster_quality(assignment, truth[d] if has_truth[d] else None)
                per_domain[d] = {
                    "num_clusters": assignment.num_clusters,
                    "num_noise": assignment.num_noise,
                    "ami": ami,
                    "fmi": fmi,
                }

        log = train_epoch(backbone, heads, opt, dataset, domains, assignments, train_cfg, rng, epoch, out)
        for d, info in per_domain.items():
            log.per_domain.setdefault(d, {}).update(info)
        epoch_logs.append(log)
        with open(log_path, "a", encoding="utf-8") as fh:
            fh.write(log.to_json_line() + "\n")

        extra = {
            "rng_state": rng.bit_generator.state,
            "train_domains": domains,
            "train_config": train_cfg.to_dict(),
        }
        save_checkpoint(
            ckpt_dir / f"epoch_{epoch:04d}.ckpt",
            backbone,
            heads,
            opt.state_dict(),
            epoch=epoch,
            extra=extra,
        )

    final_ckpt = ckpt_dir / f"epoch_{train_cfg.epochs - 1:04d}.ckpt"
    summary = {
        "mode": train_cfg.mode,
        "epochs": train_cfg.epochs,
        "train_domains": domains,
        "final_per_domain": {str(d): v for d, v in (epoch_logs[-1].per_domain if epoch_logs else {}).items()},
        "final_mean_cls": epoch_logs[-1].mean_cls if epoch_logs else None,
        "final_mean_tri": epoch_logs[-1].mean_tri if epoch_logs else None,
        "total_wall_time": time.perf_counter() - t_start,
        "final_checkpoint": final_ckpt.name,
    }
    if train_cfg.mode == "UDAwoSL":
        # sources double as targets: score each one's own query/gallery split
        from .evaluation import evaluate

        source_eval = {}
        for path_index, d in enumerate(domains):
            if not dataset.select(d, "query") or not dataset.select(d, "gallery"):
                continue
            report = evaluate(backbone, dataset, d, feature_modes=("fused",))
            source_eval[str(d)] = report.modes["fused"].to_dict()
        summary["source_eval"] = source_eval
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return RunResult(out_dir=out, final_checkpoint=final_ckpt, epoch_logs=epoch_logs, summary=summary)
