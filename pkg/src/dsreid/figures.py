"""Figure rendering for the report paths: every CLI command that emits a
report also saves a matplotlib figure next to it.
"""

from __future__ import annotations

from pathlib import Path
from typing import Dict, List

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

__all__ = [
    "save_eval_report_figure",
    "save_cluster_quality_figure",
    "save_training_curves_figure",
    "save_projection_figure",
]

# Keep savefig byte-stable across identical runs.
_SAVE_KW = {"dpi": 120, "metadata": {"Software": "dsreid"}}


def save_eval_report_figure(report: dict, out_png) -> Path:
    """CMC curves per feature mode plus an mAP bar chart."""
    out = Path(out_png)
    modes = report["modes"]
    fig, (ax_cmc, ax_map) = plt.subplots(1, 2, figsize=(9, 3.5))
    for name in sorted(modes):
        ks = sorted(int(k) for k in modes[name]["cmc"])
        vals = [modes[name]["cmc"][str(k)] for k in ks]
        ax_cmc.plot(ks, vals, marker="o", label=name)
    ax_cmc.set_xlabel("rank k")
    ax_cmc.set_ylabel("CMC accuracy")
    ax_cmc.set_ylim(0.0, 1.05)
    ax_cmc.legend(fontsize=8)
    ax_cmc.set_title(f"target domain {report['target_domain']}")

    names = sorted(modes)
    ax_map.bar(range(len(names)), [modes[n]["map"] for n in names])
    ax_map.set_xticks(range(len(names)))
    ax_map.set_xticklabels(names, rotation=30, ha="right", fontsize=8)
    ax_map.set_ylabel("mAP")
    ax_map.set_ylim(0.0, 1.0)
    fig.tight_layout()
    fig.savefig(out, **_SAVE_KW)
    plt.close(fig)
    return out


def save_cluster_quality_figure(per_domain: Dict[int, dict], out_png) -> Path:
    """Bar chart of AMI/FMI (or cluster counts when no ground truth)."""
    out = Path(out_png)
    domains = sorted(per_domain)
    fig, ax = plt.subplots(figsize=(6, 3.5))
    width = 0.35
    xs = np.arange(len(domains))
    amis = [per_domain[d].get("ami") for d in domains]
    if any(a is not None for a in amis):
        fmis = [per_domain[d].get("fmi") for d in domains]
        ax.bar(xs - width / 2, [a if a is not None else 0.0 for a in amis], width, label="AMI")
        ax.bar(xs + width / 2, [f if f is not None else 0.0 for f in fmis], width, label="FMI")
        ax.set_ylabel("agreement with identities")
        ax.set_ylim(0.0, 1.05)
    else:
        ax.bar(xs, [per_domain[d].get("num_clusters", 0) for d in domains], width, label="clusters")
        ax.set_ylabel("cluster count")
    ax.set_xticks(xs)
    ax.set_xticklabels([f"domain {d}" for d in domains])
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out, **_SAVE_KW)
    plt.close(fig)
    return out


def save_training_curves_figure(epoch_records: List[dict], out_png) -> Path:
    """Loss curves and per-domain cluster count / AMI trajectories."""
    out = Path(out_png)
    epochs = [rec["epoch"] for rec in epoch_records]
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.5))
    axes[0].plot(epochs, [rec["mean_cls"] for rec in epoch_records], label="classification")
    axes[0].plot(epochs, [rec["mean_tri"] for rec in epoch_records], label="triplet")
    axes[0].set_xlabel("epoch")
    axes[0].set_ylabel("mean loss")
    axes[0].legend(fontsize=8)

    domains = sorted({d for rec in epoch_records for d in rec["per_domain"]})
    for d in domains:
        counts = [rec["per_domain"].get(d, {}).get("num_clusters") for rec in epoch_records]
        axes[1].plot(epochs, counts, marker=".", label=f"domain {d}")
    axes[1].set_xlabel("epoch")
    axes[1].set_ylabel("clusters")
    axes[1].legend(fontsize=8)

    any_ami = False
    for d in domains:
        amis = [rec["per_domain"].get(d, {}).get("ami") for rec in epoch_records]
        if any(a is not None for a in amis):
            any_ami = True
            axes[2].plot(epochs, [a if a is not None else np.nan for a in amis], marker=".", label=f"domain {d}")
    axes[2].set_xlabel("epoch")
    axes[2].set_ylabel("AMI vs identities")
    if any_ami:
        axes[2].set_ylim(0.0, 1.05)
        axes[2].legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out, **_SAVE_KW)
    plt.close(fig)
    return out


def save_projection_figure(rows, out_png) -> Path:
    """Scatter of 2-D projected embeddings, colored by path id."""
    out = Path(out_png)
    rows = np.asarray(rows)
    paths = np.unique(rows[:, 2]).astype(int)
    fig, ax = plt.subplots(figsize=(5, 4))
    for p in paths:
        mask = rows[:, 2].astype(int) == p
        ax.scatter(rows[mask, 3], rows[mask, 4], s=8, alpha=0.7, label=f"path {p}")
    ax.set_xlabel("pc 1")
    ax.set_ylabel("pc 2")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out, **_SAVE_KW)
    plt.close(fig)
    return out
