"""Command-line entry point: dataset generation, training, retrieval and
clustering evaluation, and embedding export.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numerical
failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import __version__
from .autodiff import NumericalError
from .clustering import NOISE, adjusted_mutual_info, fowlkes_mallows
from .data import DatasetError, SynthConfig, generate_synthetic, load_dataset, merge_datasets
from .evaluation import EvaluationError, evaluate, export_embeddings
from .figures import (
    save_cluster_quality_figure,
    save_eval_report_figure,
    save_projection_figure,
    save_training_curves_figure,
)
from .model import CheckpointError, ModelConfig, ModelError, load_checkpoint
from .pipeline import PipelineError, TrainConfig, TrainingDiverged, extract_features, run

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

_CONFIG_ERRORS = (PipelineError, ModelError, EvaluationError, ValueError, KeyError, TypeError)


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors exit 1, not argparse's 2
        self.print_usage(sys.stderr)
        raise CliError(message, EXIT_USAGE)


def _utc_now() -> str:
    return datetime.now(timezone.utc).isoformat()


def _read_config(path: Optional[str]) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise CliError(f"config file not found: {p}", EXIT_USAGE)
    try:
        return json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CliError(f"config parse error in {p}: line {exc.lineno}, column {exc.colno}: {exc.msg}", EXIT_USAGE)


class RunManifest:
    """Written before work starts, finalized (with artifact hashes) on exit."""

    def __init__(self, out_dir: Path, argv: List[str], config: dict, seed: Optional[int]):
        self.path = Path(out_dir) / "run_manifest.json"
        self.payload = {
            "command": argv,
            "config": config,
            "seed": seed,
            "tool_version": __version__,
            "started_at": _utc_now(),
            "ended_at": None,
            "status": "running",
            "artifacts": {},
        }
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        self._write()

    def _write(self) -> None:
        self.path.write_text(json.dumps(self.payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    def finalize(self, status: str, error: Optional[str] = None) -> None:
        self.payload["status"] = status
        self.payload["ended_at"] = _utc_now()
        if error:
            self.payload["error"] = error
        artifacts = {}
        for p in sorted(self.path.parent.rglob("*")):
            if p.is_file() and p != self.path:
                artifacts[str(p.relative_to(self.path.parent))] = hashlib.sha256(p.read_bytes()).hexdigest()
        self.payload["artifacts"] = artifacts
        self._write()


def _load_datasets(paths: List[str]):
    try:
        return merge_datasets([load_dataset(p) for p in paths])
    except DatasetError:
        raise


# ---------------------------------------------------------------------------
# Subcommands


def cmd_synth(args) -> int:
    raw = _read_config(args.config)
    try:
        cfg = SynthConfig.from_dict(raw) if raw else SynthConfig()
        if args.seed is not None:
            cfg = SynthConfig.from_dict({**cfg.to_dict(), "seed": args.seed})
    except DatasetError as exc:
        raise CliError(str(exc), EXIT_USAGE)
    manifest = RunManifest(Path(args.out), sys.argv[1:], cfg.to_dict(), cfg.seed)
    try:
        generate_synthetic(cfg, args.out)
        ds = load_dataset(args.out)
    except DatasetError as exc:
        manifest.finalize("failed", str(exc))
        raise CliError(str(exc), EXIT_DATA)
    counts = {d: {s: len(ds.select(d, s)) for s in ("train", "query", "gallery")} for d in ds.domains}
    print(f"generated {len(ds.records)} samples across {len(ds.domains)} domains in {args.out}")
    for d, c in counts.items():
        print(f"  domain {d}: train={c['train']} query={c['query']} gallery={c['gallery']}")
    manifest.finalize("completed")
    return EXIT_OK


def _split_configs(raw: dict) -> tuple:
    raw = dict(raw)
    model_raw = raw.pop("model", {})
    try:
        model_cfg = ModelConfig.from_dict(model_raw) if model_raw else ModelConfig()
        train_cfg = TrainConfig.from_dict(raw) if raw else TrainConfig()
    except _CONFIG_ERRORS as exc:
        raise CliError(f"bad config: {exc}", EXIT_USAGE)
    except (DatasetError,) as exc:  # BatchSpec et al. raise DatasetError
        raise CliError(f"bad config: {exc}", EXIT_USAGE)
    return train_cfg, model_cfg


def _limit_threads(n: int) -> None:
    """Cap intra-op (BLAS) parallelism; results change only by reassociation."""
    if n < 1:
        raise CliError(f"--threads must be >= 1, got {n}", EXIT_USAGE)
    try:
        import threadpoolctl

        threadpoolctl.threadpool_limits(n)
    except ImportError:
        if n == 1:
            print("warning: threadpoolctl unavailable; cannot force single-threaded math", file=sys.stderr)


def cmd_train(args) -> int:
    _limit_threads(args.threads)
    raw = _read_config(args.config)
    train_cfg, model_cfg = _split_configs(raw)
    overrides = {}
    if args.mode is not None:
        overrides["mode"] = args.mode
    if args.seed is not None:
        overrides["seed"] = args.seed
    if overrides:
        train_cfg = TrainConfig.from_dict({**train_cfg.to_dict(), **overrides})
    manifest = RunManifest(
        Path(args.out), sys.argv[1:], {"train": train_cfg.to_dict(), "model": model_cfg.to_dict()}, train_cfg.seed
    )
    try:
        dataset = _load_datasets(args.data)
        result = run(train_cfg, model_cfg, dataset, args.out, resume=args.resume)
    except TrainingDiverged as exc:
        manifest.finalize("failed", str(exc))
        raise CliError(str(exc), EXIT_NUMERIC)
    except (DatasetError, CheckpointError) as exc:
        manifest.finalize("failed", str(exc))
        raise CliError(str(exc), EXIT_DATA)
    except (PipelineError, ModelError) as exc:
        manifest.finalize("failed", str(exc))
        raise CliError(str(exc), EXIT_USAGE)
    for log in result.epoch_logs:
        clusters = {d: info.get("num_clusters") for d, info in sorted(log.per_domain.items())}
        print(
            f"epoch {log.epoch}: cls={log.mean_cls:.4f} tri={log.mean_tri:.4f} "
            f"clusters={clusters} ({log.wall_time:.1f}s)"
        )
    records = [json.loads(line) for line in (Path(args.out) / "run_log.jsonl").read_text().splitlines() if line]
    if records:
        save_training_curves_figure(records, Path(args.out) / "training_curves.png")
    print(f"final checkpoint: {result.final_checkpoint}")
    manifest.finalize("completed")
    return EXIT_OK


def _load_model(path: str):
    try:
        return load_checkpoint(path)
    except (CheckpointError, FileNotFoundError, OSError) as exc:
        raise CliError(f"cannot load checkpoint {path}: {exc}", EXIT_DATA)


def cmd_eval(args) -> int:
    backbone, heads, _, _, _ = _load_model(args.checkpoint)
    out_dir = Path(args.out)
    manifest = RunManifest(out_dir, sys.argv[1:], {"paths": args.paths}, None)
    try:
        dataset = _load_datasets([args.data])
        target = args.target_domain if args.target_domain is not None else dataset.domains[-1]
        if args.paths == "all":
            modes = [f"path_{d}" for d in range(backbone.num_domains)] + ["fused"]
        elif args.paths == "fused":
            modes = ["fused"]
        else:
            try:
                modes = [f"path_{int(args.paths)}"]
            except ValueError:
                raise CliError(f"--paths must be 'fused', 'all', or a path index, got {args.paths!r}", EXIT_USAGE)
        report = evaluate(backbone, dataset, target, modes)
    except DatasetError as exc:
        manifest.finalize("failed", str(exc))
        raise CliError(str(exc), EXIT_DATA)
    except EvaluationError as exc:
        manifest.finalize("failed", str(exc))
        raise CliError(str(exc), EXIT_USAGE)
    (out_dir / "eval_report.json").write_text(report.to_json(), encoding="utf-8")
    save_eval_report_figure(report.to_dict(), out_dir / "eval_report.png")
    ks = sorted(next(iter(report.modes.values())).cmc)
    header = ["mAP"] + [f"Rank-{k}" for k in ks]
    print(f"target domain {target}")
    print(f"{'':14s}" + "".join(f"{h:>10s}" for h in header))
    for name in sorted(report.modes):
        r = report.modes[name]
        row = [r.map] + [r.cmc[k] for k in ks]
        print(f"{name:14s}" + "".join(f"{100.0 * v:10.1f}" for v in row))
    manifest.finalize("completed")
    return EXIT_OK


def cmd_cluster_eval(args) -> int:
    backbone, _, _, _, extra = _load_model(args.checkpoint)
    out_dir = Path(args.out)
    manifest = RunManifest(out_dir, sys.argv[1:], {}, None)
    try:
        dataset = _load_datasets([args.data])
        from .clustering import DbscanConfig, dbscan

        dbs_raw = (extra or {}).get("train_config", {}).get("dbscan")
        cfg = DbscanConfig(**dbs_raw) if dbs_raw else DbscanConfig()
        train_domains = (extra or {}).get("train_domains")
        if train_domains is None:
            train_domains = dataset.domains[: backbone.num_domains]
        per_domain = {}
        for path_index, d in enumerate(train_domains):
            feats = extract_features(dataset, d, backbone, path_index)
            assignment = dbscan(feats, cfg)
            info = {"num_clusters": assignment.num_clusters, "num_noise": assignment.num_noise}
            truth = dataset.identities(d, "train")
            mask = assignment.labels != NOISE
            if (truth >= 0).all() and mask.any():
                info["ami"] = float(adjusted_mutual_info(assignment.labels[mask], truth[mask]))
                info["fmi"] = float(fowlkes_mallows(assignment.labels[mask], truth[mask]))
            else:
                info["ami"] = None
                info["fmi"] = None
                info["notice"] = "no ground-truth identities; reporting cluster counts only"
            per_domain[d] = info
    except DatasetError as exc:
        manifest.finalize("failed", str(exc))
        raise CliError(str(exc), EXIT_DATA)
    (out_dir / "cluster_report.json").write_text(
        json.dumps({str(d): v for d, v in per_domain.items()}, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    save_cluster_quality_figure(per_domain, out_dir / "cluster_report.png")
    for d, info in sorted(per_domain.items()):
        if info.get("ami") is not None:
            print(f"domain {d}: clusters={info['num_clusters']} noise={info['num_noise']} "
                  f"AMI={info['ami']:.3f} FMI={info['fmi']:.3f}")
        else:
            print(f"domain {d}: clusters={info['num_clusters']} noise={info['num_noise']} (no ground truth)")
    manifest.finalize("completed")
    return EXIT_OK


def cmd_export(args) -> int:
    backbone, _, _, _, _ = _load_model(args.checkpoint)
    try:
        dataset = _load_datasets([args.data])
        out = export_embeddings(backbone, dataset, args.out_file, project_2d=args.project_2d)
    except DatasetError as exc:
        raise CliError(str(exc), EXIT_DATA)
    lines = Path(out).read_text(encoding="utf-8").splitlines()
    print(f"wrote {len(lines) - 1} rows to {out}")
    if args.project_2d:
        rows = np.array([[float(v) for v in line.split("\t")] for line in lines[1:]])
        save_projection_figure(rows, Path(out).with_suffix(".png"))
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="dsreid", description="Domain-specific adaptive normalization at desk scale")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic multi-domain dataset")
    p.add_argument("--config", default=None, help="JSON config for the generator")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="run the alternating training loop")
    p.add_argument("--config", default=None, help="JSON config (train fields + optional 'model' section)")
    p.add_argument("data", nargs="+", help="dataset directories")
    p.add_argument("--out", required=True, help="run output directory")
    p.add_argument("--mode", choices=["unDG", "supervisedDG", "UDAwoSL"], default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--resume", action="store_true", help="resume from the latest checkpoint in --out")
    p.add_argument(
        "--threads",
        type=int,
        default=int(os.environ.get("DSREID_THREADS", "1")),
        help="intra-op parallelism (default: DSREID_THREADS or 1; kept at 1 in tests)",
    )
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="retrieval evaluation on a target domain")
    p.add_argument("checkpoint")
    p.add_argument("data", help="dataset directory")
    p.add_argument("--target-domain", type=int, default=None, help="default: last domain in the dataset")
    p.add_argument("--paths", default="all", help="'fused', 'all', or a path index")
    p.add_argument("--out", required=True, help="report output directory")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("cluster-eval", help="clustering quality of the training domains")
    p.add_argument("checkpoint")
    p.add_argument("data", help="dataset directory")
    p.add_argument("--out", required=True, help="report output directory")
    p.set_defaults(func=cmd_cluster_eval)

    p = sub.add_parser("export", help="export per-path embeddings as TSV")
    p.add_argument("checkpoint")
    p.add_argument("data", help="dataset directory")
    p.add_argument("out_file", help="output TSV path")
    p.add_argument("--project-2d", action="store_true", help="export a shared 2-D PCA projection")
    p.set_defaults(func=cmd_export)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (DatasetError, CheckpointError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, TrainingDiverged) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
