"""Synthetic multi-domain datasets, their on-disk format, and batch sampling.

Each identity is a low-dimensional latent signature rendered into a sinusoidal
pattern; every domain re-renders the same identities under its own style
(per-channel gain/bias, blur, noise) plus a per-camera perturbation, which
gives a controllable domain gap. The on-disk layout is a plain-text manifest
plus one small binary payload per image (see docs/formats.md).
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence

import numpy as np

from .clustering import NOISE

__all__ = [
    "DatasetError",
    "UNKNOWN_IDENTITY",
    "DomainStyle",
    "SynthConfig",
    "BatchSpec",
    "SampleRecord",
    "DomainBatch",
    "Dataset",
    "make_domain_styles",
    "make_heldout_styles",
    "generate_synthetic",
    "load_dataset",
    "merge_datasets",
    "merge_domains_view",
    "sample_pk_batch",
    "augment",
]

UNKNOWN_IDENTITY = -1

_PAYLOAD_MAGIC = b"DSIMG1\x00\x00"
_MANIFEST_NAME = "manifest.tsv"
_META_NAME = "meta.json"


class DatasetError(Exception):
    pass


@dataclass(frozen=True)
class DomainStyle:
    channel_gain: tuple
    channel_bias: tuple
    blur_level: float = 0.0
    noise_sigma: float = 0.02

    def vector(self) -> np.ndarray:
        """Style coordinates: log-gain and bias. Log keeps gain distances
        meaningful at any magnitude (gains are multiplicative)."""
        gains = np.asarray(self.channel_gain, dtype=np.float64)
        if (gains <= 0).any():
            raise DatasetError("channel gains must be positive")
        return np.concatenate([np.log(gains), np.asarray(self.channel_bias, dtype=np.float64)])


def make_domain_styles(
    num_domains: int,
    style_distance: float,
    channels: int = 3,
    blur_level: float = 0.0,
    noise_sigma: float = 0.02,
    seed: int = 0,
) -> tuple:
    """Domain styles with pairwise style-vector distance ~ style_distance."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 5]))
    if num_domains == 2:
        # Exact pairwise distance for the common two-domain case.
        direction = rng.normal(size=2 * channels)
        direction /= np.linalg.norm(direction)
        offsets = [direction * (style_distance / 2.0), -direction * (style_distance / 2.0)]
    else:
        offsets = []
        for _ in range(num_domains):
            direction = rng.normal(size=2 * channels)
            direction /= np.linalg.norm(direction)
            offsets.append(direction * (style_distance / np.sqrt(2.0)))
    styles = []
    for d in range(num_domains):
        offset = offsets[d]
        gain = np.exp(offset[:channels])  # multiplicative gains, always positive
        bias = offset[channels:]
        styles.append(
            DomainStyle(
                channel_gain=tuple(float(g) for g in gain),
                channel_bias=tuple(float(b) for b in bias),
                blur_level=blur_level,
                noise_sigma=noise_sigma,
            )
        )
    return tuple(styles)


def make_heldout_styles(
    style_distance: float,
    channels: int = 3,
    blur_level: float = 0.0,
    noise_sigma: float = 0.02,
    seed: int = 0,
    num_sources: int = 2,
) -> tuple:
    """Styles for held-out-domain experiments: sources spaced evenly on a
    circle of radius d/2 in a random style plane, target on an orthogonal
    direction at the same radius. Every source sits at the same distance
    from the target, keeping the per-source paths comparable. Returns
    num_sources + 1 styles, target last."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
    dim = 2 * channels
    basis = np.linalg.qr(rng.normal(size=(dim, 3)))[0].T  # 3 orthonormal directions
    u1, u2, w = basis[0], basis[1], basis[2]
    radius = style_distance / 2.0
    offsets = []
    for i in range(num_sources):
        angle = 2.0 * np.pi * i / num_sources
        offsets.append(radius * (np.cos(angle) * u1 + np.sin(angle) * u2))
    offsets.append(radius * w)
    styles = []
    for offset in offsets:
        styles.append(
            DomainStyle(
                channel_gain=tuple(float(g) for g in np.exp(offset[:channels])),
                channel_bias=tuple(float(b) for b in offset[channels:]),
                blur_level=blur_level,
                noise_sigma=noise_sigma,
            )
        )
    return tuple(styles)


@dataclass(frozen=True)
class SynthConfig:
    num_domains: int = 2
    identities_per_domain: int = 45
    eval_identities: int = 15
    images_per_identity: int = 8
    image_size: tuple = (3, 32, 16)
    domain_style: tuple = ()
    identity_signature_dim: int = 8
    num_cameras: int = 2
    min_style_distance: float = 0.05
    intra_class_jitter: float = 0.3  # spread of same-identity images, in signature units
    # Shared pools render the same latent identities in every domain (the
    # degenerate zero-style fixture relies on this); disjoint pools give each
    # domain its own people, as real multi-dataset setups have.
    shared_identities: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.num_domains < 1:
            raise DatasetError("need at least one domain")
        if not 0 < self.eval_identities < self.identities_per_domain:
            raise DatasetError("eval_identities must be in (0, identities_per_domain)")
        if self.images_per_identity < self.num_cameras:
            raise DatasetError("need at least one image per camera per identity")
        if self.num_cameras < 2:
            raise DatasetError("query/gallery evaluation requires >= 2 cameras")
        if len(self.image_size) != 3 or any(s < 1 for s in self.image_size):
            raise DatasetError(f"bad image_size {self.image_size}")
        styles = self.domain_style
        if not styles:
            styles = make_domain_styles(self.num_domains, 1.0, self.image_size[0], seed=self.seed)
            object.__setattr__(self, "domain_style", styles)
        if len(self.domain_style) != self.num_domains:
            raise DatasetError("domain_style must have one entry per domain")
        for st in self.domain_style:
            if len(st.channel_gain) != self.image_size[0] or len(st.channel_bias) != self.image_size[0]:
                raise DatasetError("style gain/bias length must equal channel count")
        if self.min_style_distance > 0 and self.num_domains > 1:
            for i in range(self.num_domains):
                for j in range(i + 1, self.num_domains):
                    dist = float(
                        np.linalg.norm(self.domain_style[i].vector() - self.domain_style[j].vector())
                    )
                    if dist < self.min_style_distance:
                        raise DatasetError(
                            f"domains {i} and {j} have style distance {dist:.4f} < "
                            f"min_style_distance {self.min_style_distance}; the domain-gap "
                            "premise requires distinct styles (set min_style_distance=0 for "
                            "the degenerate fixture)"
                        )

    @property
    def train_identities(self) -> int:
        return self.identities_per_domain - self.eval_identities

    def to_dict(self) -> dict:
        d = {
            "num_domains": self.num_domains,
            "identities_per_domain": self.identities_per_domain,
            "eval_identities": self.eval_identities,
            "images_per_identity": self.images_per_identity,
            "image_size": list(self.image_size),
            "identity_signature_dim": self.identity_signature_dim,
            "num_cameras": self.num_cameras,
            "min_style_distance": self.min_style_distance,
            "intra_class_jitter": self.intra_class_jitter,
            "shared_identities": self.shared_identities,
            "seed": self.seed,
            "domain_style": [
                {
                    "channel_gain": list(st.channel_gain),
                    "channel_bias": list(st.channel_bias),
                    "blur_level": st.blur_level,
                    "noise_sigma": st.noise_sigma,
                }
                for st in self.domain_style
            ],
        }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        d = dict(d)
        d["image_size"] = tuple(d.get("image_size", (3, 32, 16)))
        if "domain_style" in d:
            d["domain_style"] = tuple(
                DomainStyle(
                    channel_gain=tuple(st["channel_gain"]),
                    channel_bias=tuple(st["channel_bias"]),
                    blur_level=st.get("blur_level", 0.0),
                    noise_sigma=st.get("noise_sigma", 0.02),
                )
                for st in d["domain_style"]
            )
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise DatasetError(f"unknown config field(s): {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class BatchSpec:
    """P identities x K images per identity."""

    p: int = 16
    k: int = 4

    def __post_init__(self):
        if self.p < 2 or self.k < 1:
            raise DatasetError(f"batch spec needs p >= 2 and k >= 1, got {self.p}x{self.k}")

    @property
    def batch_size(self) -> int:
        return self.p * self.k


@dataclass(frozen=True)
class SampleRecord:
    sample_id: int
    domain_id: int
    identity: int
    camera_id: int
    split: str  # train | query | gallery
    path: str
    checksum: str


@dataclass
class DomainBatch:
    images: np.ndarray  # (n, c, h, w) float32
    domain_id: int
    labels: np.ndarray  # (n,) int64
    sample_ids: np.ndarray


class Dataset:
    """Loaded dataset: records plus eagerly-decoded image payloads."""

    def __init__(self, root: Path, records: List[SampleRecord], images: Dict[int, np.ndarray], meta: dict):
        self.root = Path(root)
        self.records = records
        self._images = images
        self.meta = meta
        self.domains = sorted({r.domain_id for r in records})
        self._by_domain_split: Dict[tuple, List[SampleRecord]] = {}
        for r in records:
            self._by_domain_split.setdefault((r.domain_id, r.split), []).append(r)

    def select(self, domain: int, split: str) -> List[SampleRecord]:
        return list(self._by_domain_split.get((domain, split), []))

    def restrict(self, domains) -> "Dataset":
        """View containing only the given domains (payloads shared)."""
        keep = set(domains)
        records = [r for r in self.records if r.domain_id in keep]
        if not records:
            raise DatasetError(f"no records left after restricting to domains {sorted(keep)}")
        return Dataset(self.root, records, self._images, dict(self.meta))

    def image(self, sample_id: int) -> np.ndarray:
        return self._images[sample_id]

    def stack(self, records: Sequence[SampleRecord]) -> np.ndarray:
        return np.stack([self._images[r.sample_id] for r in records])

    def identities(self, domain: int, split: str) -> np.ndarray:
        return np.array([r.identity for r in self.select(domain, split)], dtype=np.int64)

    def has_identities(self, domain: int) -> bool:
        return all(r.identity != UNKNOWN_IDENTITY for r in self.select(domain, "train"))


# ---------------------------------------------------------------------------
# Rendering


def _stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *key]))


def _render_basis(cfg: SynthConfig) -> np.ndarray:
    """Fixed sinusoidal basis (s, c, h, w) shared by all identities."""
    c, h, w = cfg.image_size
    s = cfg.identity_signature_dim
    rng = _stream(cfg.seed, 2)
    ys = np.arange(h)[:, None] / h
    xs = np.arange(w)[None, :] / w
    basis = np.empty((s, c, h, w), dtype=np.float64)
    for j in range(s):
        for ch in range(c):
            fy, fx = rng.uniform(0.5, 3.0, size=2)
            phase = rng.uniform(0.0, 2.0 * np.pi)
            basis[j, ch] = np.sin(2.0 * np.pi * (fy * ys + fx * xs) + phase)
    return basis / np.sqrt(s)


def _box_blur(img: np.ndarray, level: float) -> np.ndarray:
    """Blend each pixel with its 3x3 neighborhood mean, strength in [0, 1]."""
    t = float(np.clip(level, 0.0, 1.0))
    if t == 0.0:
        return img
    padded = np.pad(img, ((0, 0), (1, 1), (1, 1)), mode="edge")
    acc = np.zeros_like(img)
    for dy in range(3):
        for dx in range(3):
            acc += padded[:, dy : dy + img.shape[1], dx : dx + img.shape[2]]
    return (1.0 - t) * img + t * acc / 9.0


def _camera_params(cfg: SynthConfig, camera: int) -> tuple:
    rng = _stream(cfg.seed, 4, camera)
    gain = 1.0 + rng.uniform(-0.05, 0.05)
    bias = rng.uniform(-0.05, 0.05)
    return gain, bias


def _render_image(
    cfg: SynthConfig,
    basis: np.ndarray,
    signature: np.ndarray,
    domain: int,
    identity: int,
    image_index: int,
    camera: int,
) -> np.ndarray:
    # With shared pools, identity content and per-image jitter are
    # domain-independent so that identical styles yield identical images
    # across domains.
    jitter_key = 0 if cfg.shared_identities else domain + 1
    jitter_rng = _stream(cfg.seed, 3, jitter_key, identity, image_index)
    jitter = jitter_rng.normal(0.0, cfg.intra_class_jitter, size=signature.shape)
    img = np.tensordot(signature + jitter, basis, axes=1)  # (c, h, w)
    img = 0.5 + 0.35 * img
    cam_gain, cam_bias = _camera_params(cfg, camera)
    img = cam_gain * img + cam_bias
    style = cfg.domain_style[domain]
    img = _box_blur(img, style.blur_level)
    gain = np.asarray(style.channel_gain, dtype=np.float64)[:, None, None]
    bias = np.asarray(style.channel_bias, dtype=np.float64)[:, None, None]
    img = gain * img + bias
    if style.noise_sigma > 0:
        noise_rng = _stream(cfg.seed, 6, domain, identity, image_index)
        img = img + noise_rng.normal(0.0, style.noise_sigma, size=img.shape)
    return img.astype(np.float32)


def _write_payload(path: Path, img: np.ndarray) -> str:
    c, h, w = img.shape
    body = bytearray()
    body += _PAYLOAD_MAGIC
    for dim in (c, h, w):
        body += int(dim).to_bytes(4, "little")
    body += np.ascontiguousarray(img, dtype="<f4").tobytes()
    path.write_bytes(bytes(body))
    return f"{zlib.crc32(bytes(body)):08x}"


def _read_payload(path: Path) -> np.ndarray:
    raw = path.read_bytes()
    if len(raw) < len(_PAYLOAD_MAGIC) + 12 or raw[: len(_PAYLOAD_MAGIC)] != _PAYLOAD_MAGIC:
        raise DatasetError(f"bad payload header in {path}")
    off = len(_PAYLOAD_MAGIC)
    c, h, w = (int.from_bytes(raw[off + 4 * i : off + 4 * i + 4], "little") for i in range(3))
    off += 12
    expected = c * h * w * 4
    if len(raw) - off != expected:
        raise DatasetError(f"payload size mismatch in {path}")
    return np.frombuffer(raw[off:], dtype="<f4").reshape(c, h, w).copy()


def generate_synthetic(cfg: SynthConfig, out_dir) -> Path:
    """Render the configured dataset to disk; deterministic for a fixed seed."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    basis = _render_basis(cfg)
    if cfg.shared_identities:
        sig_rng = _stream(cfg.seed, 1)
        tables = [sig_rng.normal(0.0, 1.0, size=(cfg.identities_per_domain, cfg.identity_signature_dim))]
    else:
        tables = [
            _stream(cfg.seed, 1, d + 1).normal(0.0, 1.0, size=(cfg.identities_per_domain, cfg.identity_signature_dim))
            for d in range(cfg.num_domains)
        ]

    lines = []
    sample_id = 0
    train_ids = range(cfg.train_identities)
    eval_ids = range(cfg.train_identities, cfg.identities_per_domain)
    for d in range(cfg.num_domains):
        signatures = tables[0] if cfg.shared_identities else tables[d]
        dom_dir = out / f"domain_{d}"
        dom_dir.mkdir(exist_ok=True)
        for identity in train_ids:
            for k in range(cfg.images_per_identity):
                cam = k % cfg.num_cameras
                img = _render_image(cfg, basis, signatures[identity], d, identity, k, cam)
                rel = f"domain_{d}/train_{sample_id:06d}.bin"
                checksum = _write_payload(out / rel, img)
                lines.append((sample_id, d, identity, cam, "train", rel, checksum))
                sample_id += 1
        for identity in eval_ids:
            per_cam_seen: Dict[int, int] = {}
            for k in range(cfg.images_per_identity):
                cam = k % cfg.num_cameras
                split = "query" if per_cam_seen.get(cam, 0) == 0 else "gallery"
                per_cam_seen[cam] = per_cam_seen.get(cam, 0) + 1
                img = _render_image(cfg, basis, signatures[identity], d, identity, k, cam)
                rel = f"domain_{d}/{split}_{sample_id:06d}.bin"
                checksum = _write_payload(out / rel, img)
                lines.append((sample_id, d, identity, cam, split, rel, checksum))
                sample_id += 1

    manifest = ["# sample_id\tdomain_id\tidentity\tcamera_id\tsplit\tpath\tchecksum"]
    manifest += ["\t".join(str(v) for v in line) for line in lines]
    (out / _MANIFEST_NAME).write_text("\n".join(manifest) + "\n", encoding="utf-8")
    (out / _META_NAME).write_text(
        json.dumps({"config": cfg.to_dict(), "format": "dsreid-dataset-v1"}, sort_keys=True, indent=2) + "\n",
        encoding="utf-8",
    )
    return out


def load_dataset(path) -> Dataset:
    """Load and validate a dataset directory (checksums, splits, invariants)."""
    root = Path(path)
    manifest = root / _MANIFEST_NAME
    if not manifest.is_file():
        raise DatasetError(f"no {_MANIFEST_NAME} in {root}")
    meta = {}
    meta_path = root / _META_NAME
    if meta_path.is_file():
        meta = json.loads(meta_path.read_text(encoding="utf-8"))

    records: List[SampleRecord] = []
    images: Dict[int, np.ndarray] = {}
    for lineno, line in enumerate(manifest.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 7:
            raise DatasetError(f"{manifest}:{lineno}: expected 7 fields, got {len(parts)}")
        sample_id, domain_id, identity, camera_id = (int(p) for p in parts[:4])
        split, rel, checksum = parts[4], parts[5], parts[6]
        if split not in ("train", "query", "gallery"):
            raise DatasetError(f"{manifest}:{lineno}: bad split {split!r}")
        payload = root / rel
        if not payload.is_file():
            raise DatasetError(f"sample {sample_id}: missing payload file {rel}")
        raw = payload.read_bytes()
        if f"{zlib.crc32(raw):08x}" != checksum:
            raise DatasetError(f"sample {sample_id}: checksum mismatch for {rel}")
        if split in ("query", "gallery") and identity == UNKNOWN_IDENTITY:
            raise DatasetError(f"sample {sample_id}: {split} records must carry an identity")
        if sample_id in images:
            raise DatasetError(f"duplicate sample_id {sample_id} in manifest")
        records.append(SampleRecord(sample_id, domain_id, identity, camera_id, split, rel, checksum))
        images[sample_id] = _read_payload(payload)

    if not records:
        raise DatasetError(f"{manifest} lists no records")
    ds = Dataset(root, records, images, meta)
    for d in ds.domains:
        train_ids = {r.identity for r in ds.select(d, "train") if r.identity != UNKNOWN_IDENTITY}
        eval_ids = {r.identity for r in ds.select(d, "query") + ds.select(d, "gallery")}
        overlap = train_ids & eval_ids
        if overlap:
            raise DatasetError(f"domain {d}: identities {sorted(overlap)} appear in both train and query/gallery")
    return ds


def merge_domains_view(dataset: Dataset, domain_id: int = 0) -> Dataset:
    """View of a dataset with every record assigned to one domain.

    The shared-path baseline trains on the union of the source domains as a
    single unlabeled pile; this view expresses that without copying payloads.
    """
    records = [
        SampleRecord(r.sample_id, domain_id, r.identity, r.camera_id, r.split, r.path, r.checksum)
        for r in dataset.records
    ]
    return Dataset(dataset.root, records, dataset._images, dict(dataset.meta, merged_domains=True))


def merge_datasets(datasets: Sequence[Dataset]) -> Dataset:
    """Combine datasets, renumbering domain and sample ids to stay unique."""
    if not datasets:
        raise DatasetError("no datasets to merge")
    if len(datasets) == 1:
        return datasets[0]
    records: List[SampleRecord] = []
    images: Dict[int, np.ndarray] = {}
    domain_offset = 0
    sample_offset = 0
    for ds in datasets:
        remap = {d: domain_offset + i for i, d in enumerate(ds.domains)}
        for r in ds.records:
            new_id = r.sample_id + sample_offset
            records.append(
                SampleRecord(new_id, remap[r.domain_id], r.identity, r.camera_id, r.split, r.path, r.checksum)
            )
            images[new_id] = ds.image(r.sample_id)
        domain_offset += len(ds.domains)
        sample_offset += max(r.sample_id for r in ds.records) + 1
    return Dataset(datasets[0].root, records, images, {"merged_from": [str(ds.root) for ds in datasets]})


# ---------------------------------------------------------------------------
# Sampling and augmentation


class DomainSkipped(Exception):
    """Raised when a domain has too few usable pseudo-identities this epoch."""


def sample_pk_batch(
    dataset: Dataset,
    domain: int,
    labels: np.ndarray,
    spec: BatchSpec,
    rng: np.random.Generator,
) -> DomainBatch:
    """Sample a P x K single-domain batch; noise-labeled samples never appear.

    `labels` holds one label per train record of the domain (cluster id or
    true identity; NOISE = -1 entries are excluded). Identities with fewer
    than K images are sampled with replacement; if fewer than P usable labels
    exist the batch uses all of them.
    """
    train = dataset.select(domain, "train")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (len(train),):
        raise DatasetError(f"labels shape {labels.shape} does not match {len(train)} train records")
    usable = {}
    for idx, lab in enumerate(labels):
        if lab == NOISE:
            continue
        usable.setdefault(int(lab), []).append(idx)
    if len(usable) < 2:
        raise DomainSkipped(f"domain {domain}: {len(usable)} usable pseudo-identities (< 2)")
    chosen = sorted(usable)
    if len(chosen) > spec.p:
        chosen = list(rng.choice(np.array(chosen), size=spec.p, replace=False))
    picked_idx: List[int] = []
    batch_labels: List[int] = []
    for lab in chosen:
        pool = np.array(usable[int(lab)])
        replace = pool.size < spec.k
        sel = rng.choice(pool, size=spec.k, replace=replace)
        picked_idx.extend(int(i) for i in sel)
        batch_labels.extend([int(lab)] * spec.k)
    recs = [train[i] for i in picked_idx]
    return DomainBatch(
        images=dataset.stack(recs).astype(np.float32),
        domain_id=domain,
        labels=np.array(batch_labels, dtype=np.int64),
        sample_ids=np.array([r.sample_id for r in recs], dtype=np.int64),
    )


def augment(
    images: np.ndarray,
    rng: np.random.Generator,
    flip: bool = True,
    crop: bool = True,
    erase: bool = False,
) -> np.ndarray:
    """Per-image random horizontal flip and padded random crop.

    Padding scales with height (pad = max(1, h // 64)). Random erasing is off
    by default and only used by the source-as-target training mode.
    """
    out = np.array(images, dtype=np.float32)
    n, c, h, w = out.shape
    pad = max(1, h // 64)
    if h < 1 or w < 1:
        raise DatasetError("augment requires non-empty images")
    for i in range(n):
        if flip and rng.random() < 0.5:
            out[i] = out[i, :, :, ::-1]
        if crop:
            padded = np.pad(out[i], ((0, 0), (pad, pad), (pad, pad)))
            oy = int(rng.integers(0, 2 * pad + 1))
            ox = int(rng.integers(0, 2 * pad + 1))
            out[i] = padded[:, oy : oy + h, ox : ox + w]
        if erase and rng.random() < 0.5:
            eh = int(rng.integers(max(1, h // 8), max(2, h // 3)))
            ew = int(rng.integers(max(1, w // 8), max(2, w // 3)))
            oy = int(rng.integers(0, h - eh + 1))
            ox = int(rng.integers(0, w - ew + 1))
            out[i, :, oy : oy + eh, ox : ox + ew] = 0.0
    return out
