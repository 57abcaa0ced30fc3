"""Configurable small CNN backbone with selectable per-block normalization,
a pooled embedding head, per-domain classifier heads, and checkpoint I/O.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .normalization import (
    DEFAULT_EPS,
    DEFAULT_MOMENTUM,
    AffineParams,
    DomainBNState,
    DSANLayer,
    batch_norm_domain,
    dson_forward,
    instance_norm,
)

__all__ = [
    "ModelError",
    "CheckpointError",
    "BlockSpec",
    "ModelConfig",
    "Backbone",
    "ClassifierBank",
    "save_checkpoint",
    "load_checkpoint",
]

NORM_KINDS = ("bn", "in", "ibn", "dsbn", "dsan", "dson")

_MAGIC = b"DSREIDC1"
_SCHEMA_VERSION = 1


class ModelError(Exception):
    pass


class CheckpointError(Exception):
    pass


@dataclass(frozen=True)
class BlockSpec:
    out_channels: int
    stride: int = 2
    norm_kind: str = "dsan"

    def __post_init__(self):
        if self.out_channels < 2 or self.out_channels % 2 != 0:
            raise ModelError(f"block channels must be even and >= 2, got {self.out_channels}")
        if self.stride not in (1, 2):
            raise ModelError(f"block stride must be 1 or 2, got {self.stride}")
        if self.norm_kind not in NORM_KINDS:
            raise ModelError(f"unknown norm kind {self.norm_kind!r}")


@dataclass(frozen=True)
class ModelConfig:
    blocks: tuple = (
        BlockSpec(32),
        BlockSpec(64),
        BlockSpec(128),
        BlockSpec(256),
    )
    input_channels: int = 3
    input_hw: tuple = (32, 16)
    embedding_dim: int = 64
    num_domains: int = 1
    kernel_size: int = 3
    norm_momentum: float = DEFAULT_MOMENTUM
    norm_eps: float = DEFAULT_EPS
    share_in_affine: bool = True
    enable_in_affine: bool = True
    dson_mix_weight: float = 0.5
    dson_learnable: bool = False
    seed: int = 0

    def __post_init__(self):
        if not self.blocks:
            raise ModelError("at least one block is required")
        if self.num_domains < 1:
            raise ModelError(f"num_domains must be >= 1, got {self.num_domains}")
        if self.embedding_dim < 1:
            raise ModelError("embedding_dim must be positive")
        if self.input_channels < 1:
            raise ModelError("input_channels must be positive")

    @property
    def dsan_positions(self) -> tuple:
        return tuple(i for i, b in enumerate(self.blocks) if b.norm_kind == "dsan")

    @classmethod
    def small(
        cls,
        num_domains: int = 1,
        norm_kind: str = "dsan",
        dsan_positions: Optional[tuple] = None,
        channels: tuple = (16, 32, 64, 64),
        embedding_dim: int = 32,
        **kwargs,
    ) -> "ModelConfig":
        """Reduced configuration used by the fast experiment fixtures.

        `norm_kind` fills every block; `dsan_positions`, when given, puts
        DSAN at those indices and plain BN elsewhere.
        """
        kinds = [norm_kind] * len(channels)
        if dsan_positions is not None:
            kinds = ["dsan" if i in dsan_positions else "bn" for i in range(len(channels))]
        blocks = tuple(BlockSpec(c, 2, k) for c, k in zip(channels, kinds))
        return cls(blocks=blocks, num_domains=num_domains, embedding_dim=embedding_dim, **kwargs)

    def to_dict(self) -> dict:
        return {
            "blocks": [
                {"out_channels": b.out_channels, "stride": b.stride, "norm_kind": b.norm_kind}
                for b in self.blocks
            ],
            "input_channels": self.input_channels,
            "input_hw": list(self.input_hw),
            "embedding_dim": self.embedding_dim,
            "num_domains": self.num_domains,
            "kernel_size": self.kernel_size,
            "norm_momentum": self.norm_momentum,
            "norm_eps": self.norm_eps,
            "share_in_affine": self.share_in_affine,
            "enable_in_affine": self.enable_in_affine,
            "dson_mix_weight": self.dson_mix_weight,
            "dson_learnable": self.dson_learnable,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["blocks"] = tuple(BlockSpec(**b) for b in d["blocks"])
        d["input_hw"] = tuple(d["input_hw"])
        return cls(**d)


# ---------------------------------------------------------------------------
# Normalization layer wrappers with a uniform (x, domain, mode) interface


class _PlainBN:
    per_domain_affine_channels = 0

    def __init__(self, c: int, cfg: ModelConfig):
        self.affine = AffineParams(c)
        self.state = DomainBNState(c, 1, cfg.norm_momentum, cfg.norm_eps)

    def forward(self, x: Tensor, domain: int, mode: str) -> Tensor:
        return batch_norm_domain(x, 0, self.affine, self.state, mode)

    def named_params(self) -> dict:
        return {"affine.gamma": self.affine.gamma, "affine.beta": self.affine.beta}

    def states(self) -> dict:
        return {"bn": self.state}


class _PlainIN:
    per_domain_affine_channels = 0

    def __init__(self, c: int, cfg: ModelConfig):
        self.affine = AffineParams(c)
        self.eps = cfg.norm_eps

    def forward(self, x: Tensor, domain: int, mode: str) -> Tensor:
        return instance_norm(x, self.affine, self.eps)

    def named_params(self) -> dict:
        return {"affine.gamma": self.affine.gamma, "affine.beta": self.affine.beta}

    def states(self) -> dict:
        return {}


class _IBN:
    """IN half + shared BN half: a DSAN layer degenerated to one domain."""

    per_domain_affine_channels = 0

    def __init__(self, c: int, cfg: ModelConfig):
        self.layer = DSANLayer(c, 1, True, True, cfg.norm_momentum, cfg.norm_eps)

    def forward(self, x: Tensor, domain: int, mode: str) -> Tensor:
        return self.layer.forward(x, 0, mode)

    def named_params(self) -> dict:
        out = {"in_affine.0.gamma": self.layer.in_affines[0].gamma, "in_affine.0.beta": self.layer.in_affines[0].beta}
        out["bn_affine.0.gamma"] = self.layer.bn_affines[0].gamma
        out["bn_affine.0.beta"] = self.layer.bn_affines[0].beta
        return out

    def states(self) -> dict:
        return {"bn": self.layer.bn_state}


class _DSBN:
    def __init__(self, c: int, cfg: ModelConfig):
        self.affines = [AffineParams(c) for _ in range(cfg.num_domains)]
        self.state = DomainBNState(c, cfg.num_domains, cfg.norm_momentum, cfg.norm_eps)
        self.per_domain_affine_channels = c

    def forward(self, x: Tensor, domain: int, mode: str) -> Tensor:
        return batch_norm_domain(x, domain, self.affines[domain], self.state, mode)

    def named_params(self) -> dict:
        out = {}
        for d, a in enumerate(self.affines):
            out[f"affine.{d}.gamma"] = a.gamma
            out[f"affine.{d}.beta"] = a.beta
        return out

    def states(self) -> dict:
        return {"bn": self.state}


class _DSAN:
    def __init__(self, c: int, cfg: ModelConfig):
        self.layer = DSANLayer(
            c,
            cfg.num_domains,
            cfg.share_in_affine,
            cfg.enable_in_affine,
            cfg.norm_momentum,
            cfg.norm_eps,
        )
        half = c // 2
        self.per_domain_affine_channels = half
        if cfg.enable_in_affine and not cfg.share_in_affine:
            self.per_domain_affine_channels += half

    def forward(self, x: Tensor, domain: int, mode: str) -> Tensor:
        return self.layer.forward(x, domain, mode)

    def named_params(self) -> dict:
        out = {}
        for i, a in enumerate(self.layer.in_affines):
            out[f"in_affine.{i}.gamma"] = a.gamma
            out[f"in_affine.{i}.beta"] = a.beta
        for d, a in enumerate(self.layer.bn_affines):
            out[f"bn_affine.{d}.gamma"] = a.gamma
            out[f"bn_affine.{d}.beta"] = a.beta
        return out

    def states(self) -> dict:
        return {"bn": self.layer.bn_state}


class _DSON:
    def __init__(self, c: int, cfg: ModelConfig):
        self.affines = [AffineParams(c) for _ in range(cfg.num_domains)]
        self.state = DomainBNState(c, cfg.num_domains, cfg.norm_momentum, cfg.norm_eps)
        self.per_domain_affine_channels = c
        self.learnable = cfg.dson_learnable
        if self.learnable:
            # Blend weight parameterized through a sigmoid to stay in [0, 1].
            w = min(max(cfg.dson_mix_weight, 1e-4), 1.0 - 1e-4)
            rho = float(np.log(w / (1.0 - w)))
            self.mix_rho = Tensor(np.full(1, rho, dtype=np.float32), requires_grad=True)
        else:
            self.mix_weight = float(cfg.dson_mix_weight)

    def _mix(self):
        if self.learnable:
            one = Tensor(np.ones(1, dtype=np.float32))
            return ad.div(one, one + ad.exp(ad.neg(self.mix_rho)))
        return self.mix_weight

    def forward(self, x: Tensor, domain: int, mode: str) -> Tensor:
        return dson_forward(x, domain, self._mix(), self.affines[domain], self.state, mode)

    def named_params(self) -> dict:
        out = {}
        for d, a in enumerate(self.affines):
            out[f"affine.{d}.gamma"] = a.gamma
            out[f"affine.{d}.beta"] = a.beta
        if self.learnable:
            out["mix_rho"] = self.mix_rho
        return out

    def states(self) -> dict:
        return {"bn": self.state}


_NORM_FACTORY = {"bn": _PlainBN, "in": _PlainIN, "ibn": _IBN, "dsbn": _DSBN, "dsan": _DSAN, "dson": _DSON}


# ---------------------------------------------------------------------------


class _Block:
    def __init__(self, c_in: int, spec: BlockSpec, cfg: ModelConfig, rng: np.random.Generator):
        k = cfg.kernel_size
        fan_in = c_in * k * k
        bound = np.sqrt(6.0 / fan_in)
        self.conv_w = Tensor(
            rng.uniform(-bound, bound, size=(spec.out_channels, c_in, k, k)).astype(np.float32),
            requires_grad=True,
        )
        self.conv_b = Tensor(np.zeros(spec.out_channels, dtype=np.float32), requires_grad=True)
        # Strided blocks downsample with a 2x2 mean pool after the conv; an
        # exact-geometry 3x3/stride-2 conv cannot exist on even input sizes.
        self.stride = spec.stride
        self.padding = k // 2
        self.norm = _NORM_FACTORY[spec.norm_kind](spec.out_channels, cfg)

    def forward(self, x: Tensor, domain: int, mode: str) -> Tensor:
        y = ad.conv2d(x, self.conv_w, self.conv_b, stride=1, padding=self.padding)
        y = self.norm.forward(y, domain, mode)
        y = ad.relu(y)
        if self.stride == 2:
            y = ad.avg_pool2d(y, 2, 2)
        return y


class Backbone:
    """conv -> norm -> relu blocks, global average pool, linear embedding."""

    def __init__(self, config: ModelConfig):
        self.config = config
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, 101]))
        self.blocks = []
        c_in = config.input_channels
        for spec in config.blocks:
            self.blocks.append(_Block(c_in, spec, config, rng))
            c_in = spec.out_channels
        bound = np.sqrt(6.0 / c_in)
        self.embed_w = Tensor(
            rng.uniform(-bound, bound, size=(config.embedding_dim, c_in)).astype(np.float32),
            requires_grad=True,
        )
        self.embed_b = Tensor(np.zeros(config.embedding_dim, dtype=np.float32), requires_grad=True)

    @property
    def num_domains(self) -> int:
        return self.config.num_domains

    def _check_input(self, images: np.ndarray) -> None:
        h, w = self.config.input_hw
        if images.ndim != 4 or images.shape[1:] != (self.config.input_channels, h, w):
            raise ModelError(
                f"expected images of shape (n, {self.config.input_channels}, {h}, {w}), got {images.shape}"
            )

    def forward_embed(self, images, domain: int, mode: str) -> Tensor:
        """Embed a batch through the given domain's normalization path."""
        if not 0 <= domain < self.num_domains:
            raise ModelError(f"domain {domain} out of range [0, {self.num_domains})")
        x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=np.float32))
        self._check_input(x.data)
        for block in self.blocks:
            x = block.forward(x, domain, mode)
        pooled = ad.global_avg_pool(x)
        flat = ad.reshape(pooled, (x.shape[0], x.shape[1]))
        return ad.linear(flat, self.embed_w, self.embed_b)

    def forward_fused(self, images, mode: str = "eval") -> Tensor:
        """Average the embeddings from every domain path (eval only)."""
        if mode != "eval":
            raise ModelError("forward_fused is eval-only")
        with ad.no_grad():
            acc = None
            for d in range(self.num_domains):
                e = self.forward_embed(images, d, "eval")
                acc = e if acc is None else ad.add(acc, e)
            return ad.scale(acc, 1.0 / self.num_domains)

    def named_parameters(self) -> Dict[str, Tensor]:
        out: Dict[str, Tensor] = {}
        for i, block in enumerate(self.blocks):
            out[f"block{i}.conv.weight"] = block.conv_w
            out[f"block{i}.conv.bias"] = block.conv_b
            for name, p in block.norm.named_params().items():
                out[f"block{i}.norm.{name}"] = p
        out["embed.weight"] = self.embed_w
        out["embed.bias"] = self.embed_b
        return out

    def norm_states(self) -> Dict[str, DomainBNState]:
        out = {}
        for i, block in enumerate(self.blocks):
            for name, st in block.norm.states().items():
                out[f"block{i}.norm.{name}"] = st
        return out

    def parameter_count(self) -> int:
        return sum(p.size for p in self.named_parameters().values())

    def per_domain_affine_channels(self) -> int:
        """Total channels carrying one affine pair per extra domain."""
        return sum(b.norm.per_domain_affine_channels for b in self.blocks)

    def state_hash(self) -> str:
        """Digest of all parameters and running statistics (hygiene checks)."""
        crc = 0
        params = self.named_parameters()
        for name in sorted(params):
            crc = zlib.crc32(params[name].data.tobytes(), crc)
        for name, st in sorted(self.norm_states().items()):
            crc = zlib.crc32(st.running_mean.tobytes(), crc)
            crc = zlib.crc32(st.running_var.tobytes(), crc)
            crc = zlib.crc32(st.batch_count.tobytes(), crc)
        return f"{crc:08x}"


class ClassifierBank:
    """One linear head per domain, rebuilt whenever cluster counts change."""

    def __init__(self, embedding_dim: int):
        self.embedding_dim = embedding_dim
        self.heads: Dict[int, dict] = {}

    def rebuild(self, domain: int, num_classes: int, rng: np.random.Generator) -> None:
        if num_classes < 1:
            self.heads.pop(domain, None)
            return
        w = rng.normal(0.0, 0.01, size=(num_classes, self.embedding_dim)).astype(np.float32)
        self.heads[domain] = {
            "weight": Tensor(w, requires_grad=True),
            "bias": Tensor(np.zeros(num_classes, dtype=np.float32), requires_grad=True),
        }

    def drop(self, domain: int) -> None:
        self.heads.pop(domain, None)

    def num_classes(self, domain: int) -> int:
        if domain not in self.heads:
            return 0
        return self.heads[domain]["weight"].shape[0]

    def classify(self, embeddings: Tensor, domain: int) -> Tensor:
        if domain not in self.heads:
            raise ModelError(f"no classifier head for domain {domain}")
        head = self.heads[domain]
        return ad.linear(embeddings, head["weight"], head["bias"])

    def named_parameters(self) -> Dict[str, Tensor]:
        out = {}
        for d in sorted(self.heads):
            out[f"head.{d}.weight"] = self.heads[d]["weight"]
            out[f"head.{d}.bias"] = self.heads[d]["bias"]
        return out


# ---------------------------------------------------------------------------
# Checkpoint I/O: magic, schema version, canonical JSON header, raw blobs, CRC.


def _collect_arrays(backbone: Backbone, heads: Optional[ClassifierBank], opt_state: Optional[dict]) -> dict:
    arrays: Dict[str, np.ndarray] = {}
    for name, p in backbone.named_parameters().items():
        arrays[f"param.{name}"] = p.data
    for name, st in backbone.norm_states().items():
        arrays[f"state.{name}.running_mean"] = st.running_mean
        arrays[f"state.{name}.running_var"] = st.running_var
        arrays[f"state.{name}.batch_count"] = st.batch_count
    if heads is not None:
        for name, p in heads.named_parameters().items():
            arrays[f"param.{name}"] = p.data
    if opt_state is not None:
        for name, st in opt_state["state"].items():
            arrays[f"opt.m.{name}"] = st["m"]
            arrays[f"opt.v.{name}"] = st["v"]
    return arrays


def save_checkpoint(
    path,
    backbone: Backbone,
    heads: Optional[ClassifierBank] = None,
    opt_state: Optional[dict] = None,
    epoch: int = 0,
    extra: Optional[dict] = None,
) -> None:
    arrays = _collect_arrays(backbone, heads, opt_state)
    order = sorted(arrays)
    header = {
        "config": backbone.config.to_dict(),
        "epoch": int(epoch),
        "heads": {str(d): heads.num_classes(d) for d in sorted(heads.heads)} if heads else {},
        "optimizer": None,
        "extra": extra or {},
        "arrays": [
            {"name": n, "dtype": str(arrays[n].dtype), "shape": list(arrays[n].shape)} for n in order
        ],
    }
    if opt_state is not None:
        header["optimizer"] = {
            "lr": opt_state["lr"],
            "betas": list(opt_state["betas"]),
            "eps": opt_state["eps"],
            "t": {name: st["t"] for name, st in sorted(opt_state["state"].items())},
        }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = bytearray()
    body += _MAGIC
    body += _SCHEMA_VERSION.to_bytes(4, "little")
    body += len(blob).to_bytes(8, "little")
    body += blob
    for n in order:
        body += np.ascontiguousarray(arrays[n]).tobytes()
    body += zlib.crc32(bytes(body)).to_bytes(4, "little")
    with open(path, "wb") as fh:
        fh.write(bytes(body))


def load_checkpoint(path):
    """Restore (backbone, heads, opt_state_or_None, epoch, extra) from disk."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(_MAGIC) + 16:
        raise CheckpointError("checkpoint truncated")
    if raw[: len(_MAGIC)] != _MAGIC:
        raise CheckpointError("bad magic; not a checkpoint file")
    stored_crc = int.from_bytes(raw[-4:], "little")
    if zlib.crc32(raw[:-4]) != stored_crc:
        raise CheckpointError("checksum mismatch (corrupted or truncated checkpoint)")
    off = len(_MAGIC)
    version = int.from_bytes(raw[off : off + 4], "little")
    if version != _SCHEMA_VERSION:
        raise CheckpointError(f"unsupported checkpoint schema version {version}")
    off += 4
    hlen = int.from_bytes(raw[off : off + 8], "little")
    off += 8
    header = json.loads(raw[off : off + hlen].decode("utf-8"))
    off += hlen

    arrays: Dict[str, np.ndarray] = {}
    for meta in header["arrays"]:
        dtype = np.dtype(meta["dtype"])
        count = int(np.prod(meta["shape"])) if meta["shape"] else 1
        nbytes = dtype.itemsize * count
        if off + nbytes > len(raw) - 4:
            raise CheckpointError(f"array {meta['name']} extends past end of file")
        arrays[meta["name"]] = np.frombuffer(raw[off : off + nbytes], dtype=dtype).reshape(meta["shape"]).copy()
        off += nbytes
    if off != len(raw) - 4:
        raise CheckpointError("trailing bytes after arrays")

    config = ModelConfig.from_dict(header["config"])
    backbone = Backbone(config)
    for name, p in backbone.named_parameters().items():
        key = f"param.{name}"
        if key not in arrays:
            raise CheckpointError(f"missing array {key}")
        if arrays[key].shape != p.data.shape:
            raise CheckpointError(f"shape mismatch for {key}")
        p.data = arrays[key].astype(p.data.dtype, copy=False)
    for name, st in backbone.norm_states().items():
        st.running_mean = arrays[f"state.{name}.running_mean"]
        st.running_var = arrays[f"state.{name}.running_var"]
        st.batch_count = arrays[f"state.{name}.batch_count"]

    heads = ClassifierBank(config.embedding_dim)
    for dom_str, k in header["heads"].items():
        d = int(dom_str)
        heads.heads[d] = {
            "weight": Tensor(arrays[f"param.head.{d}.weight"], requires_grad=True),
            "bias": Tensor(arrays[f"param.head.{d}.bias"], requires_grad=True),
        }

    opt_state = None
    if header["optimizer"] is not None:
        opt = header["optimizer"]
        opt_state = {
            "lr": opt["lr"],
            "betas": tuple(opt["betas"]),
            "eps": opt["eps"],
            "state": {
                name: {"m": arrays[f"opt.m.{name}"], "v": arrays[f"opt.v.{name}"], "t": t}
                for name, t in opt["t"].items()
            },
        }
    return backbone, heads, opt_state, header["epoch"], header["extra"]
