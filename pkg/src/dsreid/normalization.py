"""Normalization layers: IN, per-domain BN, their channel-split fusion, and a
blended-statistics comparator.

All forwards are built from autodiff primitives so gradients flow through the
statistics. Running statistics live outside the tape: train-mode batch-norm
updates them as a detached side effect, eval mode reads them as constants.
"""

from __future__ import annotations

from typing import Optional, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

__all__ = [
    "NormalizationError",
    "AffineParams",
    "DomainBNState",
    "DSANLayer",
    "instance_norm",
    "batch_norm_domain",
    "dsan_forward",
    "dson_forward",
]

DEFAULT_EPS = 1e-5
DEFAULT_MOMENTUM = 0.1

_MODES = ("train", "eval")


class NormalizationError(Exception):
    pass


def _check_mode(mode: str) -> None:
    if mode not in _MODES:
        raise NormalizationError(f"mode must be one of {_MODES}, got {mode!r}")


class AffineParams:
    """Per-channel learnable scale and shift, initialized to identity."""

    def __init__(self, channels: int, dtype=np.float32):
        if channels < 1:
            raise NormalizationError(f"affine needs at least one channel, got {channels}")
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


class DomainBNState:
    """Per-domain running statistics for batch normalization.

    One (mean, var, count) slot per domain id in [0, num_domains). Slots are
    only ever touched for the domain a batch belongs to.
    """

    def __init__(
        self,
        channels: int,
        num_domains: int,
        momentum: float = DEFAULT_MOMENTUM,
        epsilon: float = DEFAULT_EPS,
        dtype=np.float32,
    ):
        if num_domains < 1:
            raise NormalizationError(f"need at least one domain, got {num_domains}")
        if not 0.0 < momentum <= 1.0:
            raise NormalizationError(f"momentum must be in (0, 1], got {momentum}")
        if epsilon <= 0.0:
            raise NormalizationError(f"epsilon must be positive, got {epsilon}")
        self.channels = channels
        self.num_domains = num_domains
        self.momentum = float(momentum)
        self.epsilon = float(epsilon)
        self.running_mean = np.zeros((num_domains, channels), dtype=dtype)
        self.running_var = np.ones((num_domains, channels), dtype=dtype)
        self.batch_count = np.zeros(num_domains, dtype=np.int64)

    def check_domain(self, domain: int) -> None:
        if not 0 <= domain < self.num_domains:
            raise NormalizationError(f"domain {domain} out of range [0, {self.num_domains})")

    def update(self, domain: int, batch_mean: np.ndarray, batch_var: np.ndarray) -> None:
        m = self.momentum
        self.running_mean[domain] = (1.0 - m) * self.running_mean[domain] + m * batch_mean
        self.running_var[domain] = (1.0 - m) * self.running_var[domain] + m * batch_var
        self.batch_count[domain] += 1


def _apply_affine(y: Tensor, affine: Optional[AffineParams]) -> Tensor:
    if affine is None:
        return y
    c = affine.channels
    gamma = ad.reshape(affine.gamma, (1, c, 1, 1))
    beta = ad.reshape(affine.beta, (1, c, 1, 1))
    return ad.add(ad.mul(y, gamma), beta)


def instance_norm(x: Tensor, affine: Optional[AffineParams] = None, epsilon: float = DEFAULT_EPS) -> Tensor:
    """Normalize each (sample, channel) spatial plane to zero mean, unit var.

    Statistics use the biased variance; differentiable through them.
    """
    if x.ndim != 4:
        raise NormalizationError(f"instance_norm expects a 4-D tensor, got shape {x.shape}")
    n, c, h, w = x.shape
    if h * w < 1:
        raise NormalizationError("instance_norm requires a non-empty spatial plane")
    if affine is not None and affine.channels != c:
        raise NormalizationError(f"affine has {affine.channels} channels, input has {c}")
    mu = ad.reduce_mean(x, axis=(2, 3), keepdims=True)
    centered = ad.sub(x, mu)
    var = ad.reduce_mean(ad.mul(centered, centered), axis=(2, 3), keepdims=True)
    y = ad.div(centered, ad.sqrt(var + epsilon))
    return _apply_affine(y, affine)


def batch_norm_domain(
    x: Tensor,
    domain: int,
    affine: Optional[AffineParams],
    state: DomainBNState,
    mode: str,
) -> Tensor:
    """Batch normalization against one domain's statistics.

    Train mode normalizes with the mini-batch statistics over (n, h, w) and
    folds them into the domain's running estimates; eval mode normalizes with
    the stored running statistics. No other domain's slot is read or written.
    """
    _check_mode(mode)
    state.check_domain(domain)
    if x.ndim != 4:
        raise NormalizationError(f"batch_norm_domain expects a 4-D tensor, got shape {x.shape}")
    n, c, h, w = x.shape
    if c != state.channels:
        raise NormalizationError(f"input has {c} channels, state expects {state.channels}")
    if affine is not None and affine.channels != c:
        raise NormalizationError(f"affine has {affine.channels} channels, input has {c}")
    if mode == "train":
        if n * h * w < 2:
            raise NormalizationError(f"train-mode batch too small: n*h*w = {n * h * w} < 2")
        mu = ad.reduce_mean(x, axis=(0, 2, 3), keepdims=True)
        centered = ad.sub(x, mu)
        var = ad.reduce_mean(ad.mul(centered, centered), axis=(0, 2, 3), keepdims=True)
        state.update(domain, mu.data.reshape(c), var.data.reshape(c))
        y = ad.div(centered, ad.sqrt(var + state.epsilon))
    else:
        mu = Tensor(state.running_mean[domain].reshape(1, c, 1, 1).copy())
        var = Tensor(state.running_var[domain].reshape(1, c, 1, 1).copy())
        y = ad.div(ad.sub(x, mu), ad.sqrt(var + state.epsilon))
    return _apply_affine(y, affine)


class DSANLayer:
    """Channel-split normalization: IN on the first half, per-domain BN on the
    second, concatenated back in order.

    The IN affine can be shared across domains or kept per-domain, or disabled
    entirely; the BN half always has per-domain affines and statistics.
    """

    def __init__(
        self,
        channels: int,
        num_domains: int,
        share_in_affine: bool = True,
        enable_in_affine: bool = True,
        momentum: float = DEFAULT_MOMENTUM,
        epsilon: float = DEFAULT_EPS,
    ):
        if channels % 2 != 0 or channels < 2:
            raise NormalizationError(f"channel count must be even and >= 2, got {channels}")
        self.channels = channels
        self.num_domains = num_domains
        self.share_in_affine = bool(share_in_affine)
        self.enable_in_affine = bool(enable_in_affine)
        half = channels // 2
        if enable_in_affine:
            count = 1 if share_in_affine else num_domains
            self.in_affines = [AffineParams(half) for _ in range(count)]
        else:
            self.in_affines = []
        self.bn_affines = [AffineParams(half) for _ in range(num_domains)]
        self.bn_state = DomainBNState(half, num_domains, momentum=momentum, epsilon=epsilon)

    def in_affine_for(self, domain: int) -> Optional[AffineParams]:
        if not self.enable_in_affine:
            return None
        return self.in_affines[0] if self.share_in_affine else self.in_affines[domain]

    def forward(self, x: Tensor, domain: int, mode: str) -> Tensor:
        return dsan_forward(x, domain, self, mode)


def dsan_forward(x: Tensor, domain: int, layer: DSANLayer, mode: str) -> Tensor:
    _check_mode(mode)
    layer.bn_state.check_domain(domain)
    if x.ndim != 4 or x.shape[1] != layer.channels:
        raise NormalizationError(f"expected {layer.channels} channels, got input shape {x.shape}")
    half = layer.channels // 2
    in_half = ad.slice_channels(x, 0, half)
    bn_half = ad.slice_channels(x, half, layer.channels)
    y_in = instance_norm(in_half, layer.in_affine_for(domain), layer.bn_state.epsilon)
    y_bn = batch_norm_domain(bn_half, domain, layer.bn_affines[domain], layer.bn_state, mode)
    return ad.concat_channels(y_in, y_bn)


def dson_forward(
    x: Tensor,
    domain: int,
    mix_weight: Union[float, Tensor],
    affine: Optional[AffineParams],
    state: DomainBNState,
    mode: str,
) -> Tensor:
    """Normalize every channel with a blend of batch and instance statistics.

    mu = w * mu_batch(domain) + (1 - w) * mu_instance, same for the variance;
    w = 1 reduces to batch_norm_domain, w = 0 to instance_norm with the same
    affine. Train mode folds the batch statistics into the domain's running
    estimates regardless of w.
    """
    _check_mode(mode)
    state.check_domain(domain)
    if x.ndim != 4:
        raise NormalizationError(f"dson_forward expects a 4-D tensor, got shape {x.shape}")
    n, c, h, w_dim = x.shape
    if c != state.channels:
        raise NormalizationError(f"input has {c} channels, state expects {state.channels}")
    if isinstance(mix_weight, Tensor):
        w_val = float(mix_weight.data.reshape(-1)[0])
        w_t: Union[float, Tensor] = mix_weight
    else:
        w_val = float(mix_weight)
        w_t = w_val
    if not 0.0 <= w_val <= 1.0:
        raise NormalizationError(f"mix weight must lie in [0, 1], got {w_val}")

    mu_i = ad.reduce_mean(x, axis=(2, 3), keepdims=True)
    ci = ad.sub(x, mu_i)
    var_i = ad.reduce_mean(ad.mul(ci, ci), axis=(2, 3), keepdims=True)

    if mode == "train":
        if n * h * w_dim < 2:
            raise NormalizationError(f"train-mode batch too small: n*h*w = {n * h * w_dim} < 2")
        mu_b = ad.reduce_mean(x, axis=(0, 2, 3), keepdims=True)
        cb = ad.sub(x, mu_b)
        var_b = ad.reduce_mean(ad.mul(cb, cb), axis=(0, 2, 3), keepdims=True)
        state.update(domain, mu_b.data.reshape(c), var_b.data.reshape(c))
    else:
        mu_b = Tensor(state.running_mean[domain].reshape(1, c, 1, 1).copy())
        var_b = Tensor(state.running_var[domain].reshape(1, c, 1, 1).copy())

    if isinstance(w_t, Tensor):
        one_minus = ad.sub(Tensor(np.ones(1, dtype=x.dtype)), w_t)
        mu = ad.add(ad.mul(mu_b, w_t), ad.mul(mu_i, one_minus))
        var = ad.add(ad.mul(var_b, w_t), ad.mul(var_i, one_minus))
    else:
        mu = ad.add(ad.scale(mu_b, w_t), ad.scale(mu_i, 1.0 - w_t))
        var = ad.add(ad.scale(var_b, w_t), ad.scale(var_i, 1.0 - w_t))
    y = ad.div(ad.sub(x, mu), ad.sqrt(var + state.epsilon))
    return _apply_affine(y, affine)
