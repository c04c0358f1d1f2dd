"""Instance, layer and conditional instance normalization.

Statistics use the population variance with ``eps`` inside the square root.
Two layouts are supported: ``"spatial"`` for ``(B, C, *spatial)`` feature maps,
where statistics run over the spatial axes, and ``"tokens"`` for ``(B, N, K)``
transformer embeddings, where statistics run over the token axis separately
for each embedding channel.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import tensor as T
from .nn import Module, Parameter
from .tensor import ShapeError, Tensor

EPS = 1e-6


class UnknownModalityError(ValueError):
    """Modality id outside ``[0, num_modalities)``."""


def _stat_axes(ndim: int, layout: str) -> tuple[int, ...]:
    if layout == "spatial":
        if ndim < 3:
            raise ShapeError("spatial layout needs (batch, channel, spatial...)")
        return tuple(range(2, ndim))
    if layout == "tokens":
        if ndim != 3:
            raise ShapeError("tokens layout needs (batch, tokens, channels)")
        return (1,)
    raise ValueError(f"unknown layout {layout!r}")


def _channel_axis(layout: str) -> int:
    return 1 if layout == "spatial" else 2


def normalize(z: Tensor, axes: Sequence[int], eps: float = EPS) -> Tensor:
    """``(z - mean) / sqrt(var + eps)`` over ``axes``."""
    mu = T.mean(z, axis=axes, keepdims=True)
    centered = z - mu
    var = T.mean(centered * centered, axis=axes, keepdims=True)
    return centered * (var + eps) ** -0.5


def instance_norm(z: Tensor, eps: float = EPS, layout: str = "spatial") -> Tensor:
    return normalize(z, _stat_axes(z.ndim, layout), eps)


def layer_norm(z: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None, eps: float = EPS) -> Tensor:
    out = normalize(z, (z.ndim - 1,), eps)
    if gamma is not None:
        if gamma.shape[-1] != z.shape[-1]:
            raise ShapeError(f"layer_norm feature dim {z.shape[-1]} != parameter dim {gamma.shape[-1]}")
        out = out * gamma + beta
    return out


def _affine_shape(ndim: int, layout: str, batch: int) -> tuple[int, ...]:
    shape = [1] * ndim
    shape[0] = batch
    shape[_channel_axis(layout)] = -1
    return tuple(shape)


def select_bank(bank: Tensor, m, num_modalities: int) -> Tensor:
    """Rows of ``bank`` for modality ``m`` (an int, or one id per batch sample)."""
    ids = np.atleast_1d(np.asarray(m))
    if ids.dtype.kind not in "iu" or ids.min() < 0 or ids.max() >= num_modalities:
        raise UnknownModalityError(f"modality {m!r} not in [0, {num_modalities})")
    if np.ndim(m) == 0:
        return bank[int(m)]
    return bank[ids.astype(np.intp)]


def cin(z: Tensor, m, gamma: Tensor, beta: Tensor, eps: float = EPS, layout: str = "spatial") -> Tensor:
    """Conditional instance normalization with per-modality ``gamma``/``beta`` banks ``(M, C)``."""
    num_modalities, channels = gamma.shape
    if z.shape[_channel_axis(layout)] != channels:
        raise ShapeError(f"channel axis has {z.shape[_channel_axis(layout)]}, CIN expects {channels}")
    normed = instance_norm(z, eps, layout)
    g = select_bank(gamma, m, num_modalities)
    b = select_bank(beta, m, num_modalities)
    batch = z.shape[0] if np.ndim(m) else 1
    if np.ndim(m) and len(np.atleast_1d(m)) != z.shape[0]:
        raise ShapeError(f"{len(m)} modality ids for a batch of {z.shape[0]}")
    shape = _affine_shape(z.ndim, layout, batch)
    return normed * g.reshape(shape) + b.reshape(shape)


class ConditionalInstanceNorm(Module):
    """One ``(gamma, beta)`` bank per modality; ``forward(z, m)`` switches banks."""

    def __init__(self, channels: int, num_modalities: int, layout: str = "spatial", eps: float = EPS):
        if num_modalities < 1 or channels < 1:
            raise ValueError("channels and num_modalities must be positive")
        self.channels = channels
        self.num_modalities = num_modalities
        self.layout = layout
        self.eps = eps
        self.gamma = Parameter(np.ones((num_modalities, channels)))
        self.beta = Parameter(np.zeros((num_modalities, channels)))

    def forward(self, z: Tensor, m) -> Tensor:
        return cin(z, m, self.gamma, self.beta, self.eps, self.layout)


class InstanceNorm(Module):
    """Unconditional instance normalization with a learnable per-channel affine."""

    def __init__(self, channels: int, layout: str = "spatial", eps: float = EPS):
        self.channels = channels
        self.layout = layout
        self.eps = eps
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))

    def forward(self, z: Tensor) -> Tensor:
        if z.shape[_channel_axis(self.layout)] != self.channels:
            raise ShapeError(f"InstanceNorm expects {self.channels} channels, got shape {z.shape}")
        shape = _affine_shape(z.ndim, self.layout, 1)
        return instance_norm(z, self.eps, self.layout) * self.gamma.reshape(shape) + self.beta.reshape(shape)


class LayerNorm(Module):
    def __init__(self, features: int, eps: float = EPS):
        self.features = features
        self.eps = eps
        self.gamma = Parameter(np.ones(features))
        self.beta = Parameter(np.zeros(features))

    def forward(self, z: Tensor) -> Tensor:
        return layer_norm(z, self.gamma, self.beta, self.eps)
