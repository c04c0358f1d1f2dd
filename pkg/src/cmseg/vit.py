"""Conditional vision transformer encoder.

A volume is cut into non-overlapping ``P^3`` patches, linearly projected to
``K`` channels and offset by learnable positional embeddings.  Each block is
pre-norm, with conditional instance normalization over the token axis in front
of both the attention and the MLP sublayer.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from . import tensor as T
from .nn import Linear, Module, Parameter, trunc_normal
from .norm import ConditionalInstanceNorm
from .tensor import ShapeError, Tensor


def patch_grid(spatial: Sequence[int], patch: int) -> tuple[int, int, int]:
    if any(s % patch for s in spatial):
        raise ShapeError(f"volume dims {tuple(spatial)} are not divisible by patch size {patch}")
    return tuple(s // patch for s in spatial)


def patchify(vol: Tensor, patch: int) -> Tensor:
    """``(B, 1, D, H, W) -> (B, N, P^3)``; patches in raster order, z-major then y then x."""
    b, c, d, h, w = vol.shape
    gd, gh, gw = patch_grid((d, h, w), patch)
    x = T.reshape(vol, (b, c, gd, patch, gh, patch, gw, patch))
    x = T.permute(x, (0, 2, 4, 6, 1, 3, 5, 7))
    return T.reshape(x, (b, gd * gh * gw, c * patch**3))


def unpatchify(patches: Tensor, patch: int, grid: Sequence[int], channels: int = 1) -> Tensor:
    b, n, _ = patches.shape
    gd, gh, gw = grid
    if gd * gh * gw != n:
        raise ShapeError(f"grid {tuple(grid)} does not hold {n} patches")
    x = T.reshape(patches, (b, gd, gh, gw, channels, patch, patch, patch))
    x = T.permute(x, (0, 4, 1, 5, 2, 6, 3, 7))
    return T.reshape(x, (b, channels, gd * patch, gh * patch, gw * patch))


def tokens_to_grid(z: Tensor, grid: Sequence[int]) -> Tensor:
    """``(B, N, K) -> (B, K, gd, gh, gw)``."""
    b, n, k = z.shape
    return T.reshape(T.permute(z, (0, 2, 1)), (b, k) + tuple(grid))


class PatchEmbedding(Module):
    def __init__(self, patch: int, hidden: int, num_patches: int, rng: np.random.Generator, channels: int = 1):
        self.patch = patch
        self.hidden = hidden
        self.num_patches = num_patches
        self.proj = Parameter(trunc_normal(rng, (channels * patch**3, hidden)))
        self.pos = Parameter(np.zeros((num_patches, hidden)))

    def forward(self, patches: Tensor) -> Tensor:
        if patches.shape[-1] != self.proj.shape[0] or patches.shape[1] != self.num_patches:
            raise ShapeError(f"patches {patches.shape} do not match embedding "
                             f"({self.num_patches} x {self.proj.shape[0]})")
        return patches @ self.proj + self.pos


def attention(q: Tensor, k: Tensor, v: Tensor) -> tuple[Tensor, Tensor]:
    """Scaled dot-product attention over ``(..., N, d)``; returns (output, weights)."""
    scores = q @ T.transpose(k) * (1.0 / math.sqrt(q.shape[-1]))
    weights = T.softmax(scores, axis=-1)
    return weights @ v, weights


class MultiHeadSelfAttention(Module):
    def __init__(self, hidden: int, heads: int, rng: np.random.Generator):
        if hidden % heads:
            raise ValueError(f"hidden size {hidden} is not divisible by {heads} heads")
        self.heads = heads
        self.head_dim = hidden // heads
        self.q = Linear(hidden, hidden, rng)
        self.k = Linear(hidden, hidden, rng)
        self.v = Linear(hidden, hidden, rng)
        self.out = Linear(hidden, hidden, rng)
        self.last_weights: np.ndarray | None = None

    def _split(self, x: Tensor) -> Tensor:
        b, n, _ = x.shape
        return T.permute(T.reshape(x, (b, n, self.heads, self.head_dim)), (0, 2, 1, 3))

    def forward(self, z: Tensor) -> Tensor:
        b, n, k = z.shape
        ctx, weights = attention(self._split(self.q(z)), self._split(self.k(z)), self._split(self.v(z)))
        self.last_weights = weights.data
        merged = T.reshape(T.permute(ctx, (0, 2, 1, 3)), (b, n, k))
        return self.out(merged)


class Mlp(Module):
    def __init__(self, hidden: int, ratio: int, rng: np.random.Generator):
        self.fc1 = Linear(hidden, hidden * ratio, rng)
        self.fc2 = Linear(hidden * ratio, hidden, rng)

    def forward(self, z: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(z)))


class TransformerBlock(Module):
    def __init__(self, hidden: int, heads: int, mlp_ratio: int, num_modalities: int, rng: np.random.Generator):
        self.norm1 = ConditionalInstanceNorm(hidden, num_modalities, layout="tokens")
        self.attn = MultiHeadSelfAttention(hidden, heads, rng)
        self.norm2 = ConditionalInstanceNorm(hidden, num_modalities, layout="tokens")
        self.mlp = Mlp(hidden, mlp_ratio, rng)

    def forward(self, z: Tensor, m) -> Tensor:
        z = self.attn(self.norm1(z, m)) + z
        return self.mlp(self.norm2(z, m)) + z


def default_taps(layers: int) -> list[int]:
    """Evenly spaced block indices ``{L/4, L/2, 3L/4, L}``, deduplicated."""
    taps = sorted({max(1, round(layers * f)) for f in (0.25, 0.5, 0.75, 1.0)})
    return taps


class CVitEncoder(Module):
    def __init__(self, input_size: Sequence[int], patch: int, hidden: int, layers: int, heads: int,
                 mlp_ratio: int, num_modalities: int, rng: np.random.Generator,
                 taps: Sequence[int] | None = None):
        self.input_size = tuple(input_size)
        self.patch = patch
        self.grid = patch_grid(self.input_size, patch)
        self.hidden = hidden
        self.num_modalities = num_modalities
        self.taps = list(taps) if taps else default_taps(layers)
        if any(b <= a for a, b in zip(self.taps, self.taps[1:])) or self.taps[-1] > layers or self.taps[0] < 1:
            raise ValueError(f"taps {self.taps} must be strictly increasing within [1, {layers}]")
        num_patches = int(np.prod(self.grid))
        self.embedding = PatchEmbedding(patch, hidden, num_patches, rng)
        self.blocks = [TransformerBlock(hidden, heads, mlp_ratio, num_modalities, rng) for _ in range(layers)]
        self.final_norm = ConditionalInstanceNorm(hidden, num_modalities, layout="tokens")

    def encode(self, vol: Tensor, m) -> list[Tensor]:
        """Return ``[z_0] + [z_i for i in taps]``, each ``(B, N, K)``, without the final norm."""
        z = self.embedding(patchify(vol, self.patch))
        outputs = [z]
        for i, block in enumerate(self.blocks, start=1):
            z = block(z, m)
            if i in self.taps:
                outputs.append(z)
        return outputs

    def forward(self, vol: Tensor, m) -> list[Tensor]:
        outputs = self.encode(vol, m)
        outputs[-1] = self.final_norm(outputs[-1], m)
        return outputs
