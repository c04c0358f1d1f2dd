"""Conditional segmentation models: residual 3D UNet and C-ViT UNETR.

Both follow ``y = D(E(x, m))``: only encoder normalizations see the modality
flag, the decoder is shared and uses plain (affine) instance normalization.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .nn import Conv3d, ConvTranspose3d, Module, activation
from .norm import ConditionalInstanceNorm, InstanceNorm, UnknownModalityError
from .tensor import ShapeError, Tensor
from .vit import CVitEncoder, tokens_to_grid


@dataclass
class ModelConfig:
    arch: str = "cvit"
    num_modalities: int = 2
    num_classes: int = 8
    input_size: int = 32
    patch_size: int = 8
    hidden: int = 64
    layers: int = 4
    heads: int = 4
    mlp_ratio: int = 4
    taps: tuple[int, ...] = ()
    decoder_features: int = 8
    unet_widths: tuple[int, ...] = (16, 32, 64, 128)
    activation: str = "gelu"

    def __post_init__(self):
        self.taps = tuple(int(t) for t in self.taps)
        self.unet_widths = tuple(int(w) for w in self.unet_widths)
        if self.arch not in ("cvit", "unet"):
            raise ValueError(f"unknown arch {self.arch!r}")
        if self.num_modalities < 1 or self.num_classes < 2:
            raise ValueError("need num_modalities >= 1 and num_classes >= 2")


class ConvNormAct(Module):
    def __init__(self, cin: int, cout: int, kernel: int, act: str, rng):
        self.conv = Conv3d(cin, cout, kernel, rng)
        self.norm = InstanceNorm(cout)
        self.act = act

    def forward(self, x: Tensor) -> Tensor:
        return activation(self.act)(self.norm(self.conv(x)))


class ResBlock(Module):
    """Pre-activation residual block: ``x + conv(act(norm(conv(act(norm(x))))))``.

    With ``num_modalities`` set, both norms are conditional and ``forward`` takes
    the modality; otherwise they are plain instance norms.
    """

    def __init__(self, channels: int, act: str, rng, num_modalities: int | None = None):
        self.conditional = num_modalities is not None
        if self.conditional:
            self.norm1 = ConditionalInstanceNorm(channels, num_modalities)
            self.norm2 = ConditionalInstanceNorm(channels, num_modalities)
        else:
            self.norm1 = InstanceNorm(channels)
            self.norm2 = InstanceNorm(channels)
        self.conv1 = Conv3d(channels, channels, 3, rng)
        self.conv2 = Conv3d(channels, channels, 3, rng)
        self.act = act

    def forward(self, x: Tensor, m=None) -> Tensor:
        act = activation(self.act)
        n1 = self.norm1(x, m) if self.conditional else self.norm1(x)
        h = self.conv1(act(n1))
        n2 = self.norm2(h, m) if self.conditional else self.norm2(h)
        return self.conv2(act(n2)) + x


def _check_modality(m, num_modalities: int) -> None:
    ids = np.atleast_1d(np.asarray(m))
    if ids.dtype.kind not in "iu" or ids.min() < 0 or ids.max() >= num_modalities:
        raise UnknownModalityError(f"modality {m!r} not in [0, {num_modalities})")


class CondUNet(Module):
    """Residual UNet; stage ``s`` downsamples by 2 (except the first) and runs one
    conditional pre-activation block.  The deepest stage is the bottleneck and
    belongs to the encoder."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.config = cfg
        w = cfg.unet_widths
        self.num_modalities = cfg.num_modalities
        self.stem = Conv3d(1, w[0], 3, rng)
        self.down = [Conv3d(w[i - 1], w[i], 3, rng, stride=2) for i in range(1, len(w))]
        self.enc = [ResBlock(c, cfg.activation, rng, cfg.num_modalities) for c in w]
        self.up = [ConvTranspose3d(w[i + 1], w[i], 2, rng) for i in range(len(w) - 1)]
        self.fuse = [Conv3d(2 * w[i], w[i], 1, rng) for i in range(len(w) - 1)]
        self.dec = [ResBlock(w[i], cfg.activation, rng) for i in range(len(w) - 1)]
        self.head_norm = InstanceNorm(w[0])
        self.head = Conv3d(w[0], cfg.num_classes, 1, rng)

    @property
    def factor(self) -> int:
        return 2 ** (len(self.config.unet_widths) - 1)

    def forward(self, vol: Tensor, m) -> Tensor:
        _check_modality(m, self.num_modalities)
        if any(s % self.factor for s in vol.shape[2:]):
            raise ShapeError(f"volume dims {vol.shape[2:]} not divisible by {self.factor}")
        x = self.stem(vol)
        skips = []
        for i, block in enumerate(self.enc):
            if i > 0:
                x = self.down[i - 1](x)
            x = block(x, m)
            skips.append(x)
        for i in reversed(range(len(self.up))):
            x = self.up[i](x)
            x = self.fuse[i](T.concat([x, skips[i]], axis=1))
            x = self.dec[i](x)
        return self.head(activation(self.config.activation)(self.head_norm(x)))


class TapUpsampler(Module):
    """Transposed-conv stack lifting a token grid by ``2**steps``."""

    def __init__(self, cin: int, cout: int, steps: int, act: str, rng):
        self.first = ConvTranspose3d(cin, cout, 2, rng)
        self.norms = [InstanceNorm(cout) for _ in range(steps - 1)]
        self.rest = [ConvTranspose3d(cout, cout, 2, rng) for _ in range(steps - 1)]
        self.act = act

    def forward(self, x: Tensor) -> Tensor:
        x = self.first(x)
        for norm, up in zip(self.norms, self.rest):
            x = up(activation(self.act)(norm(x)))
        return x


class CVitUnetr(Module):
    """C-ViT encoder with a UNETR-style convolutional decoder.

    With patch size ``P = 2**n`` the decoder has ``n`` token-derived levels at
    ``grid * 2**j`` plus a full-resolution level fed by a conv on the raw input.
    Encoder outputs ``[z_0, taps...]`` minus the last are assigned deepest
    first to those levels; the last tap (after the final CIN) is the bottleneck.
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.config = cfg
        self.num_modalities = cfg.num_modalities
        p = cfg.patch_size
        n = int(round(math.log2(p)))
        if 2**n != p or n < 1:
            raise ValueError(f"patch size must be a power of two >= 2, got {p}")
        size = (cfg.input_size,) * 3
        self.encoder = CVitEncoder(size, p, cfg.hidden, cfg.layers, cfg.heads, cfg.mlp_ratio,
                                   cfg.num_modalities, rng, cfg.taps or None)
        self.levels = n
        k, f, act = cfg.hidden, cfg.decoder_features, cfg.activation
        widths = [f * 2 ** (n - j) for j in range(n + 1)]
        self.widths = widths
        sources = len(self.encoder.taps)  # z_0 plus all taps except the last
        self.skip_levels = [j for j in range(n) if j < sources]
        self.skip_up = [TapUpsampler(k, widths[j], j, act, rng) for j in self.skip_levels if j > 0]
        self.level_up = [ConvTranspose3d(widths[j - 1], widths[j], 2, rng) for j in range(1, n + 1)]
        blocks = []
        for j in range(n):
            cin = (k if j == 0 else widths[j]) + ((k if j == 0 else widths[j]) if j in self.skip_levels else 0)
            blocks.append(ConvNormAct(cin, widths[j], 3, act, rng))
        self.blocks = blocks
        self.raw = ConvNormAct(1, widths[n], 3, act, rng)
        self.fuse = ConvNormAct(2 * widths[n], widths[n], 1, act, rng)
        self.head = Conv3d(widths[n], cfg.num_classes, 1, rng)

    def forward(self, vol: Tensor, m) -> Tensor:
        _check_modality(m, self.num_modalities)
        if tuple(vol.shape[2:]) != self.encoder.input_size:
            raise ShapeError(f"C-ViT expects input {self.encoder.input_size}, got {tuple(vol.shape[2:])}")
        outs = self.encoder(vol, m)
        grid = self.encoder.grid
        sources = outs[:-1][::-1]  # deepest first
        x = tokens_to_grid(outs[-1], grid)
        up_iter = iter(self.skip_up)
        for j in range(self.levels):
            if j > 0:
                x = self.level_up[j - 1](x)
            if j in self.skip_levels:
                skip = tokens_to_grid(sources[j], grid)
                if j > 0:
                    skip = next(up_iter)(skip)
                x = T.concat([x, skip], axis=1)
            x = self.blocks[j](x)
        x = self.level_up[-1](x)
        x = self.fuse(T.concat([x, self.raw(vol)], axis=1))
        return self.head(x)


def build_model(cfg: ModelConfig, rng: np.random.Generator | int = 0) -> Module:
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    if cfg.arch == "unet":
        return CondUNet(cfg, rng)
    return CVitUnetr(cfg, rng)


@dataclass
class ParamCount:
    total: int
    conditional: int
    per_modality: int
    overhead: int
    ratio: float = field(default=0.0)


def conditional_layers(model: Module) -> list[ConditionalInstanceNorm]:
    return [mod for _, mod in model.named_modules() if isinstance(mod, ConditionalInstanceNorm)]


def param_count(model: Module) -> ParamCount:
    """Total parameters, parameters held in CIN banks, and the cost of modalities beyond the first."""
    layers = conditional_layers(model)
    total = model.num_parameters()
    conditional = sum(l.gamma.size + l.beta.size for l in layers)
    per_modality = sum(2 * l.channels for l in layers)
    overhead = conditional - per_modality
    return ParamCount(total, conditional, per_modality, overhead, overhead / total if total else 0.0)


def make_unconditional(model: Module) -> Module:
    """Same architecture with single-bank CIN layers, initialised from bank 0 of ``model``."""
    cfg = dataclasses.replace(model.config, num_modalities=1)
    out = build_model(cfg, 0)
    cin_names = {name for name, mod in model.named_modules() if isinstance(mod, ConditionalInstanceNorm)}
    state = {}
    for name, value in model.state_dict().items():
        owner = name.rsplit(".", 1)[0]
        state[name] = value[:1] if owner in cin_names else value
    out.load_state_dict(state)
    return out
