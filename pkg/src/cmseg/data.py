"""Volumes, the CSG1 volume file format, preprocessing, augmentation and dataset manifests."""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

MAGIC = b"CSG1"
VERSION = 1
_HEADER = struct.Struct("<4sI3I3fIB")


class VolumeFormatError(ValueError):
    pass


class BadMagicError(VolumeFormatError):
    pass


class VersionMismatchError(VolumeFormatError):
    pass


class TruncatedPayloadError(VolumeFormatError):
    pass


@dataclass
class Volume:
    intensities: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    modality: int = 0

    def __post_init__(self):
        self.intensities = np.asarray(self.intensities, dtype=np.float32)
        if self.intensities.ndim != 3:
            raise ValueError(f"volume must be 3-d, got shape {self.intensities.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        self.modality = int(self.modality)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.intensities.shape


# ------------------------------------------------------------------- file I/O
def write_volume(path, vol: Volume, labels: np.ndarray | None = None) -> None:
    data = np.ascontiguousarray(vol.intensities, dtype="<f4")
    if labels is not None:
        labels = np.asarray(labels)
        if labels.shape != vol.dims:
            raise ValueError(f"labels {labels.shape} do not match volume {vol.dims}")
        if labels.min() < 0 or labels.max() > 255:
            raise ValueError("label ids must fit in u8")
    header = _HEADER.pack(MAGIC, VERSION, *vol.dims, *vol.spacing, vol.modality, labels is not None)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(data.tobytes())
        if labels is not None:
            fh.write(np.ascontiguousarray(labels, dtype=np.uint8).tobytes())


def read_volume(path) -> tuple[Volume, np.ndarray | None]:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise BadMagicError(f"{path}: not a CSG1 volume file")
    if len(raw) < _HEADER.size:
        raise TruncatedPayloadError(f"{path}: header truncated")
    _, version, d, h, w, sd, sh, sw, modality, has_labels = _HEADER.unpack_from(raw)
    if version != VERSION:
        raise VersionMismatchError(f"{path}: version {version}, expected {VERSION}")
    n = d * h * w
    expected = _HEADER.size + 4 * n + (n if has_labels else 0)
    if len(raw) != expected:
        raise TruncatedPayloadError(f"{path}: payload is {len(raw) - _HEADER.size} bytes, "
                                    f"header dims {d}x{h}x{w} need {expected - _HEADER.size}")
    off = _HEADER.size
    inten = np.frombuffer(raw, dtype="<f4", count=n, offset=off).reshape(d, h, w).astype(np.float32)
    labels = None
    if has_labels:
        labels = np.frombuffer(raw, dtype=np.uint8, count=n, offset=off + 4 * n).reshape(d, h, w).copy()
    return Volume(inten, (sd, sh, sw), modality), labels


# -------------------------------------------------------------- preprocessing
def normalize_intensity(vol: Volume) -> Volume:
    """Min-max rescale to ``[0, 1]``; a constant volume becomes all zeros."""
    x = vol.intensities.astype(np.float64)
    lo, hi = x.min(), x.max()
    if hi == lo:
        warnings.warn("constant volume; normalized to zeros", RuntimeWarning, stacklevel=2)
        out = np.zeros_like(x)
    else:
        out = (x - lo) / (hi - lo)
    return Volume(out.astype(np.float32), vol.spacing, vol.modality)


def resample_isotropic(vol: Volume, labels: np.ndarray | None, target_spacing: float = 1.0
                       ) -> tuple[Volume, np.ndarray | None]:
    """Trilinear resampling of intensities, nearest neighbour for labels.

    Output voxel ``o`` samples the input at ``(o + 0.5) * target / spacing - 0.5``,
    i.e. voxel centres are aligned.
    """
    if target_spacing <= 0 or min(vol.spacing) <= 0:
        raise ValueError("spacings must be positive")
    if all(s == target_spacing for s in vol.spacing):
        return Volume(vol.intensities.copy(), vol.spacing, vol.modality), (
            None if labels is None else np.array(labels, copy=True))
    out_dims = [max(1, int(round(n * s / target_spacing))) for n, s in zip(vol.dims, vol.spacing)]
    axes = [(np.arange(o) + 0.5) * target_spacing / s - 0.5 for o, s in zip(out_dims, vol.spacing)]
    coords = np.stack(np.meshgrid(*axes, indexing="ij"))
    inten = ndimage.map_coordinates(vol.intensities.astype(np.float64), coords, order=1, mode="nearest")
    out_labels = None
    if labels is not None:
        out_labels = ndimage.map_coordinates(np.asarray(labels), coords, order=0, mode="nearest")
        out_labels = out_labels.astype(np.asarray(labels).dtype)
    return Volume(inten.astype(np.float32), (target_spacing,) * 3, vol.modality), out_labels


# --------------------------------------------------------------- augmentation
@dataclass
class AugmentParams:
    scale: float = 1.0
    shift: float = 0.0
    flips: tuple[bool, bool, bool] = (False, False, False)


def sample_augment(rng: np.random.Generator, scale_range=(0.9, 1.1), shift_range=(-0.1, 0.1),
                   flip_prob: float = 0.5) -> AugmentParams:
    return AugmentParams(float(rng.uniform(*scale_range)), float(rng.uniform(*shift_range)),
                         tuple(bool(f) for f in rng.random(3) < flip_prob))


def apply_augment(x: np.ndarray, labels: np.ndarray | None, params: AugmentParams):
    """``clip(scale * x + shift, 0, 1)`` then flip the chosen axes of both arrays."""
    out = np.clip(x * np.float32(params.scale) + np.float32(params.shift), 0.0, 1.0).astype(x.dtype)
    axes = tuple(i for i, f in enumerate(params.flips) if f)
    if axes:
        out = np.flip(out, axis=axes)
        if labels is not None:
            labels = np.flip(labels, axis=axes)
    out = np.ascontiguousarray(out)
    return out, (None if labels is None else np.ascontiguousarray(labels))


def augment(vol: Volume, labels: np.ndarray | None, rng: np.random.Generator) -> tuple[Volume, np.ndarray | None]:
    x, y = apply_augment(vol.intensities, labels, sample_augment(rng))
    return Volume(x, vol.spacing, vol.modality), y


def crop_corner(dims: Sequence[int], crop: Sequence[int], rng: np.random.Generator) -> tuple[int, int, int]:
    if any(c > d for c, d in zip(crop, dims)):
        raise ValueError(f"crop {tuple(crop)} larger than volume {tuple(dims)}")
    return tuple(int(rng.integers(0, d - c + 1)) for d, c in zip(dims, crop))


def random_crop(vol: Volume, labels: np.ndarray | None, crop_size, rng: np.random.Generator
                ) -> tuple[Volume, np.ndarray | None]:
    crop = (crop_size,) * 3 if isinstance(crop_size, int) else tuple(crop_size)
    corner = crop_corner(vol.dims, crop, rng)
    sl = tuple(slice(c, c + n) for c, n in zip(corner, crop))
    return (Volume(vol.intensities[sl].copy(), vol.spacing, vol.modality),
            None if labels is None else labels[sl].copy())


# ------------------------------------------------------------------ manifest
@dataclass(frozen=True)
class ManifestEntry:
    split: str
    modality: int
    path: str


@dataclass
class Manifest:
    """Key/value header plus one ``split modality path`` line per sample.

    Paths are relative to the manifest file's directory.
    """

    meta: dict[str, str] = field(default_factory=dict)
    entries: list[ManifestEntry] = field(default_factory=list)
    root: Path = Path(".")

    def select(self, split: str, modality: int | None = None) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == split and (modality is None or e.modality == modality)]

    def resolve(self, entry: ManifestEntry) -> Path:
        return self.root / entry.path

    def modalities(self, split: str | None = None) -> list[int]:
        return sorted({e.modality for e in self.entries if split is None or e.split == split})

    def dumps(self) -> str:
        lines = ["# cmseg dataset manifest"]
        lines += [f"{k} = {v}" for k, v in self.meta.items()]
        lines += ["", "[samples]"]
        lines += [f"{e.split} {e.modality} {e.path}" for e in self.entries]
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path) -> "Manifest":
        path = Path(path)
        meta, entries, in_samples = {}, [], False
        for lineno, line in enumerate(path.read_text().splitlines(), start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if line == "[samples]":
                in_samples = True
                continue
            if in_samples:
                parts = line.split(maxsplit=2)
                if len(parts) != 3:
                    raise ValueError(f"{path}:{lineno}: expected 'split modality path'")
                entries.append(ManifestEntry(parts[0], int(parts[1]), parts[2]))
            else:
                key, sep, value = line.partition("=")
                if not sep:
                    raise ValueError(f"{path}:{lineno}: expected 'key = value'")
                meta[key.strip()] = value.strip()
        return cls(meta, entries, path.parent)


def load_samples(manifest: Manifest, entries: Iterable[ManifestEntry]) -> list[tuple[Volume, np.ndarray]]:
    out = []
    for e in entries:
        vol, labels = read_volume(manifest.resolve(e))
        if labels is None:
            raise ValueError(f"{e.path} has no labels")
        out.append((vol, labels))
    return out
