"""Synthetic two-modality cardiac-like phantoms.

Seven ellipsoidal structures sit inside an ellipsoidal body; the myocardium is
a shell around the left ventricle.  Every sample gets its own rigid pose and
per-structure size jitter, so no two samples are registered.  Each modality
renders the same label map through its own class-intensity table, a smooth
multiplicative bias field and Gaussian noise.

Class ids: 0 background, 1 MYO, 2 LA, 3 LV, 4 RA, 5 RV, 6 AA, 7 PA.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Manifest, ManifestEntry, Volume, normalize_intensity, resample_isotropic, write_volume

CLASS_NAMES = ("background", "MYO", "LA", "LV", "RA", "RV", "AA", "PA")

# (label, centre (z, y, x), semi-axes) in body-normalised coordinates [-1, 1].
# Drawn in order; LV is drawn after, and strictly inside, the MYO ellipsoid.
CANONICAL_LAYOUT = (
    (1, (0.29, 0.38, 0.33), (0.40, 0.375, 0.375)),
    (3, (0.29, 0.38, 0.33), (0.25, 0.225, 0.225)),
    (5, (0.29, -0.44, 0.33), (0.35, 0.275, 0.30)),
    (2, (-0.46, 0.44, -0.04), (0.25, 0.25, 0.25)),
    (4, (-0.46, -0.44, -0.04), (0.25, 0.25, 0.25)),
    (6, (-0.15, 0.00, -0.70), (0.56, 0.15, 0.15)),
    (7, (0.70, 0.00, -0.54), (0.15, 0.375, 0.15)),
)
BODY_AXES = (0.92, 0.90, 0.90)


@dataclass
class Appearance:
    # index 0: outside the body, 1: body tissue (label 0), 1 + c: class c
    means: tuple[float, ...]
    noise_std: float = 0.03
    bias_amplitude: float = 0.0
    bias_frequency: float = 1.0


# Assistant modality: every structure has its own intensity.
APPEARANCE_A = Appearance(
    means=(0.0, 0.30, 0.12, 0.55, 0.85, 0.65, 0.75, 0.95, 0.42),
    noise_std=0.04, bias_amplitude=0.25, bias_frequency=1.0)
# Target modality: blood pools share nearly one intensity.
APPEARANCE_B = Appearance(
    means=(0.0, 0.40, 0.55, 0.78, 0.82, 0.78, 0.82, 0.86, 0.86),
    noise_std=0.03, bias_amplitude=0.05, bias_frequency=0.5)


@dataclass
class PhantomSpec:
    dims: tuple[int, int, int] = (48, 48, 48)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    num_structures: int = 7
    rotation_deg: float = 10.0
    translation: float = 0.06
    center_jitter: float = 0.03
    scale_jitter: float = 0.10
    appearances: tuple[Appearance, ...] = field(default_factory=lambda: (APPEARANCE_A, APPEARANCE_B))
    min_separation: float = 0.1
    max_retries: int = 10

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.spacing = tuple(float(s) for s in self.spacing)
        if not 1 <= self.num_structures <= len(CANONICAL_LAYOUT):
            raise ValueError(f"num_structures must be in [1, {len(CANONICAL_LAYOUT)}]")
        if min(self.dims) < 4 or min(self.spacing) <= 0:
            raise ValueError("dims must be >= 4 and spacings positive")
        if not 0 <= self.scale_jitter < 1 or self.rotation_deg < 0 or self.translation < 0:
            raise ValueError("jitter ranges must be non-negative (scale jitter < 1)")
        for app in self.appearances:
            if len(app.means) != self.num_classes + 1:
                raise ValueError(f"appearance tables need {self.num_classes + 1} entries")
            if app.noise_std < 0 or app.bias_amplitude < 0:
                raise ValueError("noise and bias amplitude must be non-negative")

    @property
    def num_classes(self) -> int:
        return self.num_structures + 1

    @property
    def num_modalities(self) -> int:
        return len(self.appearances)

    def separation(self) -> float:
        """Largest per-class difference between the first two modalities' intensity tables."""
        a, b = (np.asarray(x.means) for x in self.appearances[:2])
        return float(np.abs(a[2:] - b[2:]).max())


class PhantomError(RuntimeError):
    pass


@dataclass
class Ellipsoid:
    label: int
    center: np.ndarray  # normalised, canonical frame
    axes: np.ndarray


@dataclass
class Geometry:
    rotation: np.ndarray  # canonical -> world
    translation: np.ndarray
    structures: list[Ellipsoid]

    def voxel_volume(self, e: Ellipsoid, dims) -> float:
        """Analytic ellipsoid volume in voxels: ``4/3 pi abc`` with axes scaled to voxel units."""
        half = np.asarray(dims, float) / 2.0
        return 4.0 / 3.0 * np.pi * float(np.prod(e.axes * half))


def _rotation(rng: np.random.Generator, max_deg: float) -> np.ndarray:
    ax, ay, az = np.deg2rad(rng.uniform(-max_deg, max_deg, size=3))
    rx = np.array([[1, 0, 0], [0, np.cos(ax), -np.sin(ax)], [0, np.sin(ax), np.cos(ax)]])
    ry = np.array([[np.cos(ay), 0, np.sin(ay)], [0, 1, 0], [-np.sin(ay), 0, np.cos(ay)]])
    rz = np.array([[np.cos(az), -np.sin(az), 0], [np.sin(az), np.cos(az), 0], [0, 0, 1]])
    return rz @ ry @ rx


def sample_geometry(rng: np.random.Generator, spec: PhantomSpec) -> Geometry:
    rot = _rotation(rng, spec.rotation_deg)
    trans = rng.uniform(-spec.translation, spec.translation, size=3)
    structures = []
    shared_center = None
    for label, center, axes in CANONICAL_LAYOUT:
        jitter = rng.uniform(-spec.center_jitter, spec.center_jitter, size=3)
        scale = rng.uniform(1 - spec.scale_jitter, 1 + spec.scale_jitter, size=3)
        if label > spec.num_structures:
            continue
        c = np.asarray(center) + jitter
        if label == 3 and shared_center is not None:
            c = shared_center  # LV stays concentric with the myocardium
        if label == 1:
            shared_center = c
        structures.append(Ellipsoid(label, c, np.asarray(axes) * scale))
    return Geometry(rot, trans, structures)


def _world_coords(dims) -> np.ndarray:
    """Voxel centres in body-normalised coordinates, shape (3, D, H, W)."""
    axes = [(np.arange(n) + 0.5 - n / 2.0) / (n / 2.0) for n in dims]
    return np.stack(np.meshgrid(*axes, indexing="ij"))


def render_regions(geom: Geometry, dims) -> tuple[np.ndarray, np.ndarray]:
    """Return (region ids, labels); region 0 is outside the body, 1 body tissue, 1 + c class c."""
    world = _world_coords(dims)
    # world = R @ canonical + t  =>  canonical = R^T (world - t)
    canon = np.einsum("ji,j...->i...", geom.rotation, world - geom.translation[:, None, None, None])
    regions = np.zeros(dims, dtype=np.uint8)
    body = np.sum((canon / np.asarray(BODY_AXES)[:, None, None, None]) ** 2, axis=0) <= 1.0
    regions[body] = 1
    labels = np.zeros(dims, dtype=np.uint8)
    for e in geom.structures:
        d = (canon - e.center[:, None, None, None]) / e.axes[:, None, None, None]
        inside = np.sum(d * d, axis=0) <= 1.0
        labels[inside] = e.label
        regions[inside] = 1 + e.label
    return regions, labels


def bias_field(rng: np.random.Generator, dims, amplitude: float, frequency: float) -> np.ndarray:
    """``exp(amplitude * mean of 3 separable cosine products)`` with random phases."""
    if amplitude == 0.0:
        return np.ones(dims)
    grids = [np.arange(n) / n for n in dims]
    acc = np.zeros(dims)
    for _ in range(3):
        freqs = frequency * rng.uniform(0.5, 1.0, size=3)
        phases = rng.uniform(0, 2 * np.pi, size=3)
        f = [np.cos(2 * np.pi * fr * g + ph) for fr, g, ph in zip(freqs, grids, phases)]
        acc += f[0][:, None, None] * f[1][None, :, None] * f[2][None, None, :]
    return np.exp(amplitude * acc / 3.0)


def render(regions: np.ndarray, app: Appearance, rng: np.random.Generator) -> np.ndarray:
    means = np.asarray(app.means, dtype=np.float64)
    x = means[regions] * bias_field(rng, regions.shape, app.bias_amplitude, app.bias_frequency)
    if app.noise_std > 0:
        x = x + rng.normal(0.0, app.noise_std, size=regions.shape)
    return np.clip(x, 0.0, 1.0)


def _rng(seed, sub: int) -> np.random.Generator:
    entropy = list(seed) if isinstance(seed, (list, tuple)) else [int(seed)]
    return np.random.default_rng(entropy + [sub])


def generate_phantom(seed, spec: PhantomSpec, m: int) -> tuple[Volume, np.ndarray]:
    """Deterministic (volume, labels) for a given seed, spec and modality.

    A sample in which some structure rasterises to zero voxels is redrawn with the
    next sub-seed, at most ``spec.max_retries`` times.
    """
    if not 0 <= m < spec.num_modalities:
        raise ValueError(f"modality {m} not in [0, {spec.num_modalities})")
    for sub in range(spec.max_retries):
        rng = _rng(seed, sub)
        geom = sample_geometry(rng, spec)
        regions, labels = render_regions(geom, spec.dims)
        counts = np.bincount(labels.ravel(), minlength=spec.num_classes)
        if np.all(counts[1:] > 0):
            x = render(regions, spec.appearances[m], rng)
            return Volume(x.astype(np.float32), spec.spacing, m), labels
    raise PhantomError(f"degenerate geometry after {spec.max_retries} retries for seed {seed!r}")


DEFAULT_COUNTS = {"train": (16, 8), "val": (4, 4), "test": (8, 8)}
_SPLIT_IDS = {"train": 0, "val": 1, "test": 2}


def prepare(vol: Volume, labels: np.ndarray, target_spacing: float = 1.0) -> tuple[Volume, np.ndarray]:
    vol, labels = resample_isotropic(vol, labels, target_spacing)
    return normalize_intensity(vol), labels


def generate_dataset(out_dir, seed: int, spec: PhantomSpec = None, counts: dict | None = None) -> Manifest:
    """Write every split/modality sample as a CSG1 file plus ``manifest.txt``."""
    spec = spec or PhantomSpec()
    counts = counts or DEFAULT_COUNTS
    out = Path(out_dir)
    meta = {
        "version": "1",
        "seed": str(seed),
        "dims": " ".join(map(str, spec.dims)),
        "num_classes": str(spec.num_classes),
        "num_modalities": str(spec.num_modalities),
        "class_names": " ".join(CLASS_NAMES[: spec.num_classes]),
    }
    for split, per_mod in counts.items():
        meta[f"counts.{split}"] = " ".join(map(str, per_mod))
    entries = []
    for split, per_mod in counts.items():
        (out / split).mkdir(parents=True, exist_ok=True)
        for m, n in enumerate(per_mod):
            for i in range(n):
                vol, labels = generate_phantom([seed, _SPLIT_IDS.get(split, 9), m, i], spec, m)
                vol, labels = prepare(vol, labels, spec.spacing[0] if len(set(spec.spacing)) == 1 else 1.0)
                rel = f"{split}/m{m}_{i:03d}.csg"
                write_volume(out / rel, vol, labels)
                entries.append(ManifestEntry(split, m, rel))
    manifest = Manifest(meta, entries, out)
    manifest.save(out / "manifest.txt")
    return manifest
