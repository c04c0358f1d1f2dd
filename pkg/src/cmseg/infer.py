"""Sliding-window inference, evaluation tables and PPM slice dumps."""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .data import Manifest, Volume, read_volume
from .losses import DiceScores, dice_metric, mean_scores
from .nn import Module
from .tensor import ShapeError


@dataclass(frozen=True)
class WindowPlan:
    window: tuple[int, int, int]
    overlap: float
    offsets: tuple[tuple[int, ...], tuple[int, ...], tuple[int, ...]]
    weighting: str = "uniform"

    def corners(self) -> list[tuple[int, int, int]]:
        """Window corners in raster order (last axis fastest)."""
        return list(itertools.product(*self.offsets))

    def __len__(self) -> int:
        return int(np.prod([len(o) for o in self.offsets]))


def axis_offsets(dim: int, window: int, overlap: float) -> tuple[int, ...]:
    if window > dim:
        raise ShapeError(f"window {window} larger than volume extent {dim}")
    stride = max(1, round(window * (1.0 - overlap)))
    offs = list(range(0, dim - window + 1, stride))
    if offs[-1] + window < dim:
        offs.append(dim - window)
    return tuple(offs)


def plan_windows(dims: Sequence[int], window, overlap: float = 0.5) -> WindowPlan:
    if not 0.0 <= overlap < 1.0:
        raise ValueError(f"overlap must be in [0, 1), got {overlap}")
    win = (int(window),) * len(dims) if np.isscalar(window) else tuple(int(w) for w in window)
    offsets = tuple(axis_offsets(int(d), w, overlap) for d, w in zip(dims, win))
    return WindowPlan(win, float(overlap), offsets)


def sliding_infer(model, vol, m: int, plan: WindowPlan, batch_size: int = 4) -> tuple[np.ndarray, np.ndarray]:
    """Average window logits (uniform weights) and take the per-voxel argmax.

    ``model(x, m)`` must map a ``(B, 1, *window)`` tensor to ``(B, C, *window)`` logits.
    Returns ``(logits (C, D, H, W), labels (D, H, W) uint8)``.
    """
    img = vol.intensities if isinstance(vol, Volume) else np.asarray(vol)
    dtype = T.get_default_dtype()
    acc = None
    count = np.zeros(img.shape, dtype=dtype)
    corners = plan.corners()
    with T.no_grad():
        for start in range(0, len(corners), batch_size):
            chunk = corners[start:start + batch_size]
            slices = [tuple(slice(c, c + w) for c, w in zip(corner, plan.window)) for corner in chunk]
            x = np.stack([img[sl] for sl in slices])[:, None].astype(dtype)
            out = model(T.Tensor(x), m)
            logits = out.data if isinstance(out, T.Tensor) else np.asarray(out)
            if acc is None:
                acc = np.zeros((logits.shape[1],) + img.shape, dtype=logits.dtype)
            for k, sl in enumerate(slices):
                acc[(slice(None),) + sl] += logits[k]
                count[sl] += 1
    if np.any(count == 0):
        raise ShapeError("window plan leaves voxels uncovered")
    logits = acc / count
    return logits, np.argmax(logits, axis=0).astype(np.uint8)


# ------------------------------------------------------------------ evaluation
@dataclass
class VolumeResult:
    path: str
    modality: int
    scores: DiceScores


@dataclass
class EvalResult:
    volumes: list[VolumeResult]
    per_modality: dict[int, DiceScores]
    csv_path: Path | None = None


Predictor = Callable[[Volume, int], np.ndarray]


def model_predictor(model: Module, window: int, overlap: float = 0.5, batch_size: int = 4) -> Predictor:
    def predict(vol: Volume, m: int) -> np.ndarray:
        bank = m if model.num_modalities > 1 else 0
        return sliding_infer(model, vol, bank, plan_windows(vol.dims, window, overlap), batch_size)[1]
    return predict


def evaluate(predict: Predictor, manifest: Manifest, split: str = "test", modality: int | None = None,
             num_classes: int = 8, out_csv=None, class_names: Sequence[str] | None = None) -> EvalResult:
    """Per-volume and aggregate Dice per modality; optional CSV with one row per (volume, class)."""
    entries = manifest.select(split, modality)
    if not entries:
        raise FileNotFoundError(f"no '{split}' samples for modality {modality} in manifest")
    results = []
    for e in entries:
        vol, labels = read_volume(manifest.resolve(e))
        if labels is None:
            raise ValueError(f"{e.path} has no labels")
        pred = predict(vol, e.modality)
        results.append(VolumeResult(e.path, e.modality, dice_metric(pred, labels, num_classes)))
    per_mod = {m: mean_scores([r.scores for r in results if r.modality == m])
               for m in sorted({r.modality for r in results})}
    res = EvalResult(results, per_mod)
    if out_csv is not None:
        names = list(class_names) if class_names else [f"c{c}" for c in range(num_classes)]
        write_eval_csv(out_csv, res, names)
        res.csv_path = Path(out_csv)
    return res


def _score_rows(scope: str, volume: str, m: int, s: DiceScores, names: Sequence[str]) -> list[list]:
    rows = [[scope, volume, m, names[c], repr(float(d))] for c, d in enumerate(s.per_class, start=1)]
    rows.append([scope, volume, m, "mean", repr(float(s.mean))])
    rows.append([scope, volume, m, "whole_foreground", repr(float(s.whole_foreground))])
    return rows


def write_eval_csv(path, res: EvalResult, names: Sequence[str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["scope", "volume", "modality", "class", "dice"])
        for r in res.volumes:
            w.writerows(_score_rows("volume", r.path, r.modality, r.scores, names))
        for m, s in res.per_modality.items():
            w.writerows(_score_rows("summary", "*", m, s, names))


# ----------------------------------------------------------------- slice dumps
PALETTE = np.array([
    (0, 0, 0),
    (255, 0, 0),
    (0, 255, 0),
    (0, 0, 255),
    (255, 255, 0),
    (255, 0, 255),
    (0, 255, 255),
    (255, 128, 0),
], dtype=np.float64)


def palette_color(c: int) -> np.ndarray:
    return PALETTE[c] if c < len(PALETTE) else PALETTE[1 + (c - 1) % (len(PALETTE) - 1)]


def gray8(x: np.ndarray) -> np.ndarray:
    return np.floor(np.clip(np.asarray(x, np.float64), 0.0, 1.0) * 255.0 + 0.5)


def overlay(gray: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """RGB uint8: gray where label 0, else ``round(0.5 gray + 0.5 color)`` (halves round up)."""
    rgb = np.repeat(np.asarray(gray, np.float64)[..., None], 3, axis=-1)
    for c in np.unique(labels):
        if c == 0:
            continue
        mask = labels == c
        rgb[mask] = np.floor(0.5 * rgb[mask] + 0.5 * palette_color(int(c)) + 0.5)
    return rgb.astype(np.uint8)


def ppm_bytes(rgb: np.ndarray) -> bytes:
    h, w, _ = rgb.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(rgb, dtype=np.uint8).tobytes()


def dump_slices(vol, gt: np.ndarray | None, pred: np.ndarray | None, axis: int, indices: Sequence[int],
                out_dir, prefix: str = "slice") -> list[Path]:
    """Write ``image``, ``gt`` and ``pred`` PPM panels for each slice index along ``axis``."""
    img = vol.intensities if isinstance(vol, Volume) else np.asarray(vol)
    for name, arr in (("gt", gt), ("pred", pred)):
        if arr is not None and np.shape(arr) != img.shape:
            raise ShapeError(f"{name} shape {np.shape(arr)} does not match volume {img.shape}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for idx in indices:
        if not 0 <= idx < img.shape[axis]:
            raise IndexError(f"slice {idx} out of range for axis {axis} of size {img.shape[axis]}")
        g = gray8(np.take(img, idx, axis=axis))
        panels = {"image": overlay(g, np.zeros(g.shape, np.uint8))}
        if gt is not None:
            panels["gt"] = overlay(g, np.take(gt, idx, axis=axis))
        if pred is not None:
            panels["pred"] = overlay(g, np.take(pred, idx, axis=axis))
        for kind, rgb in panels.items():
            path = out / f"{prefix}_ax{axis}_{idx:03d}_{kind}.ppm"
            path.write_bytes(ppm_bytes(rgb))
            written.append(path)
    return written
