"""Cross-modality protocol comparison over several seeds.

Per seed, five trainings: an A-only baseline (also the fine-tune source), a
B-only baseline, fine-tuning A -> B, joint training and conditional-interleaved
training.  Every resulting model is scored on the test split of both
modalities.  The ``baseline`` row reports A from the A-only model and B from
the B-only model.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import TrainConfig
from .data import Manifest
from .infer import evaluate, model_predictor
from .losses import DiceScores
from .train import load_model, train

log = logging.getLogger(__name__)

PROTOCOL_ROWS = ("baseline", "fine-tune", "joint", "conditional-interleaved")
SUMMARY_COLUMNS = ("protocol", "seeds", "mean_dice_b", "whole_foreground_dice_b", "mean_dice_a",
                   "whole_foreground_dice_a")
RESULT_COLUMNS = ("seed", "protocol", "modality", "mean_dice", "whole_foreground_dice")


@dataclass
class SeedResult:
    seed: int
    scores: dict[str, dict[int, DiceScores]]  # protocol row -> modality -> scores
    seconds: float


def summary_columns(num_classes: int) -> list[str]:
    return list(SUMMARY_COLUMNS) + [f"dice_b_c{c}" for c in range(1, num_classes)]


def result_columns(num_classes: int) -> list[str]:
    return list(RESULT_COLUMNS) + [f"dice_c{c}" for c in range(1, num_classes)]


def _score(model_path: Path, manifest: Manifest, cfg: TrainConfig, modalities: Sequence[int]) -> dict[int, DiceScores]:
    model, _ = load_model(model_path, allow_mismatch=True)
    predict = model_predictor(model, cfg.model.input_size, cfg.overlap, cfg.infer_batch)
    out = {}
    for m in modalities:
        out[m] = evaluate(predict, manifest, "test", m, cfg.model.num_classes).per_modality[m]
    return out


def run_seed(base: TrainConfig, manifest: Manifest, seed: int, out_dir) -> SeedResult:
    out = Path(out_dir) / f"seed{seed}"
    a, b = base.assistant_modality, base.target_modality
    t0 = time.perf_counter()

    def cfg_for(name: str, **kw) -> TrainConfig:
        return dataclasses.replace(base, seed=seed, out_dir=str(out / name), manifest=str(base.manifest), **kw)

    runs = {}
    runs["baseline-a"] = train(cfg_for("baseline-a", protocol="baseline", target_modality=a, assistant_modality=b),
                               manifest)
    runs["baseline-b"] = train(cfg_for("baseline-b", protocol="baseline"), manifest)
    runs["fine-tune"] = train(cfg_for("fine-tune", protocol="fine-tune",
                                      source_checkpoint=str(runs["baseline-a"].best_checkpoint)), manifest)
    runs["joint"] = train(cfg_for("joint", protocol="joint"), manifest)
    runs["conditional-interleaved"] = train(cfg_for("conditional-interleaved", protocol="conditional-interleaved"),
                                            manifest)
    scores = {
        "baseline": {a: _score(runs["baseline-a"].best_checkpoint, manifest, base, [a])[a],
                     b: _score(runs["baseline-b"].best_checkpoint, manifest, base, [b])[b]},
    }
    for name in ("fine-tune", "joint", "conditional-interleaved"):
        scores[name] = _score(runs[name].best_checkpoint, manifest, base, [a, b])
    res = SeedResult(seed, scores, time.perf_counter() - t0)
    log.info("seed %d done in %.0fs", seed, res.seconds)
    return res


def write_results(path, results: Sequence[SeedResult], num_classes: int) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(result_columns(num_classes))
        for r in results:
            for proto in PROTOCOL_ROWS:
                for m, s in sorted(r.scores[proto].items()):
                    w.writerow([r.seed, proto, m, repr(s.mean), repr(s.whole_foreground),
                                *map(lambda v: repr(float(v)), s.per_class)])


def summarize(results: Sequence[SeedResult], a: int, b: int, num_classes: int) -> list[dict]:
    """Median over seeds, one row per protocol, columns in ``summary_columns`` order."""
    rows = []
    for proto in PROTOCOL_ROWS:
        sa = [r.scores[proto][a] for r in results]
        sb = [r.scores[proto][b] for r in results]
        row = {
            "protocol": proto,
            "seeds": len(results),
            "mean_dice_b": float(np.median([s.mean for s in sb])),
            "whole_foreground_dice_b": float(np.median([s.whole_foreground for s in sb])),
            "mean_dice_a": float(np.median([s.mean for s in sa])),
            "whole_foreground_dice_a": float(np.median([s.whole_foreground for s in sa])),
        }
        per_class = np.median([s.per_class for s in sb], axis=0)
        for c, v in enumerate(per_class, start=1):
            row[f"dice_b_c{c}"] = float(v)
        rows.append(row)
    return rows


def write_summary(path, rows: Sequence[dict], num_classes: int) -> None:
    cols = summary_columns(num_classes)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for row in rows:
            w.writerow([row[c] if isinstance(row[c], (str, int)) else f"{row[c]:.6f}" for c in cols])


def compare(base: TrainConfig, manifest: Manifest, seeds: Sequence[int], out_dir) -> list[dict]:
    """Run every protocol for every seed; writes ``results.csv`` and ``summary.csv``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    results = []
    for seed in seeds:
        results.append(run_seed(base, manifest, seed, out))
        write_results(out / "results.csv", results, base.model.num_classes)
    rows = summarize(results, base.assistant_modality, base.target_modality, base.model.num_classes)
    write_summary(out / "summary.csv", rows, base.model.num_classes)
    return rows
