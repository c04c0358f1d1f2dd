"""Small configurations shared by the training, CLI and acceptance tests."""

import dataclasses

from cmseg.config import TrainConfig
from cmseg.models import ModelConfig

TINY_MODEL = ModelConfig(arch="cvit", num_modalities=2, num_classes=8, input_size=8, patch_size=4, hidden=8,
                         layers=1, heads=2, mlp_ratio=2, decoder_features=2)


def tiny_config(out_dir, manifest_path="", **kw) -> TrainConfig:
    base = TrainConfig(epochs=2, peak_lr=1e-2, samples_per_batch=2, crops_per_sample=1, seed=5,
                       manifest=str(manifest_path), out_dir=str(out_dir), model=TINY_MODEL, infer_batch=8)
    return dataclasses.replace(base, **kw)

# one line per acceptance criterion, echoed again in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def report(number: int, ok: bool, detail: str) -> None:
    line = f"[criterion {number}] {'PASS' if ok else 'FAIL'} {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
