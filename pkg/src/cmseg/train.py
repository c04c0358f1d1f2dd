"""Training loop, samplers, AdamW and the learning-rate schedule.

Four protocols share one loop:

* ``baseline``: unconditional model, target modality only.
* ``fine-tune``: unconditional model initialised from a ``source_checkpoint``
  (normally a baseline on the assistant modality), then target modality only.
* ``joint``: unconditional model, both modalities, modality-pure batches that
  alternate A, B, A, B.
* ``conditional-interleaved``: conditional model, both modalities mixed inside
  each batch.
"""

from __future__ import annotations

import contextlib
import csv
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import TrainConfig, save_config
from .data import Manifest, Volume, apply_augment, load_samples, sample_augment
from .losses import DiceScores, dice_metric, loss_terms, mean_scores
from .models import ModelConfig, build_model
from .nn import Module, Parameter
from .tensor import NonFiniteGradientError, ShapeError

log = logging.getLogger(__name__)


class EmptyPoolError(ValueError):
    pass


class TrainingDivergedError(FloatingPointError):
    pass


# -------------------------------------------------------------------- samplers
@dataclass(frozen=True)
class BatchSpec:
    samples: int  # N_s
    crops: int  # N_c
    crop_size: int

    @property
    def size(self) -> int:
        return self.samples * self.crops


@dataclass
class Batch:
    x: np.ndarray  # (n, 1, S, S, S)
    y: np.ndarray  # (n, S, S, S)
    modality: np.ndarray  # (n,)
    sample_ids: list[tuple[int, int]]  # (modality, index in that pool), one per crop


Pools = dict  # modality -> list of (Volume, labels)


def _check_pools(pools: Pools) -> None:
    if not pools:
        raise EmptyPoolError("no modality pools given")
    for m, pool in pools.items():
        if len(pool) == 0:
            raise EmptyPoolError(f"modality {m} has no samples")


def interleaved_order(sizes: dict[int, int], n_samples: int, rng: np.random.Generator,
                      mode: str = "proportional") -> list[list[tuple[int, int]]]:
    """One epoch of mixed-modality batches as ``(modality, index)`` picks.

    ``proportional``: the union of all pools is shuffled, so each modality shows
    up in proportion to its sample count.  ``uniform``: each pick first draws a
    modality uniformly, then a sample from a per-modality shuffled cycle; the
    epoch is long enough for the largest pool to be covered in expectation.
    """
    mods = sorted(sizes)
    steps = _interleaved_steps(sizes, n_samples, mode)
    if mode == "proportional":
        union = [(m, i) for m in mods for i in range(sizes[m])]
        perm = rng.permutation(len(union))
        picks = [union[j] for j in perm]
        picks += [union[j] for j in rng.integers(0, len(union), steps * n_samples - len(picks))]
    elif mode == "uniform":
        cycles = {m: list(rng.permutation(sizes[m])) for m in mods}
        choice = rng.integers(0, len(mods), steps * n_samples)
        picks = []
        for c in choice:
            m = mods[c]
            if not cycles[m]:
                cycles[m] = list(rng.permutation(sizes[m]))
            picks.append((m, int(cycles[m].pop())))
    else:
        raise ValueError(f"unknown modality sampling mode {mode!r}")
    return [picks[k * n_samples:(k + 1) * n_samples] for k in range(steps)]


def joint_order(sizes: dict[int, int], n_samples: int, rng: np.random.Generator) -> list[list[tuple[int, int]]]:
    """One epoch of modality-pure batches alternating over the sorted modalities.

    Each modality gets ``ceil(max pool / n_samples)`` batches drawn from its own
    shuffled cycle, so smaller pools are revisited within the epoch.
    """
    mods = sorted(sizes)
    per_mod = math.ceil(max(sizes.values()) / n_samples)
    streams = {}
    for m in mods:
        need = per_mod * n_samples
        reps = math.ceil(need / sizes[m])
        seq = np.concatenate([rng.permutation(sizes[m]) for _ in range(reps)])[:need]
        streams[m] = [(m, int(i)) for i in seq]
    batches = []
    for k in range(per_mod):
        for m in mods:
            batches.append(streams[m][k * n_samples:(k + 1) * n_samples])
    return batches


def make_batch(pools: Pools, picks: Sequence[tuple[int, int]], spec: BatchSpec,
               rng: np.random.Generator, augment: bool = True) -> Batch:
    """``spec.crops`` random crops (each separately augmented) from every picked sample."""
    xs, ys, ms, ids = [], [], [], []
    s = spec.crop_size
    for m, i in picks:
        vol, labels = pools[m][i]
        img = vol.intensities
        for _ in range(spec.crops):
            if any(s > d for d in img.shape):
                raise ShapeError(f"crop {s} larger than volume {img.shape}")
            corner = [int(rng.integers(0, d - s + 1)) for d in img.shape]
            sl = tuple(slice(c, c + s) for c in corner)
            x, y = img[sl], labels[sl]
            if augment:
                x, y = apply_augment(x, y, sample_augment(rng))
            xs.append(np.ascontiguousarray(x))
            ys.append(np.ascontiguousarray(y))
            ms.append(m)
            ids.append((m, i))
    return Batch(np.stack(xs)[:, None], np.stack(ys), np.asarray(ms, dtype=np.int64), ids)


def _stream(order_fn, pools: Pools, spec: BatchSpec, rng: np.random.Generator, augment: bool) -> Iterator[Batch]:
    _check_pools(pools)
    sizes = {m: len(p) for m, p in pools.items()}
    while True:
        for picks in order_fn(sizes, spec.samples, rng):
            yield make_batch(pools, picks, spec, rng, augment)


def interleaved_sampler(pools: Pools, spec: BatchSpec, rng: np.random.Generator,
                        mode: str = "proportional", augment: bool = True) -> Iterator[Batch]:
    """Endless stream of mixed-modality batches, epoch after epoch."""
    return _stream(lambda s, n, r: interleaved_order(s, n, r, mode), pools, spec, rng, augment)


def joint_sampler(pools: Pools, spec: BatchSpec, rng: np.random.Generator, augment: bool = True) -> Iterator[Batch]:
    """Endless stream of modality-pure batches; batch ``k`` has the ``k mod M``-th modality."""
    return _stream(joint_order, pools, spec, rng, augment)


def _interleaved_steps(sizes: dict[int, int], n_samples: int, mode: str) -> int:
    if mode == "uniform":
        return math.ceil(len(sizes) * max(sizes.values()) / n_samples)
    return math.ceil(sum(sizes.values()) / n_samples)


def steps_per_epoch(protocol: str, sizes: dict[int, int], n_samples: int, mode: str = "proportional") -> int:
    if protocol == "joint":
        return len(sizes) * math.ceil(max(sizes.values()) / n_samples)
    return _interleaved_steps(sizes, n_samples, mode)


# ------------------------------------------------------------------- optimizer
@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros(cls, params: Sequence[Parameter]) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adamw_step(params: Sequence[Parameter], grads: Sequence[np.ndarray], state: AdamState, lr: float,
               betas=(0.9, 0.999), eps: float = 1e-8, wd: float = 0.0, decay_mask: Sequence[bool] | None = None
               ) -> None:
    """Bias-corrected Adam with decoupled decay ``p <- p - lr*wd*p``.

    Raises ``NonFiniteGradientError`` before touching anything if a gradient is not finite.
    """
    for p, g in zip(params, grads):
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError("non-finite gradient; optimizer step skipped")
    b1, b2 = betas
    state.t += 1
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for k, (p, g) in enumerate(zip(params, grads)):
        m, v = state.m[k], state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if wd and (decay_mask is None or decay_mask[k]):
            p.data -= lr * wd * p.data
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def lr_schedule(step: int, total_steps: int, warmup_steps: int, peak: float) -> float:
    """Linear warm-up from 0 to ``peak``, then cosine decay to 0 at ``total_steps``."""
    if warmup_steps >= total_steps:
        raise ValueError("warmup_steps must be smaller than total_steps")
    if step < warmup_steps:
        return peak * step / warmup_steps
    progress = min(1.0, (step - warmup_steps) / (total_steps - warmup_steps))
    return peak * 0.5 * (1.0 + math.cos(math.pi * progress))


def clip_grad_norm(grads: Sequence[np.ndarray], max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``; returns the old norm."""
    norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-6)
        for g in grads:
            g *= scale
    return norm


def decay_mask(model: Module) -> list[bool]:
    """Weight decay on conv/linear weights only; not on norms, biases or positional embeddings."""
    skip = (".gamma", ".beta", ".bias", ".pos")
    return [not ("." + name).endswith(skip) for name, _ in model.named_parameters()]


# ------------------------------------------------------------------ checkpoints
def model_checkpoint(model: Module, cfg: TrainConfig, state: AdamState | None = None, epoch: int = 0,
                     rng: np.random.Generator | None = None, extra: dict | None = None) -> Checkpoint:
    tensors = {}
    names = [n for n, _ in model.named_parameters()]
    for name, p in model.named_parameters():
        tensors["param/" + name] = p.data
    if state is not None:
        for name, m, v in zip(names, state.m, state.v):
            tensors["adam_m/" + name] = m
            tensors["adam_v/" + name] = v
    stored = cfg.to_dict()
    stored.pop("out_dir")  # run placement, not state: keeps replays byte-identical across directories
    return Checkpoint(tensors, stored, cfg.hash(), state.t if state else 0, epoch,
                      rng.bit_generator.state if rng is not None else None, extra or {})


def restore_model(ckpt: Checkpoint, model: Module) -> None:
    model.load_state_dict(ckpt.params())


def restore_optimizer(ckpt: Checkpoint, model: Module) -> AdamState:
    names = [n for n, _ in model.named_parameters()]
    m, v = ckpt.group("adam_m"), ckpt.group("adam_v")
    return AdamState([m[n].copy() for n in names], [v[n].copy() for n in names], ckpt.step)


def model_config_for(cfg: TrainConfig) -> ModelConfig:
    """Only the conditional protocol keeps several normalization banks."""
    if cfg.protocol == "conditional-interleaved":
        return cfg.model
    return dataclasses.replace(cfg.model, num_modalities=1)


def load_model(path, expected_hash: str | None = None, allow_mismatch: bool = False) -> tuple[Module, TrainConfig]:
    from .config import config_from_dict

    ckpt = load_checkpoint(path, expected_hash, allow_mismatch)
    cfg = config_from_dict(ckpt.config)
    model = build_model(model_config_for(cfg), 0)
    dtype = next(iter(ckpt.params().values())).dtype
    model.astype(dtype)
    restore_model(ckpt, model)
    return model, cfg


# --------------------------------------------------------------------- training
@dataclass
class TrainResult:
    out_dir: Path
    best_checkpoint: Path
    last_checkpoint: Path
    trace_csv: Path
    val_csv: Path
    best_score: float
    best_epoch: int
    steps: int
    val_history: list[dict] = field(default_factory=list)


def active_modalities(cfg: TrainConfig) -> list[int]:
    if cfg.protocol in ("baseline", "fine-tune"):
        return [cfg.target_modality]
    return sorted({cfg.assistant_modality, cfg.target_modality})


def model_modality(model: Module, m: int) -> int:
    return m if model.num_modalities > 1 else 0


def forward_loss(model: Module, batch: Batch, loss_cfg) -> tuple[T.Tensor, list[tuple[int, float, float, float]]]:
    """Group the batch by modality, weight each group's loss by its share of the batch, sum."""
    total = None
    rows = []
    n = len(batch.modality)
    dtype = T.get_default_dtype()
    for m in np.unique(batch.modality):
        idx = np.flatnonzero(batch.modality == m)
        x = T.Tensor(batch.x[idx].astype(dtype))
        logits = model(x, model_modality(model, int(m)))
        terms = loss_terms(logits, batch.y[idx], loss_cfg)
        w = len(idx) / n
        total = terms.total * w if total is None else total + terms.total * w
        rows.append((int(m), terms.dice.item(), terms.focal.item(), terms.total.item()))
    return total, rows


def validate(model: Module, samples: Sequence[tuple[Volume, np.ndarray]], m: int, cfg: TrainConfig) -> DiceScores:
    from .infer import plan_windows, sliding_infer

    scores = []
    for vol, labels in samples:
        plan = plan_windows(vol.dims, cfg.model.input_size, cfg.overlap)
        _, pred = sliding_infer(model, vol, model_modality(model, m), plan, cfg.infer_batch)
        scores.append(dice_metric(pred, labels, cfg.model.num_classes))
    return mean_scores(scores)


def _fmt(x: float) -> str:
    return repr(float(x))


def _thread_guard(deterministic: bool):
    if not deterministic:
        return contextlib.nullcontext()
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return contextlib.nullcontext()
    return threadpool_limits(1)


def train(cfg: TrainConfig, manifest: Manifest | None = None, model: Module | None = None) -> TrainResult:
    """Run one protocol end to end; writes config, traces and checkpoints into ``cfg.out_dir``."""
    cfg.validate()
    with T.precision(cfg.precision), _thread_guard(cfg.deterministic):
        return _train(cfg, manifest, model)


def _train(cfg: TrainConfig, manifest: Manifest | None, model: Module | None) -> TrainResult:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.ini")
    manifest = manifest or Manifest.load(cfg.manifest)
    mods = active_modalities(cfg)
    pools = {m: load_samples(manifest, manifest.select("train", m)) for m in mods}
    val = {m: load_samples(manifest, manifest.select("val", m)) for m in mods}
    _check_pools(pools)

    rng = np.random.default_rng(cfg.seed)
    init_seed = int(rng.integers(2**63))
    if model is None:
        model = build_model(model_config_for(cfg), init_seed)
    model.astype(T.get_default_dtype())
    if cfg.protocol == "fine-tune":
        src = load_checkpoint(cfg.source_checkpoint, cfg.hash(), allow_mismatch=True)
        restore_model(src, model)
    if cfg.protocol == "conditional-interleaved" and model.num_modalities <= max(mods):
        raise ShapeError(f"model has {model.num_modalities} banks, data uses modality {max(mods)}")

    params = model.parameters()
    mask = decay_mask(model)
    state = AdamState.zeros(params)
    spec = BatchSpec(cfg.samples_per_batch, cfg.crops_per_sample, cfg.model.input_size)
    sizes = {m: len(p) for m, p in pools.items()}
    per_epoch = steps_per_epoch(cfg.protocol, sizes, spec.samples, cfg.modality_sampling)
    total = per_epoch * cfg.epochs
    warmup = max(1, round(cfg.warmup_fraction * total))
    if warmup >= total:
        warmup = total - 1 if total > 1 else 0
    if cfg.protocol == "joint":
        stream = joint_sampler(pools, spec, rng)
    else:
        stream = interleaved_sampler(pools, spec, rng, cfg.modality_sampling)

    trace_path, val_path = out / "trace.csv", out / "val.csv"
    best_path, last_path = out / "best.ckpt", out / "last.ckpt"
    class_cols = [f"dice_c{c}" for c in range(1, cfg.model.num_classes)]
    best_score, best_epoch, step = -1.0, 0, 0
    history = []
    save_checkpoint(last_path, model_checkpoint(model, cfg, state, 0, rng))  # a good state exists before step 1
    with open(trace_path, "w", newline="") as tf, open(val_path, "w", newline="") as vf:
        tw, vw = csv.writer(tf), csv.writer(vf)
        tw.writerow(["epoch", "step", "modality", "loss_dice", "loss_focal", "loss_total", "lr"])
        vw.writerow(["epoch", "modality", *class_cols, "mean_dice", "whole_foreground_dice"])
        for epoch in range(1, cfg.epochs + 1):
            for _ in range(per_epoch):
                batch = next(stream)
                step += 1
                lr = lr_schedule(step, total, warmup, cfg.peak_lr) if total > 1 else cfg.peak_lr
                model.zero_grad()
                loss, rows = forward_loss(model, batch, cfg.loss)
                if not np.isfinite(loss.item()):
                    raise TrainingDivergedError(f"non-finite loss at step {step}; last good checkpoint {last_path}")
                loss.backward()
                grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
                clip_grad_norm(grads, cfg.grad_clip)
                try:
                    adamw_step(params, grads, state, lr, cfg.betas, cfg.adam_eps, cfg.weight_decay, mask)
                except NonFiniteGradientError as exc:
                    raise TrainingDivergedError(f"step {step}: {exc}; last good checkpoint {last_path}") from exc
                for m, d, f, t in rows:
                    tw.writerow([epoch, step, m, _fmt(d), _fmt(f), _fmt(t), _fmt(lr)])
            tf.flush()
            if epoch % cfg.val_every == 0 or epoch == cfg.epochs:
                with T.no_grad():
                    epoch_scores = {m: validate(model, val[m], m, cfg) for m in mods if val[m]}
                for m, s in epoch_scores.items():
                    vw.writerow([epoch, m, *map(_fmt, s.per_class), _fmt(s.mean), _fmt(s.whole_foreground)])
                    history.append({"epoch": epoch, "modality": m, "mean_dice": s.mean})
                vf.flush()
                score = float(np.mean([s.mean for s in epoch_scores.values()])) if epoch_scores else -float(epoch)
                if score > best_score:
                    best_score, best_epoch = score, epoch
                    save_checkpoint(best_path, model_checkpoint(model, cfg, state, epoch, rng,
                                                                {"val_score": score}))
                log.info("epoch %d step %d val %.4f", epoch, step, score)
            save_checkpoint(last_path, model_checkpoint(model, cfg, state, epoch, rng))
    return TrainResult(out, best_path, last_path, trace_path, val_path, best_score, best_epoch, step, history)


def fine_tune(cfg: TrainConfig, source_ckpt, manifest: Manifest | None = None) -> TrainResult:
    """Load every weight from an unconditional checkpoint, then train on the target modality."""
    cfg = dataclasses.replace(cfg, protocol="fine-tune", source_checkpoint=str(source_ckpt))
    return train(cfg, manifest)
