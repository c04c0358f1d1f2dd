"""Command-line entry point: ``python -m cmseg <command> ...``.

Failures print a single ``error: {"type": ..., "message": ...}`` JSON line on
stderr and exit nonzero (2 for usage/config problems, 1 otherwise).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import typing
from pathlib import Path


from . import tensor as T
from .config import ConfigError, load_config
from .data import Manifest, Volume, read_volume, write_volume
from .infer import dump_slices, evaluate, model_predictor, plan_windows, sliding_infer
from .phantom import CLASS_NAMES, DEFAULT_COUNTS, PhantomSpec, generate_dataset


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _common(p: argparse.ArgumentParser, config=True) -> None:
    if config:
        p.add_argument("--config", help="INI file with [train]/[model]/[loss] sections")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key, e.g. model.hidden=32 (repeatable)")
    p.add_argument("--seed", type=int)
    p.add_argument("--deterministic", action="store_true", default=None,
                   help="single-threaded BLAS for bit-reproducible runs")
    p.add_argument("--precision", choices=("f32", "f64"))
    p.add_argument("--modality", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cmseg", description="Cross-modality conditional segmentation toolkit")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write a synthetic phantom dataset and manifest")
    _common(p, config=False)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="PhantomSpec field (dims, rotation_deg, ...) or counts.<split>=A,B")

    p = sub.add_parser("train", help="train one protocol")
    _common(p)
    p.add_argument("--manifest")

    p = sub.add_parser("evaluate", help="score a checkpoint on a manifest split")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test")

    p = sub.add_parser("infer", help="segment one volume file")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="CSG1 volume file")
    p.add_argument("--axis", type=int, default=0)
    p.add_argument("--slices", default="", help="comma-separated slice indices (default: middle)")

    p = sub.add_parser("gradcheck", help="run the 64-bit gradient verification suites")
    _common(p, config=False)
    p.add_argument("--suite", action="append", help="limit to these suites")

    p = sub.add_parser("compare", help="run all protocols over several seeds")
    _common(p)
    p.add_argument("--manifest")
    p.add_argument("--seeds", default="0,1,2")
    return parser


def _train_config(args):
    cfg = load_config(args.config, args.set)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.deterministic:
        cfg.deterministic = True
    if args.precision:
        cfg.precision = args.precision
    if args.out:
        cfg.out_dir = args.out
    if getattr(args, "manifest", None):
        cfg.manifest = args.manifest
    if args.modality is not None:
        cfg.target_modality = args.modality
    return cfg


def cmd_gen_data(args) -> int:
    spec = PhantomSpec()
    counts = dict(DEFAULT_COUNTS)
    hints = typing.get_type_hints(PhantomSpec)
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        key = key.strip()
        nums = [v for v in value.replace(",", " ").split() if v]
        if key.startswith("counts."):
            counts[key[len("counts."):]] = tuple(int(v) for v in nums)
        elif key in ("dims", "spacing"):
            setattr(spec, key, tuple(nums))
        elif key in hints and hints[key] in (int, float):
            setattr(spec, key, hints[key](value))
        else:
            raise ConfigError(f"unknown phantom key {key!r}")
    spec.__post_init__()
    out = Path(args.out or "data")
    manifest = generate_dataset(out, args.seed if args.seed is not None else 0, spec, counts)
    print(f"wrote {len(manifest.entries)} volumes and {out / 'manifest.txt'}")
    return 0


def cmd_train(args) -> int:
    from .train import train

    cfg = _train_config(args)
    if not cfg.manifest:
        raise ConfigError("no manifest given (--manifest or manifest= in the config)")
    res = train(cfg)
    print(json.dumps({"best_checkpoint": str(res.best_checkpoint), "best_score": res.best_score,
                      "best_epoch": res.best_epoch, "steps": res.steps}))
    return 0


def _load(args):
    from .train import load_model

    precision = args.precision or "f32"
    T.set_precision(precision)
    model, cfg = load_model(args.checkpoint, allow_mismatch=True)
    model.astype(T.get_default_dtype())
    return model, cfg


def cmd_evaluate(args) -> int:
    model, cfg = _load(args)
    manifest = Manifest.load(args.manifest)
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    predict = model_predictor(model, cfg.model.input_size, cfg.overlap, cfg.infer_batch)
    res = evaluate(predict, manifest, args.split, args.modality, cfg.model.num_classes, out / "metrics.csv",
                   CLASS_NAMES[:cfg.model.num_classes])
    for m, s in res.per_modality.items():
        print(f"modality {m}: mean_dice={s.mean:.4f} whole_foreground_dice={s.whole_foreground:.4f}")
    return 0


def cmd_infer(args) -> int:
    model, cfg = _load(args)
    vol, gt = read_volume(args.input)
    m = vol.modality if args.modality is None else args.modality
    bank = m if model.num_modalities > 1 else 0
    plan = plan_windows(vol.dims, cfg.model.input_size, cfg.overlap)
    _, pred = sliding_infer(model, vol, bank, plan, cfg.infer_batch)
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    write_volume(out / "prediction.csg", Volume(vol.intensities, vol.spacing, m), pred)
    indices = [int(i) for i in args.slices.split(",") if i] or [vol.dims[args.axis] // 2]
    dump_slices(vol, gt, pred, args.axis, indices, out)
    print(f"wrote {out / 'prediction.csg'}")
    return 0


def cmd_gradcheck(args) -> int:
    from .verify import SUITES, run_suites

    unknown = sorted(set(args.suite or ()) - set(SUITES))
    if unknown:
        raise UsageError(f"unknown suite(s) {unknown}; choose from {sorted(SUITES)}")
    results = run_suites(args.suite, seed=args.seed or 0, log=print)
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} gradient checks passed")
    if failed:
        raise GradcheckFailed(", ".join(f"{r.suite}/{r.name}" for r in failed))
    return 0


class GradcheckFailed(RuntimeError):
    pass


def cmd_compare(args) -> int:
    from .compare import compare, summary_columns

    cfg = _train_config(args)
    if not cfg.manifest:
        raise ConfigError("no manifest given (--manifest or manifest= in the config)")
    seeds = [int(s) for s in args.seeds.split(",") if s]
    out = Path(args.out or cfg.out_dir)
    rows = compare(cfg, Manifest.load(cfg.manifest), seeds, out)
    cols = summary_columns(cfg.model.num_classes)[:6]
    print(",".join(cols))
    for row in rows:
        print(",".join(str(row[c]) if isinstance(row[c], (str, int)) else f"{row[c]:.4f}" for c in cols))
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "infer": cmd_infer,
    "gradcheck": cmd_gradcheck,
    "compare": cmd_compare,
}


def _error_line(kind: str, message: str) -> None:
    print("error: " + json.dumps({"type": kind, "message": message}), file=sys.stderr)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        _error_line("UsageError", str(exc))
        return 2
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, UsageError) as exc:
        _error_line(type(exc).__name__, str(exc))
        return 2
    except Exception as exc:  # noqa: BLE001 - every failure becomes one machine-readable line
        _error_line(type(exc).__name__, str(exc))
        return 1


if __name__ == "__main__":
    sys.exit(main())
