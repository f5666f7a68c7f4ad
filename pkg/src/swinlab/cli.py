"""Command-line entry point: convert, train, infer, eval, verify, summarize, make-toy.

Exit codes: 0 success, 1 usage or configuration error, 2 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .volume_io import SvolError

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2
SEED_ENV = "SWINLAB_SEED"
MAX_OVERLAP = 0.999

log = logging.getLogger("swinlab")


class UsageError(Exception):
    """Bad flags, missing files or an invalid configuration."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _echo(kind: str, config: dict) -> None:
    print(json.dumps({"command": kind, "effective_config": config}, indent=2, sort_keys=True), flush=True)


def _require_file(path: Optional[str], flag: str) -> Path:
    if not path:
        raise UsageError(f"{flag} is required")
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{flag}: no such file {p}")
    return p


def _triple(values, flag: str) -> tuple:
    if len(values) == 1:
        values = values * 3
    if len(values) != 3 or min(values) < 1:
        raise UsageError(f"{flag} takes one or three positive integers, got {values}")
    return tuple(int(v) for v in values)


# ---------------------------------------------------------------------------
# convert


def cmd_convert(args) -> int:
    from .volume_io import SegmentationMask, Volume, save_mask, save_volume

    src = _require_file(args.input, "--input")
    if src.suffix == ".npy":
        arr = np.load(src, allow_pickle=False)
    else:
        if not args.shape or not args.dtype:
            raise UsageError("raw input needs --shape and --dtype")
        arr = np.fromfile(src, dtype=np.dtype(args.dtype).newbyteorder("<"))
        if arr.size != int(np.prod(args.shape)):
            raise UsageError(f"--input holds {arr.size} elements, --shape {args.shape} needs {int(np.prod(args.shape))}")
        arr = arr.reshape(args.shape)
    config = {"input": str(src), "output": args.out, "kind": args.kind, "shape": list(arr.shape),
              "source_dtype": str(arr.dtype), "spacing": list(args.spacing)}
    _echo("convert", config)
    if args.kind == "volume":
        if arr.ndim == 3:
            arr = arr[None]
        names = tuple(args.channel_names) if args.channel_names else ()
        save_volume(Volume(arr.astype(np.float32), tuple(args.spacing), names), args.out)
    else:
        if arr.dtype.kind == "f" and not np.all(arr == np.round(arr)):
            raise UsageError("mask input holds non-integer values")
        save_mask(SegmentationMask(arr.astype(np.uint8), tuple(args.spacing)), args.out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# train


def _load_json(path: Optional[str], flag: str) -> dict:
    if not path:
        return {}
    p = _require_file(path, flag)
    try:
        raw = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"{flag}: {p} is not valid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise UsageError(f"{flag}: expected a JSON object")
    return raw


def _resolve_seed(flag_seed: Optional[int], file_seed) -> int:
    if flag_seed is not None:
        return flag_seed
    if os.environ.get(SEED_ENV):
        try:
            return int(os.environ[SEED_ENV])
        except ValueError:
            raise UsageError(f"{SEED_ENV} must be an integer") from None
    return int(file_seed) if file_seed is not None else 0


def build_train_configs(args) -> tuple:
    """``(ModelConfig, TrainConfig)`` from preset, config file, seed override and flags, in that order."""
    from .model import ModelConfig
    from .training import TrainConfig

    raw = _load_json(args.config, "--config")
    unknown = sorted(set(raw) - {"preset", "model", "train"})
    if unknown:
        raise UsageError(f"--config: unknown top-level keys {unknown}")
    preset = args.preset or raw.get("preset", "tiny")
    if preset not in ("tiny", "default"):
        raise UsageError(f"preset must be 'tiny' or 'default', got {preset!r}")
    model_base = ModelConfig.tiny() if preset == "tiny" else ModelConfig()
    train_base = TrainConfig.toy() if preset == "tiny" else TrainConfig()
    train_d = {**train_base.to_dict(), **raw.get("train", {})}
    model_d = {**model_base.to_dict(), **raw.get("model", {})}
    seed = _resolve_seed(args.seed, raw.get("train", {}).get("seed"))
    train_d["seed"], model_d["seed"] = seed, seed
    if args.epochs is not None:
        train_d["total_epochs"] = args.epochs
    if args.lr is not None:
        train_d["lr_max"] = args.lr
    try:
        return ModelConfig.from_dict(model_d), TrainConfig.from_dict(train_d)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from None


def cmd_train(args) -> int:
    from .training import run_cross_validation, train
    from .volume_io import DatasetManifest

    manifest_path = _require_file(args.manifest, "--manifest")
    if not args.out_dir:
        raise UsageError("--out-dir is required")
    model_cfg, train_cfg = build_train_configs(args)
    try:
        manifest = DatasetManifest.load(manifest_path)
    except ValueError as exc:
        raise UsageError(f"--manifest: {exc}") from None
    fold = None if args.fold in (None, "all") else int(args.fold)
    effective = {"preset": args.preset or "from config", "model": model_cfg.to_dict(), "train": train_cfg.to_dict(),
                 "manifest": str(manifest_path), "fold": fold, "cross_validation": args.cross_validation,
                 "runs": args.runs}
    _echo("train", effective)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(effective, indent=2, sort_keys=True) + "\n")
    if args.cross_validation:
        spec = run_cross_validation(manifest, train_cfg, out, runs=args.runs, model_config=model_cfg)
        print(json.dumps({"ensemble": spec.paths}))
        return EXIT_OK
    if fold is not None and fold not in set(manifest.folds.values()):
        raise UsageError(f"--fold {fold} is not assigned in the manifest")
    res = train(manifest, fold, train_cfg, out, model_config=model_cfg,
                resume=args.resume, stop_after_epochs=args.stop_after)
    print(json.dumps({"steps": res.steps, "best_val_dice": res.best_val_dice, "best_epoch": res.best_epoch,
                      "final": res.history[-1] if res.history else None, "last": str(res.last_path),
                      "best": str(res.best_path)}))
    return EXIT_OK


# ---------------------------------------------------------------------------
# infer


def _case_id(path: Path) -> str:
    name = path.name
    for suffix in (".svol",):
        if name.endswith(suffix):
            name = name[: -len(suffix)]
    return name[: -len("_image")] if name.endswith("_image") else name


def cmd_infer(args) -> int:
    from .inference import EnsembleSpec, SlidingWindowPlan, ensemble_infer, fuse_labels, write_inference_manifest
    from .volume_io import (SegmentationMask, Volume, load_volume, normalize_nonzero, pad_to_size, save_mask,
                            save_volume)

    if not args.input:
        raise UsageError("--input is required")
    inputs = [_require_file(p, "--input") for p in args.input]
    if not args.checkpoints:
        raise UsageError("--checkpoints needs at least one checkpoint")
    ckpts = [_require_file(p, "--checkpoints") for p in args.checkpoints]
    if not args.out:
        raise UsageError("--out is required")
    if not 0.0 <= args.overlap < MAX_OVERLAP:
        raise UsageError(f"--overlap must satisfy 0 <= overlap < {MAX_OVERLAP}, got {args.overlap}")
    roi = _triple(args.roi, "--roi")
    plan = SlidingWindowPlan(roi, args.overlap, blend=args.blend)
    spec = EnsembleSpec(ckpts)
    effective = {"inputs": [str(p) for p in inputs], "checkpoints": spec.paths, "plan": plan.to_dict(),
                 "threshold": args.threshold, "save_probabilities": args.save_probs, "out": args.out,
                 "path": "ensemble" if len(spec.paths) > 1 else "single model"}
    _echo("infer", effective)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs, tiles = {}, {}
    for path in inputs:
        vol = normalize_nonzero(load_volume(path))
        probs = ensemble_infer(vol, spec, plan)
        cid = _case_id(path)
        seg_path = out / f"{cid}_seg.svol"
        save_mask(SegmentationMask(fuse_labels(probs, args.threshold), vol.spacing), seg_path)
        entry = {"segmentation": seg_path.name}
        if args.save_probs:
            prob_path = out / f"{cid}_probs.svol"
            save_volume(Volume(probs, vol.spacing, ("ET", "WT", "TC")), prob_path)
            entry["probabilities"] = prob_path.name
        outputs[cid] = entry
        tiles[cid] = len(plan.origins(pad_to_size(vol.data, plan.roi).shape[1:]))
    write_inference_manifest(out / "inference_manifest.json", plan, spec.paths, [str(p) for p in inputs], outputs,
                             threshold=args.threshold,
                             extra={"ensemble_size": len(spec.paths),
                                    "path": effective["path"], "tiles_per_case": tiles,
                                    "input_normalization": "per-channel z-score over non-zero voxels"})
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval


def cmd_eval(args) -> int:
    from .metrics import EvaluationReport, evaluate_case
    from .volume_io import DatasetManifest, load_mask

    manifest_path = _require_file(args.gt_manifest, "--gt-manifest")
    pred_dir = Path(args.pred_dir or "")
    if not args.pred_dir or not pred_dir.is_dir():
        raise UsageError(f"--pred-dir: no such directory {args.pred_dir}")
    if not 0 < args.hausdorff <= 100:
        raise UsageError("--hausdorff must be a percentile in (0, 100]")
    manifest = DatasetManifest.load(manifest_path)
    out = Path(args.out or pred_dir)
    _echo("eval", {"pred_dir": str(pred_dir), "gt_manifest": str(manifest_path), "hausdorff": args.hausdorff,
                   "out": str(out)})
    cases, missing = [], []
    for cid in manifest.ids:
        pred_path = pred_dir / f"{cid}_seg.svol"
        if not pred_path.exists():
            missing.append(cid)
            continue
        gt = load_mask(manifest.resolve(manifest.entry(cid).mask))
        pred = load_mask(pred_path)
        cases.append(evaluate_case(cid, pred.data, gt.data, gt.spacing, args.hausdorff))
    report = EvaluationReport(cases, args.hausdorff)
    out.mkdir(parents=True, exist_ok=True)
    record = report.to_dict()
    record["missing"] = missing
    (out / "eval_report.json").write_text(json.dumps(record, indent=2) + "\n")
    report.save_csv(out / "eval_report.csv")
    print(json.dumps({"mean": record["mean"], "missing": missing, "cases": len(cases)}))
    if missing:
        log.error("missing predictions for %d case(s): %s", len(missing), ", ".join(missing))
        return EXIT_USAGE
    return EXIT_OK


# ---------------------------------------------------------------------------
# verify, summarize, make-toy


def cmd_verify(args) -> int:
    from .verify import run_suite

    _echo("verify", {"suite": args.suite, "inject_shift": args.inject_shift})
    results = run_suite(args.suite, shift_size=args.inject_shift,
                        progress=lambda r: print(r.line(), flush=True))
    failures = [{"name": r.name, "value": r.value, "tolerance": r.tolerance, "detail": r.detail}
                for r in results if not r.passed]
    print(json.dumps({"passed": len(results) - len(failures), "failed": len(failures), "failures": failures}))
    return EXIT_OK if not failures else EXIT_NUMERIC


def cmd_summarize(args) -> int:
    from .model import ModelConfig, summarize

    raw = _load_json(args.config, "--config")
    model_d = raw.get("model", raw)
    base = ModelConfig.tiny() if args.preset == "tiny" else ModelConfig()
    try:
        cfg = ModelConfig.from_dict({**base.to_dict(), **model_d})
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from None
    size = _triple(args.input_size, "--input-size") if args.input_size else None
    print(json.dumps(summarize(cfg, size), indent=2))
    return EXIT_OK


def cmd_make_toy(args) -> int:
    from .training import make_toy_dataset

    if not args.out:
        raise UsageError("--out is required")
    shape = _triple(args.shape, "--shape")
    _echo("make-toy", {"out": args.out, "cases": args.cases, "shape": list(shape), "seed": args.seed,
                       "folds": args.folds})
    try:
        manifest = make_toy_dataset(args.out, n_cases=args.cases, shape=shape, seed=args.seed, k=args.folds)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    print(json.dumps({"manifest": str(Path(args.out) / "manifest.json"), "cases": manifest.ids}))
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="swinlab", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    c = sub.add_parser("convert", help="raw or .npy array to SVOL")
    c.add_argument("--input")
    c.add_argument("--out", required=True)
    c.add_argument("--kind", choices=("volume", "mask"), default="volume")
    c.add_argument("--shape", type=int, nargs="+", help="array shape for raw input")
    c.add_argument("--dtype", help="numpy dtype of raw input, read little-endian")
    c.add_argument("--spacing", type=float, nargs=3, default=(1.0, 1.0, 1.0))
    c.add_argument("--channel-names", nargs="+")
    c.set_defaults(func=cmd_convert)

    t = sub.add_parser("train", help="train one fold or a cross-validation ensemble")
    t.add_argument("--manifest")
    t.add_argument("--fold", help="fold index held out for validation; omit or 'all' to train on every case")
    t.add_argument("--config", help="JSON with optional 'preset', 'model' and 'train' objects")
    t.add_argument("--preset", choices=("tiny", "default"))
    t.add_argument("--out-dir")
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--resume", help="continue from a last.sckpt written with the same config")
    t.add_argument("--stop-after", type=int, help="stop after this many epochs without changing the schedule")
    t.add_argument("--cross-validation", action="store_true", help="train every fold for --runs seeds")
    t.add_argument("--runs", type=int, default=2)
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="sliding-window (ensemble) inference")
    i.add_argument("--input", nargs="+")
    i.add_argument("--checkpoints", nargs="+")
    i.add_argument("--overlap", type=float, default=0.7)
    i.add_argument("--roi", type=int, nargs="+", default=[128])
    i.add_argument("--blend", choices=("uniform", "gaussian"), default="uniform")
    i.add_argument("--threshold", type=float, default=0.5)
    i.add_argument("--save-probs", action="store_true")
    i.add_argument("--out")
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="Dice and Hausdorff against a ground-truth manifest")
    e.add_argument("--pred-dir")
    e.add_argument("--gt-manifest")
    e.add_argument("--hausdorff", type=float, default=95.0)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("verify", help="gradient, oracle and roundtrip suites")
    v.add_argument("--suite", choices=("gradcheck", "oracles", "roundtrip", "all"), default="all")
    v.add_argument("--inject-shift", type=int, help="force this shift in the shifted-window oracle blocks")
    v.set_defaults(func=cmd_verify)

    s = sub.add_parser("summarize", help="level shapes, parameters and FLOPs")
    s.add_argument("--config")
    s.add_argument("--preset", choices=("tiny", "default"), default="default")
    s.add_argument("--input-size", type=int, nargs="+")
    s.set_defaults(func=cmd_summarize)

    m = sub.add_parser("make-toy", help="write the synthetic nested-ellipsoid dataset")
    m.add_argument("--out")
    m.add_argument("--cases", type=int, default=2)
    m.add_argument("--shape", type=int, nargs="+", default=[48])
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--folds", type=int, default=2)
    m.set_defaults(func=cmd_make_toy)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if not getattr(args, "func", None):
            raise UsageError("a subcommand is required")
        return args.func(args)
    except UsageError as exc:
        print(f"swinlab: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FloatingPointError as exc:
        print(f"swinlab: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, FileNotFoundError, KeyError, SvolError) as exc:
        print(f"swinlab: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
