#!/usr/bin/env python3
"""
HFT Label Imbalance Pipeline
Runs the stages of the tick -> features -> labels -> model pipeline.

Stages: synth, ingest, featurize, split, train, evaluate, factors, all

Each stage writes its artifacts under --out and records a manifest entry
(config snapshot, inputs, outputs, seed, timing, toolkit version) in
<out>/manifest.json. Any pipeline error exits with status 1.

Config file (--config): flat `key = value` lines. Keys prefixed `synth.`
configure the generator; all other keys configure training.
"""

import argparse
import json
import logging
import sys
import time
from datetime import datetime
from pathlib import Path

import numpy as np
import pandas as pd

from dataset import (
    assemble_samples,
    chronological_split,
    class_counts,
    concat_samples,
    load_samples,
    save_samples,
)
from factors import accumulate_factor_frame, compute_factor_frame, write_factor_file
from features import build_labeled_frame, read_feature_file, write_feature_file
from ingest import (
    assign_sessions,
    forward_fill,
    mark_warmup,
    parse_tick_files,
    read_ingested_file,
    write_ingested_file,
)
from nn import load_checkpoint, save_checkpoint
from pipeline_config import (
    INDEX_TO_LABEL,
    TOOLKIT_VERSION,
    WARMUP,
    WINDOW,
    ConfigError,
    PipelineError,
    SessionSchedule,
    config_to_mapping,
    read_key_value_file,
)
from synth import SynthConfig, generate, read_meta
from training import TrainConfig, evaluate_checkpoint, run_grid, train, write_metrics

logger = logging.getLogger("run_pipeline")

MANIFEST_FILE = "manifest.json"
SPLITS = ("train", "val", "test")


def banner(title: str) -> None:
    print("\n" + "=" * 60)
    print(title)
    print("=" * 60)


def on_off(text: str) -> bool:
    if text not in ("on", "off"):
        raise argparse.ArgumentTypeError(f"expected on or off, got {text!r}")
    return text == "on"


def load_config_sections(path) -> tuple[dict, dict]:
    """(synth values, train values) from one key-value file."""
    if not path:
        return {}, {}
    synth_values, train_values = {}, {}
    for key, value in read_key_value_file(path).items():
        if key.startswith("synth."):
            synth_values[key[len("synth."):]] = value
        else:
            train_values[key] = value
    return synth_values, train_values


def _snapshot(config) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in config_to_mapping(config).items()}


def update_manifest(out_dir, stage: str, record: dict) -> Path:
    """Merge one stage entry into <out_dir>/manifest.json."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / MANIFEST_FILE
    manifest = {"toolkit_version": TOOLKIT_VERSION, "stages": {}}
    if path.exists():
        with open(path, encoding="utf-8") as f:
            manifest = json.load(f)
    manifest["toolkit_version"] = TOOLKIT_VERSION
    manifest["stages"][stage] = {**record, "finished_at": datetime.now().isoformat()}
    with open(path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True, default=str)
    return path


def _csv_files(directory) -> list[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"input directory not found: {directory}")
    files = sorted(p for p in directory.glob("*.csv"))
    if not files:
        raise FileNotFoundError(f"no .csv files in {directory}")
    return files


def _schedule_for(input_dir) -> SessionSchedule:
    meta = read_meta(input_dir)
    if meta is None:
        return SessionSchedule()
    config = meta.get("config", {})
    return SessionSchedule(
        starts=tuple(meta["session_starts"]),
        tz_offset_hours=config.get("tz_offset_hours", SessionSchedule().tz_offset_hours),
        day_roll=config.get("day_roll", SessionSchedule().day_roll),
    )


# stages


def stage_synth(args) -> dict:
    synth_values, _ = load_config_sections(args.config)
    config = SynthConfig.from_file(None, {**synth_values, "seed": args.seed,
                                          "horizon": args.horizon, "fee": args.fee})
    result = generate(config, args.out, workers=args.workers, progress=not args.quiet)
    for path in result.files:
        print(f"  wrote {path}")
    print(f"  calibrated fee: {result.fee:.6g}")
    print(f"  class shares (-1/0/+1): "
          + " / ".join(f"{s:.4f}" for s in result.class_shares))
    return {"config": _snapshot(config), "seed": config.seed, "inputs": [],
            "outputs": [str(p) for p in result.files] + [str(result.meta_path)],
            "fee": result.fee}


def stage_ingest(args) -> dict:
    files = _csv_files(args.input)
    schedule = _schedule_for(args.input)
    parsed = parse_tick_files(files, workers=args.workers, progress=not args.quiet)
    outputs = []
    for path, ticks in zip(files, parsed):
        ticks = forward_fill(assign_sessions(ticks, schedule))
        ticks["warmup_valid"] = mark_warmup(ticks, WARMUP)
        out_path = Path(args.out) / path.name
        write_ingested_file(ticks, out_path)
        outputs.append(str(out_path))
        print(f"  {path.name}: {len(ticks):,} grid points, "
              f"{int(ticks['filled'].sum()):,} forward-filled")
    return {"config": {"session_starts": list(schedule.starts),
                       "tz_offset_hours": schedule.tz_offset_hours,
                       "day_roll": schedule.day_roll},
            "inputs": [str(p) for p in files], "outputs": outputs}


def _labeling_params(args) -> tuple[float, int]:
    _, train_values = load_config_sections(args.config)
    config = TrainConfig.from_file(None, train_values)
    fee = args.fee
    if fee is None:
        meta = read_meta(args.raw) if getattr(args, "raw", None) else None
        fee = meta["fee"] if meta else config.fee
    horizon = args.horizon if args.horizon is not None else config.horizon
    if fee < 0:
        raise ConfigError(f"fee must be non-negative, got {fee}")
    return float(fee), int(horizon)


def stage_featurize(args) -> dict:
    files = _csv_files(args.input)
    fee, horizon = _labeling_params(args)
    outputs = []
    for path in files:
        frame = build_labeled_frame(read_ingested_file(path), fee=fee, horizon=horizon)
        out_path = Path(args.out) / path.name
        write_feature_file(frame, out_path)
        outputs.append(str(out_path))
        usable = frame["label_valid"].to_numpy(bool)
        hist = np.bincount(frame.loc[usable, "label"].to_numpy(np.int64) + 1, minlength=3)
        print(f"  {path.name}: {usable.sum():,} labelled points, "
              f"labels -1/0/+1 = {hist[0]:,}/{hist[1]:,}/{hist[2]:,}")
    return {"config": {"fee": fee, "horizon": horizon, "warmup": WARMUP},
            "inputs": [str(p) for p in files], "outputs": outputs}


def stage_split(args) -> dict:
    files = _csv_files(args.input)
    parts, skipped = [], 0
    for path in files:
        samples, counts = assemble_samples(read_feature_file(path), WINDOW)
        parts.append(samples)
        skipped += counts["skipped"]
    samples = concat_samples(parts)
    split = chronological_split(samples.t_end)
    out_dir = Path(args.out)
    outputs, summary = [], {}
    for name in SPLITS:
        part = samples.subset(split.slice(name))
        path = out_dir / f"{name}.bin"
        save_samples(part, path)
        outputs.append(str(path))
        counts = class_counts(part.labels)
        summary[name] = {"size": len(part), "class_counts": counts.tolist()}
        print(f"  {name:5s}: {len(part):,} samples, classes -1/0/+1 = "
              f"{counts[0]:,}/{counts[1]:,}/{counts[2]:,}")
    with open(out_dir / "split.json", "w", encoding="utf-8") as f:
        json.dump({"index": split.to_json(), "summary": summary, "skipped_endpoints": skipped},
                  f, indent=2, sort_keys=True)
    outputs.append(str(out_dir / "split.json"))
    return {"config": {"window": WINDOW, "ratios": [8, 1, 1]},
            "inputs": [str(p) for p in files], "outputs": outputs, "summary": summary}


def _recorded_fee(samples_dir) -> float | None:
    """Labelling fee from a featurize manifest entry next to or above the samples."""
    samples_dir = Path(samples_dir)
    for directory in (samples_dir, samples_dir.parent):
        path = directory / MANIFEST_FILE
        if not path.exists():
            continue
        with open(path, encoding="utf-8") as f:
            stage = json.load(f).get("stages", {}).get("featurize", {})
        if "fee" in stage.get("config", {}):
            return float(stage["config"]["fee"])
    return None


def _train_config(args) -> TrainConfig:
    _, train_values = load_config_sections(args.config)
    fee = args.fee
    if fee is None and getattr(args, "input", None):
        fee = _recorded_fee(args.input)
    overrides = {"seed": args.seed, "fee": fee, "horizon": args.horizon,
                 "loss": args.loss, "model": args.model, "normalize": args.normalize,
                 "undersample": args.undersample, "max_epochs": args.max_epochs}
    return TrainConfig.from_file(None, {**train_values,
                                       **{k: v for k, v in overrides.items() if v is not None}})


def stage_train(args) -> dict:
    config = _train_config(args)
    train_set = load_samples(Path(args.input) / "train.bin")
    val_set = load_samples(Path(args.input) / "val.bin")
    out_dir = Path(args.out)

    if args.grid:
        runs = run_grid(config, train_set, val_set, out_dir, workers=args.workers,
                        progress=not args.quiet)
        for run in runs:
            print(f"  {run['model']:4s} {run['loss']:9s} best epoch {run['best_epoch']:3d} "
                  f"val accuracy {run['val_accuracy']:.4f}")
        with open(out_dir / "grid.json", "w", encoding="utf-8") as f:
            json.dump(runs, f, indent=2, sort_keys=True)
        return {"config": _snapshot(config), "seed": config.seed,
                "inputs": [str(Path(args.input) / f"{s}.bin") for s in ("train", "val")],
                "outputs": [r["checkpoint"] for r in runs] + [str(out_dir / "grid.json")]}

    result = train(config, train_set, val_set, progress=not args.quiet)
    ckpt_path = out_dir / "model.ckpt"
    metrics_path = out_dir / "metrics.jsonl"
    save_checkpoint(ckpt_path, result.checkpoint)
    write_metrics(result.reports, metrics_path)
    print(f"  epochs run: {len(result.reports)} (early stop: {result.stopped_early})")
    print(f"  best epoch: {result.best_epoch}, val accuracy {result.best_accuracy:.4f}")
    print(f"  wrote {ckpt_path}")
    print(f"  wrote {metrics_path}")
    return {"config": _snapshot(config), "seed": config.seed,
            "loss_spec": result.loss_spec.describe(),
            "inputs": [str(Path(args.input) / f"{s}.bin") for s in ("train", "val")],
            "outputs": [str(ckpt_path), str(metrics_path)],
            "best_epoch": result.best_epoch, "epochs_run": len(result.reports)}


def stage_evaluate(args) -> dict:
    ckpt_path = Path(args.checkpoint)
    if not ckpt_path.exists():
        raise FileNotFoundError(f"checkpoint not found: {ckpt_path}")
    checkpoint = load_checkpoint(ckpt_path)
    if args.model is not None:
        checkpoint.require_arch(args.model)
    samples = load_samples(Path(args.input) / f"{args.split}.bin")
    if len(samples) == 0:
        raise ConfigError(f"split {args.split!r} is empty")
    result = evaluate_checkpoint(checkpoint, samples)

    print(f"  checkpoint: {ckpt_path} ({checkpoint.config.arch}, epoch {checkpoint.epoch})")
    print(f"  split: {args.split} ({result.n:,} samples)")
    print(f"  accuracy:          {result.accuracy:.4f}")
    print(f"  balanced accuracy: {result.balanced_accuracy:.4f}")
    for idx, acc in enumerate(result.class_accuracy):
        print(f"  class {INDEX_TO_LABEL[idx]:+d} recall:   {acc:.4f}")
    print("  confusion (rows true -1/0/+1, columns predicted):")
    for row in result.confusion:
        print("    " + " ".join(f"{v:8d}" for v in row))
    for name, acc in sorted(result.instrument_accuracy.items()):
        print(f"  instrument {name}: accuracy {acc:.4f}")

    out_dir = Path(args.out) if args.out else ckpt_path.parent
    out_path = out_dir / f"evaluation_{args.split}.json"
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w", encoding="utf-8") as f:
        json.dump({
            "checkpoint": str(ckpt_path),
            "arch": checkpoint.config.arch,
            "split": args.split,
            "n": result.n,
            "accuracy": result.accuracy,
            "balanced_accuracy": result.balanced_accuracy,
            "class_accuracy": [None if np.isnan(a) else a for a in result.class_accuracy],
            "confusion": result.confusion.tolist(),
            "instrument_accuracy": result.instrument_accuracy,
        }, f, indent=2, sort_keys=True)
    print(f"  wrote {out_path}")
    return {"config": {"split": args.split, "model": checkpoint.config.arch},
            "inputs": [str(ckpt_path), str(Path(args.input) / f"{args.split}.bin")],
            "outputs": [str(out_path)], "accuracy": result.accuracy}


def stage_factors(args) -> dict:
    tick_files = _csv_files(args.input)
    features_dir = Path(args.features)
    out_dir = Path(args.out)
    frames, returns, valid, outputs = [], [], [], []
    for path in tick_files:
        factors = compute_factor_frame(read_ingested_file(path))
        feature_path = features_dir / path.name
        if feature_path.exists():
            feats = read_feature_file(feature_path)
            returns.append(feats["forward_return"].to_numpy(np.float64))
            valid.append(feats["label_valid"].to_numpy(bool))
        else:
            logger.warning("%s: no feature file, accumulation uses no returns", path.name)
            returns.append(np.full(len(factors), np.nan))
            valid.append(np.zeros(len(factors), dtype=bool))
        out_path = out_dir / path.name
        write_factor_file(factors, out_path)
        outputs.append(str(out_path))
        frames.append(factors)
        print(f"  {path.name}: {int(factors['valid'].sum()):,} points with full history")

    curves = accumulate_factor_frame(pd.concat(frames, ignore_index=True),
                                     np.concatenate(returns), np.concatenate(valid))
    curve_path = out_dir / "accumulated.csv"
    write_factor_file(curves, curve_path)
    outputs.append(str(curve_path))
    print(f"  wrote {curve_path}")
    return {"config": {"short_window": 60, "long_window": 600},
            "inputs": [str(p) for p in tick_files], "outputs": outputs}


def stage_all(args) -> dict:
    root = Path(args.out)
    timings = {}

    def run(name, fn, **paths):
        banner(f"STAGE: {name}")
        sub = argparse.Namespace(**{**vars(args), **paths})
        started = time.perf_counter()
        record = fn(sub)
        timings[name] = time.perf_counter() - started
        update_manifest(root, name, {**record, "seconds": round(timings[name], 3)})
        return record

    raw, ticks, feats = root / "raw", root / "ticks", root / "features"
    samples, runs, factors = root / "samples", root / "runs", root / "factors"
    run("synth", stage_synth, out=raw)
    run("ingest", stage_ingest, input=raw, out=ticks)
    labelling = run("featurize", stage_featurize, input=ticks, out=feats, raw=raw)
    run("split", stage_split, input=feats, out=samples)
    run("train", stage_train, input=samples, out=runs, grid=False,
        fee=labelling["config"]["fee"])
    run("evaluate", stage_evaluate, input=samples, checkpoint=runs / "model.ckpt",
        split="test", out=runs, model=None)
    run("factors", stage_factors, input=ticks, features=feats, out=factors)
    return {"timings": timings}


STAGES = {
    "synth": stage_synth,
    "ingest": stage_ingest,
    "featurize": stage_featurize,
    "split": stage_split,
    "train": stage_train,
    "evaluate": stage_evaluate,
    "factors": stage_factors,
    "all": stage_all,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--fee", type=float)
    common.add_argument("--horizon", type=int)
    common.add_argument("--loss", choices=["plain", "weighted", "sensitive", "focal", "adaptive"])
    common.add_argument("--model", choices=["mlp", "lstm"])
    common.add_argument("--normalize", type=on_off, metavar="{on,off}")
    common.add_argument("--undersample", type=on_off, metavar="{on,off}")
    common.add_argument("--max-epochs", type=int, dest="max_epochs")
    common.add_argument("--workers", type=int, default=1)
    common.add_argument("--quiet", action="store_true", help="disable progress bars")

    parser = argparse.ArgumentParser(description="HFT label imbalance pipeline")
    sub = parser.add_subparsers(dest="stage", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate synthetic tick files")
    p.add_argument("--out", default="data/raw")

    p = sub.add_parser("ingest", parents=[common], help="sessions + forward fill")
    p.add_argument("--input", default="data/raw")
    p.add_argument("--out", default="data/ticks")

    p = sub.add_parser("featurize", parents=[common], help="features, returns, labels")
    p.add_argument("--input", default="data/ticks")
    p.add_argument("--raw", default=None, help="directory holding synth_meta.json (for the fee)")
    p.add_argument("--out", default="data/features")

    p = sub.add_parser("split", parents=[common], help="windows + chronological split")
    p.add_argument("--input", default="data/features")
    p.add_argument("--out", default="data/samples")

    p = sub.add_parser("train", parents=[common], help="train one model or the grid")
    p.add_argument("--input", default="data/samples")
    p.add_argument("--out", default="data/runs")
    p.add_argument("--grid", action="store_true", help="every model x loss combination")

    p = sub.add_parser("evaluate", parents=[common], help="score a checkpoint on a split")
    p.add_argument("--checkpoint", default="data/runs/model.ckpt")
    p.add_argument("--input", default="data/samples")
    p.add_argument("--split", choices=SPLITS, default="test")
    p.add_argument("--out", default=None)

    p = sub.add_parser("factors", parents=[common], help="diagnostic factors")
    p.add_argument("--input", default="data/ticks")
    p.add_argument("--features", default="data/features")
    p.add_argument("--out", default="data/factors")

    p = sub.add_parser("all", parents=[common], help="run every stage on synthetic data")
    p.add_argument("--out", default="data/run")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")

    banner(f"HFT LABEL IMBALANCE PIPELINE: {args.stage.upper()}")
    print(f"Start time: {datetime.now().isoformat()}")
    started = time.perf_counter()
    try:
        record = STAGES[args.stage](args)
    except (PipelineError, FileNotFoundError) as e:
        print(f"\nERROR: {e}", file=sys.stderr)
        return 1
    if args.stage != "all":
        out_dir = args.out if args.out else Path(args.checkpoint).parent
        record["seconds"] = round(time.perf_counter() - started, 3)
        path = update_manifest(out_dir, args.stage, record)
        print(f"  manifest: {path}")

    banner("STAGE COMPLETE")
    print(f"End time: {datetime.now().isoformat()}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
