#!/usr/bin/env python3
"""
Training: mini-batch Adam loop, per-epoch undersampling, validation-accuracy
early stopping and per-epoch metric records
HFT Label Imbalance Toolkit

This module:
1. Builds the model and loss from a flat TrainConfig
2. Trains with shuffled batches of 512 (last partial batch kept)
3. Validates after every epoch (accuracy, per-class recall, confusion matrix)
4. Stops after `early_stop_patience` epochs without a strictly better
   validation accuracy and returns the best epoch's checkpoint
5. Runs the model x loss grid as independent processes
"""

import copy
import dataclasses
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
from sklearn.metrics import confusion_matrix
from tqdm import tqdm

from dataset import (
    SampleSet,
    apply_global_stats,
    fit_global_stats,
    normalize_windows,
    undersample_epoch,
)
from losses import (
    DEFAULT_CLASS_WEIGHTS,
    DEFAULT_FOCAL_LAMBDA,
    LOSS_KINDS,
    LossSpec,
    loss_and_grad,
    spec_adaptive_weights,
)
from nn import (
    DEFAULT_GRAD_CLIP,
    AdamState,
    Checkpoint,
    ModelConfig,
    adam_step,
    backward,
    clip_by_global_norm,
    forward,
    global_norm,
    init_params,
    predict_logits,
    save_checkpoint,
)
from pipeline_config import (
    BATCH_SIZE,
    DEFAULT_FEE,
    EARLY_STOP_PATIENCE,
    HORIZON,
    LEARNING_RATE,
    N_CLASSES,
    ConfigError,
    SplitError,
    TrainingDivergedError,
    config_from_mapping,
    config_to_mapping,
    read_key_value_file,
)

logger = logging.getLogger(__name__)

CLASS_INDICES = list(range(N_CLASSES))
CONFIG_ALIASES = {"lambda": "focal_lambda", "patience": "early_stop_patience",
                  "lr": "learning_rate"}


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    model: str = "mlp"
    loss: str = "plain"
    class_weights: tuple[float, ...] = DEFAULT_CLASS_WEIGHTS
    focal_lambda: float = DEFAULT_FOCAL_LAMBDA
    batch_size: int = BATCH_SIZE
    learning_rate: float = LEARNING_RATE
    early_stop_patience: int = EARLY_STOP_PATIENCE
    max_epochs: int = 100
    seed: int = 0
    normalize: bool = True
    normalization_scope: str = "sample"
    undersample: bool = False
    undersample_mode: str = "balance"
    fee: float = DEFAULT_FEE
    horizon: int = HORIZON
    hidden_dim: int = 64
    lstm_layers: int = 1
    mlp_hidden: tuple[int, ...] = (64, 64)
    negative_slope: float = 0.01
    output_activation: bool = True
    grad_clip: float = DEFAULT_GRAD_CLIP

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.early_stop_patience < 1:
            raise ConfigError(f"early_stop_patience must be >= 1, got {self.early_stop_patience}")
        if self.max_epochs < 1:
            raise ConfigError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.loss not in LOSS_KINDS:
            raise ConfigError(f"unknown loss {self.loss!r}; expected one of {LOSS_KINDS}")
        if self.normalization_scope not in ("sample", "global"):
            raise ConfigError(f"normalization_scope must be sample or global, "
                              f"got {self.normalization_scope!r}")
        if self.undersample_mode not in ("balance", "literal"):
            raise ConfigError(f"undersample_mode must be balance or literal, "
                              f"got {self.undersample_mode!r}")
        # validates model/loss fields early
        self.model_config()
        self.loss_spec()

    @classmethod
    def from_file(cls, path, overrides: Mapping | None = None) -> "TrainConfig":
        values = dict(read_key_value_file(path)) if path else {}
        values.update({k: v for k, v in (overrides or {}).items() if v is not None})
        return config_from_mapping(cls, values, CONFIG_ALIASES)

    def with_overrides(self, **overrides) -> "TrainConfig":
        values = {k: v for k, v in overrides.items() if v is not None}
        return dataclasses.replace(self, **values) if values else self

    def to_mapping(self) -> dict:
        return config_to_mapping(self)

    def model_config(self, window: int | None = None, n_features: int | None = None) -> ModelConfig:
        kwargs = {}
        if window is not None:
            kwargs["window"] = window
        if n_features is not None:
            kwargs["n_features"] = n_features
        return ModelConfig(
            arch=self.model, mlp_hidden=tuple(self.mlp_hidden), hidden_dim=self.hidden_dim,
            lstm_layers=self.lstm_layers, negative_slope=self.negative_slope,
            output_activation=self.output_activation, **kwargs,
        )

    def loss_spec(self, train_labels=None) -> LossSpec:
        spec = LossSpec(kind=self.loss, class_weights=tuple(self.class_weights),
                        focal_lambda=self.focal_lambda)
        if train_labels is None:
            return spec
        if self.loss == "sensitive":
            spec = spec.with_counts(train_labels)
        elif self.loss == "adaptive":
            # before any validation, class shares stand in for class accuracies
            counts = np.bincount(np.asarray(train_labels, dtype=np.int64), minlength=N_CLASSES)
            spec = spec.with_accuracies(counts / max(counts.sum(), 1))
        return spec


@dataclasses.dataclass(frozen=True)
class ValidationResult:
    accuracy: float
    class_accuracy: tuple[float, ...]
    confusion: np.ndarray
    balanced_accuracy: float
    instrument_accuracy: dict
    n: int

    @classmethod
    def scalar(cls, accuracy: float) -> "ValidationResult":
        """Result carrying only an overall accuracy (scripted validators)."""
        nan = float("nan")
        return cls(float(accuracy), (nan,) * N_CLASSES, np.zeros((N_CLASSES, N_CLASSES), np.int64),
                   nan, {}, 0)


@dataclasses.dataclass
class EpochReport:
    epoch: int
    train_loss: float
    val_accuracy: float
    class_accuracy: tuple[float, ...]
    confusion: np.ndarray
    balanced_accuracy: float
    instrument_accuracy: dict
    loss_weights: tuple[float, ...] | None
    wall_time: float

    def to_record(self) -> dict:
        """Metrics-file line; wall time stays out so reruns are byte-identical."""
        return {
            "epoch": self.epoch,
            "train_loss": _finite_or_none(self.train_loss),
            "val_accuracy": _finite_or_none(self.val_accuracy),
            "class_accuracy": [_finite_or_none(a) for a in self.class_accuracy],
            "balanced_accuracy": _finite_or_none(self.balanced_accuracy),
            "confusion": np.asarray(self.confusion).astype(int).tolist(),
            "instrument_accuracy": {k: _finite_or_none(v)
                                    for k, v in sorted(self.instrument_accuracy.items())},
            "loss_weights": None if self.loss_weights is None else list(self.loss_weights),
        }


@dataclasses.dataclass
class TrainResult:
    checkpoint: Checkpoint
    reports: list[EpochReport]
    best_epoch: int
    best_accuracy: float
    stopped_early: bool
    loss_spec: LossSpec


def _finite_or_none(value):
    value = float(value)
    return value if np.isfinite(value) else None


def score_predictions(y_true, y_pred, instruments=None) -> ValidationResult:
    """
    Accuracy, per-class recall (NaN for a class absent from y_true), 3x3
    confusion matrix (rows true, columns predicted), balanced accuracy and
    per-instrument accuracy.
    """
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if len(y_true) == 0:
        raise SplitError("cannot validate on an empty split")
    cm = confusion_matrix(y_true, y_pred, labels=CLASS_INDICES)
    support = cm.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        recall = np.where(support > 0, np.diag(cm) / np.maximum(support, 1), np.nan)
    present = recall[~np.isnan(recall)]
    by_instrument = {}
    if instruments is not None:
        instruments = np.asarray(instruments).astype(str)
        for name in np.unique(instruments):
            if name:
                mask = instruments == name
                by_instrument[str(name)] = float(np.mean(y_true[mask] == y_pred[mask]))
    return ValidationResult(
        accuracy=float(np.mean(y_true == y_pred)),
        class_accuracy=tuple(float(r) for r in recall),
        confusion=cm,
        balanced_accuracy=float(present.mean()) if present.size else float("nan"),
        instrument_accuracy=by_instrument,
        n=len(y_true),
    )


def prepare_windows(windows: np.ndarray, normalize: bool,
                    stats: tuple[np.ndarray, np.ndarray] | None = None) -> np.ndarray:
    """Model inputs: raw, per-window z-scored, or z-scored with training-split stats."""
    if not normalize:
        return np.asarray(windows, dtype=np.float32)
    if stats is not None:
        return apply_global_stats(windows, *stats).astype(np.float32)
    return normalize_windows(windows).astype(np.float32)


def checkpoint_stats(checkpoint: Checkpoint):
    norm = checkpoint.normalization or {}
    if norm.get("scope") == "global":
        return np.asarray(norm["mean"]), np.asarray(norm["std"])
    return None


def validate(params, model_config: ModelConfig, windows: np.ndarray, labels,
             instruments=None) -> ValidationResult:
    """Argmax predictions on prepared windows scored against labels."""
    logits = predict_logits(params, windows, model_config)
    return score_predictions(labels, logits.argmax(axis=1), instruments)


def evaluate_checkpoint(checkpoint: Checkpoint, samples: SampleSet) -> ValidationResult:
    """Validate a checkpoint on raw samples, normalizing the way it was trained."""
    normalize = bool((checkpoint.normalization or {}).get("enabled", True))
    windows = prepare_windows(samples.windows, normalize, checkpoint_stats(checkpoint))
    return validate(checkpoint.params, checkpoint.config, windows, samples.labels,
                    samples.instrument)


def write_metrics(reports: Sequence[EpochReport], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for report in reports:
            f.write(json.dumps(report.to_record(), sort_keys=True) + "\n")


Validator = Callable[[int, dict], "ValidationResult | float"]


def train(config: TrainConfig, train_set: SampleSet, val_set: SampleSet,
          validator: Validator | None = None, progress: bool = True) -> TrainResult:
    """
    Train one model. ``validator(epoch, params)`` replaces the validation
    pass when given; it may return a ValidationResult or a bare accuracy.
    """
    if len(train_set) == 0:
        raise SplitError("training split is empty")
    if validator is None and len(val_set) == 0:
        raise SplitError("validation split is empty")

    _, window, n_features = train_set.windows.shape
    model_config = config.model_config(window, n_features)
    stats = None
    normalization = {"enabled": config.normalize, "scope": config.normalization_scope}
    if config.normalize and config.normalization_scope == "global":
        stats = fit_global_stats(train_set.windows)
        normalization.update(mean=stats[0], std=stats[1])
    x_train = prepare_windows(train_set.windows, config.normalize, stats)
    x_val = prepare_windows(val_set.windows, config.normalize, stats) if validator is None else None
    y_train = train_set.labels.astype(np.int64)

    spec = config.loss_spec(y_train)
    params = init_params(model_config, config.seed)
    state = AdamState.zeros(params)

    best_params = copy.deepcopy(params)
    best_acc, best_epoch, since_best = -np.inf, 0, 0
    reports: list[EpochReport] = []
    stopped_early = False

    epochs = tqdm(range(config.max_epochs), disable=not progress, desc=f"{config.model}/{config.loss}")
    for e in epochs:
        started = time.perf_counter()
        if config.undersample:
            idx = undersample_epoch(y_train, config.seed, e, config.undersample_mode)
        else:
            idx = np.arange(len(y_train))
        order = np.random.default_rng([config.seed, e, 1]).permutation(idx)

        total, seen = 0.0, 0
        for b, start in enumerate(range(0, len(order), config.batch_size)):
            batch = order[start:start + config.batch_size]
            logits, cache = forward(params, x_train[batch], model_config, return_cache=True)
            loss, dlogits, _ = loss_and_grad(logits, y_train[batch], spec)
            if not np.isfinite(loss):
                raise TrainingDivergedError("non-finite training loss", {
                    "epoch": e + 1, "batch": b, "loss": loss,
                    "max_abs_logit": float(np.nanmax(np.abs(logits))),
                    "param_norm": global_norm(params),
                })
            grads = backward(params, cache, dlogits, model_config)
            if model_config.arch == "lstm":
                grads, _ = clip_by_global_norm(grads, config.grad_clip)
            adam_step(params, grads, state, config.learning_rate)
            total += loss * len(batch)
            seen += len(batch)

        if validator is not None:
            result = validator(e + 1, params)
            if not isinstance(result, ValidationResult):
                result = ValidationResult.scalar(result)
        else:
            result = validate(params, model_config, x_val, val_set.labels, val_set.instrument)

        weights = None
        if spec.kind == "adaptive":
            weights = tuple(float(w) for w in spec_adaptive_weights(spec))
            spec = spec.with_accuracies(result.class_accuracy)
        elif spec.kind == "weighted":
            weights = tuple(spec.class_weights)

        report = EpochReport(
            epoch=e + 1, train_loss=total / seen, val_accuracy=result.accuracy,
            class_accuracy=result.class_accuracy, confusion=result.confusion,
            balanced_accuracy=result.balanced_accuracy,
            instrument_accuracy=result.instrument_accuracy, loss_weights=weights,
            wall_time=time.perf_counter() - started,
        )
        reports.append(report)
        epochs.set_postfix(loss=f"{report.train_loss:.4f}", val=f"{result.accuracy:.4f}")

        if result.accuracy > best_acc:
            best_acc, best_epoch, since_best = result.accuracy, e + 1, 0
            best_params = copy.deepcopy(params)
        else:
            since_best += 1
            if since_best >= config.early_stop_patience:
                stopped_early = True
                logger.info("early stop after epoch %d; best epoch %d (accuracy %.4f)",
                            e + 1, best_epoch, best_acc)
                break

    checkpoint = Checkpoint(
        config=model_config, params=best_params, seed=config.seed, epoch=best_epoch,
        normalization=normalization,
        meta={"loss": spec.describe(), "train_config": _config_record(config)},
    )
    return TrainResult(checkpoint, reports, best_epoch, float(best_acc), stopped_early, spec)


def _config_record(config: TrainConfig) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in config.to_mapping().items()}


def _grid_job(args) -> dict:
    config, train_set, val_set, out_dir = args
    result = train(config, train_set, val_set, progress=False)
    run_dir = Path(out_dir) / f"{config.model}_{config.loss}"
    save_checkpoint(run_dir / "model.ckpt", result.checkpoint)
    write_metrics(result.reports, run_dir / "metrics.jsonl")
    return {
        "model": config.model,
        "loss": config.loss,
        "best_epoch": result.best_epoch,
        "val_accuracy": result.best_accuracy,
        "epochs_run": len(result.reports),
        "checkpoint": str(run_dir / "model.ckpt"),
        "metrics": str(run_dir / "metrics.jsonl"),
    }


def run_grid(config: TrainConfig, train_set: SampleSet, val_set: SampleSet, out_dir,
             models: Sequence[str] = ("mlp", "lstm"), losses: Sequence[str] = LOSS_KINDS,
             workers: int = 1, progress: bool = True) -> list[dict]:
    """Train every model x loss pair; each run is independent and seeded alike."""
    jobs = [(dataclasses.replace(config, model=m, loss=l), train_set, val_set, str(out_dir))
            for m in models for l in losses]
    if workers <= 1:
        return [_grid_job(job) for job in tqdm(jobs, disable=not progress, desc="grid")]
    with ProcessPoolExecutor(max_workers=workers) as executor:
        return list(tqdm(executor.map(_grid_job, jobs), total=len(jobs), disable=not progress,
                         desc="grid"))
