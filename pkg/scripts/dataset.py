#!/usr/bin/env python3
"""
Dataset: rolling 60x13 samples, per-window normalization, chronological
8:1:1 split and per-epoch random undersampling
HFT Label Imbalance Toolkit
"""

import dataclasses
import json
import logging
import math
import struct
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd
from numpy.lib.stride_tricks import sliding_window_view

from features import FEATURE_COLUMNS
from pipeline_config import LABEL_TO_INDEX, N_CLASSES, WINDOW, SplitError

logger = logging.getLogger(__name__)

NORM_EPS = 1e-8
MAJORITY_INDEX = LABEL_TO_INDEX[0]
DATASET_MAGIC = b"HFTWIN01"


@dataclasses.dataclass(frozen=True)
class Sample:
    window: np.ndarray  # (60, 13), oldest row first
    label: int          # class index 0/1/2 for -1/0/+1
    t_end: int


@dataclasses.dataclass
class SampleSet:
    """Time-ordered samples stored as stacked arrays."""

    windows: np.ndarray     # (N, W, F) float32
    labels: np.ndarray      # (N,) uint8 class index
    t_end: np.ndarray       # (N,) int64
    instrument: np.ndarray  # (N,) str

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> Sample:
        return Sample(self.windows[i], int(self.labels[i]), int(self.t_end[i]))

    def subset(self, idx) -> "SampleSet":
        return SampleSet(self.windows[idx], self.labels[idx], self.t_end[idx], self.instrument[idx])

    @classmethod
    def empty(cls, window: int = WINDOW, n_features: int = len(FEATURE_COLUMNS)) -> "SampleSet":
        return cls(np.zeros((0, window, n_features), np.float32), np.zeros(0, np.uint8),
                   np.zeros(0, np.int64), np.zeros(0, dtype=object))


@dataclasses.dataclass(frozen=True)
class SplitIndex:
    train: tuple[int, int]
    val: tuple[int, int]
    test: tuple[int, int]

    def slice(self, name: str) -> slice:
        start, stop = getattr(self, name)
        return slice(start, stop)

    def sizes(self) -> dict[str, int]:
        return {name: stop - start for name, (start, stop) in
                (("train", self.train), ("val", self.val), ("test", self.test))}

    def to_json(self) -> dict:
        return {"train": list(self.train), "val": list(self.val), "test": list(self.test)}

    @classmethod
    def from_json(cls, data: dict) -> "SplitIndex":
        return cls(tuple(data["train"]), tuple(data["val"]), tuple(data["test"]))


def assemble_samples(frame: pd.DataFrame, window: int = WINDOW) -> tuple[SampleSet, dict]:
    """
    One sample per admissible endpoint t: rows t-window+1..t valid and in one
    session, and t label-valid. Returns the samples and endpoint counts.
    """
    n = len(frame)
    counts = {"endpoints": n, "samples": 0, "skipped": n}
    if n < window:
        return SampleSet.empty(window), counts

    values = frame[FEATURE_COLUMNS].to_numpy(np.float64)
    valid = frame["valid"].to_numpy(bool)
    bad = np.concatenate([[0], np.cumsum(~valid)])
    t = np.arange(window - 1, n)
    ok = (bad[t + 1] - bad[t - window + 1]) == 0
    ok &= frame["label_valid"].to_numpy(bool)[t]
    if "session_id" in frame.columns:
        sid = frame["session_id"].to_numpy()
        ok &= sid[t - window + 1] == sid[t]
    t = t[ok]

    # (n - W + 1, F, W) -> (k, W, F)
    views = sliding_window_view(values, window, axis=0)[t - window + 1]
    windows = np.ascontiguousarray(views.transpose(0, 2, 1), dtype=np.float32)
    labels = (frame["label"].to_numpy(np.int64)[t] + 1).astype(np.uint8)
    t_end = frame["timestamp"].to_numpy(np.int64)[t]
    instrument = (frame["instrument"].astype(str).to_numpy()[t] if "instrument" in frame.columns
                  else np.full(len(t), "", dtype=object))
    counts.update(samples=len(t), skipped=n - len(t))
    return SampleSet(windows, labels, t_end, instrument.astype(object)), counts


def concat_samples(parts: Sequence[SampleSet]) -> SampleSet:
    """Concatenate and order by t_end (ties keep input order)."""
    parts = [p for p in parts if len(p)]
    if not parts:
        return SampleSet.empty()
    merged = SampleSet(
        np.concatenate([p.windows for p in parts]),
        np.concatenate([p.labels for p in parts]),
        np.concatenate([p.t_end for p in parts]),
        np.concatenate([p.instrument for p in parts]),
    )
    order = np.argsort(merged.t_end, kind="stable")
    return merged.subset(order)


def normalize_sample(sample: Sample) -> Sample:
    """Per-column z-score over the window (population std); flat columns map to 0."""
    window = normalize_windows(np.asarray(sample.window)[None])[0]
    return dataclasses.replace(sample, window=window)


def normalize_windows(windows: np.ndarray) -> np.ndarray:
    x = np.asarray(windows, dtype=np.float64)
    mu = x.mean(axis=1, keepdims=True)
    sigma = x.std(axis=1, keepdims=True)
    flat = sigma < NORM_EPS
    out = (x - mu) / np.where(flat, 1.0, sigma)
    return np.where(flat, 0.0, out)


def fit_global_stats(windows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-feature mean/std over every row of every window (training split only)."""
    rows = np.asarray(windows, dtype=np.float64).reshape(-1, windows.shape[-1])
    return rows.mean(axis=0), rows.std(axis=0)


def apply_global_stats(windows: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    x = np.asarray(windows, dtype=np.float64)
    mean, std = np.asarray(mean, np.float64), np.asarray(std, np.float64)
    flat = std < NORM_EPS
    return np.where(flat, 0.0, (x - mean) / np.where(flat, 1.0, std))


def chronological_split(t_end: np.ndarray, ratios: Sequence[int] = (8, 1, 1)) -> SplitIndex:
    """
    First 80% train, next 10% val, last 10% test by count; rounding gives the
    remainder to train. Boundaries move forward past equal timestamps so every
    train t_end is strictly earlier than every val t_end (same for val/test).
    """
    t_end = np.asarray(t_end)
    n = len(t_end)
    if n < 10:
        raise SplitError(f"need at least 10 samples to split, got {n}")
    if np.any(np.diff(t_end) < 0):
        raise SplitError("samples are not time-ordered")
    total = sum(ratios)
    n_val = n * ratios[1] // total
    n_test = n * ratios[2] // total
    train_end = n - n_val - n_test
    val_end = n - n_test

    while 0 < train_end < n and t_end[train_end] == t_end[train_end - 1]:
        train_end += 1
    val_end = max(val_end, train_end)
    while 0 < val_end < n and t_end[val_end] == t_end[val_end - 1]:
        val_end += 1
    if train_end >= val_end or val_end >= n:
        raise SplitError("timestamp ties leave an empty validation or test split")
    return SplitIndex((0, train_end), (train_end, val_end), (val_end, n))


def class_counts(labels: np.ndarray) -> np.ndarray:
    return np.bincount(np.asarray(labels, dtype=np.int64), minlength=N_CLASSES)


def undersample_epoch(labels: np.ndarray, rng_seed: int, epoch: int = 0,
                      mode: str = "balance") -> np.ndarray:
    """
    Indices for one epoch. Minority classes are kept whole; class 0 is drawn
    without replacement down to the mean of the two minority counts
    (mode='balance') or loses one eighth of its samples (mode='literal').
    The draw and the output order depend only on (rng_seed, epoch).
    """
    labels = np.asarray(labels, dtype=np.int64)
    counts = class_counts(labels)
    for c in np.flatnonzero(counts == 0):
        logger.warning("class index %d has no training samples; undersampling the rest", c)

    n_major = int(counts[MAJORITY_INDEX])
    if mode == "balance":
        minority = int(counts.sum() - n_major)
        keep = min(n_major, math.ceil(minority / 2))
    elif mode == "literal":
        keep = n_major - n_major // 8
    else:
        raise ValueError(f"unknown undersampling mode {mode!r}")

    rng = np.random.default_rng([rng_seed, epoch, 0])
    major_idx = np.flatnonzero(labels == MAJORITY_INDEX)
    chosen = rng.choice(major_idx, size=keep, replace=False) if keep < n_major else major_idx
    idx = np.concatenate([np.flatnonzero(labels != MAJORITY_INDEX), chosen])
    return rng.permutation(idx)


def save_samples(samples: SampleSet, path) -> None:
    """
    Binary container, all integers little-endian:

      8 bytes   magic b"HFTWIN01"
      uint32    header length H
      H bytes   UTF-8 JSON header: count, window, n_features, feature_columns,
                label_map, instruments
      N*W*F     float32 windows, row-major (sample, timestep, feature)
      N         uint8 class index
      N         int64 t_end (ms)
      N         uint16 index into header 'instruments'
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n, window, n_features = samples.windows.shape
    instruments, codes = np.unique(samples.instrument.astype(str), return_inverse=True)
    header = {
        "count": int(n),
        "window": int(window),
        "n_features": int(n_features),
        "feature_columns": FEATURE_COLUMNS,
        "label_map": {str(k): v for k, v in LABEL_TO_INDEX.items()},
        "instruments": instruments.tolist(),
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(DATASET_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(samples.windows.astype("<f4").tobytes(order="C"))
        f.write(samples.labels.astype("u1").tobytes())
        f.write(samples.t_end.astype("<i8").tobytes())
        f.write(codes.astype("<u2").tobytes())


def load_samples(path) -> SampleSet:
    path = Path(path)
    data = path.read_bytes()
    if data[:8] != DATASET_MAGIC:
        raise ValueError(f"{path} is not a sample container")
    (hlen,) = struct.unpack_from("<I", data, 8)
    header = json.loads(data[12:12 + hlen].decode("utf-8"))
    n, window, n_features = header["count"], header["window"], header["n_features"]
    offset = 12 + hlen

    def take(dtype, count):
        nonlocal offset
        arr = np.frombuffer(data, dtype=dtype, count=count, offset=offset)
        offset += arr.nbytes
        return arr

    windows = take("<f4", n * window * n_features).reshape(n, window, n_features).astype(np.float32)
    labels = take("u1", n).astype(np.uint8)
    t_end = take("<i8", n).astype(np.int64)
    codes = take("<u2", n)
    instruments = np.asarray(header["instruments"], dtype=object)
    instrument = instruments[codes] if n else np.zeros(0, dtype=object)
    return SampleSet(windows, labels, t_end, instrument)
