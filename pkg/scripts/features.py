#!/usr/bin/env python3
"""
Features: the 13 per-timestamp variables, forward return and 3-class label
HFT Label Imbalance Toolkit

midPrice      = (bidPrice1 + askPrice1) / 2
diffBidPrice_i = bidPrice_i - midPrice        i = 1..5
diffAskPrice_i = askPrice_i - midPrice        i = 1..5
diffLastPrice = lastPrice - midPrice
logVolume     = ln(volume) if volume > 0 else 0
"""

import dataclasses
from pathlib import Path
from typing import Mapping

import numpy as np
import pandas as pd

from ingest import ASK_PRICES, BID_PRICES, LEVELS, TickRecord, mark_warmup
from pipeline_config import DEFAULT_FEE, HORIZON, WARMUP

DIFF_BID = [f"diffBidPrice{i}" for i in range(1, LEVELS + 1)]
DIFF_ASK = [f"diffAskPrice{i}" for i in range(1, LEVELS + 1)]
FEATURE_COLUMNS = ["midPrice"] + DIFF_BID + DIFF_ASK + ["diffLastPrice", "logVolume"]
FEATURE_OUTPUT_COLUMNS = (
    ["timestamp"] + FEATURE_COLUMNS
    + ["forward_return", "label", "valid", "label_valid", "session_id", "instrument"]
)


@dataclasses.dataclass(frozen=True)
class FeatureRow:
    timestamp: int
    midPrice: float
    diffBidPrice: tuple[float, ...]
    diffAskPrice: tuple[float, ...]
    diffLastPrice: float
    logVolume: float
    valid: bool

    def values(self) -> np.ndarray:
        return np.array(
            [self.midPrice, *self.diffBidPrice, *self.diffAskPrice,
             self.diffLastPrice, self.logVolume],
            dtype=np.float64,
        )


@dataclasses.dataclass(frozen=True)
class LabeledPoint:
    timestamp: int
    forward_return: float
    label: int
    label_valid: bool


def log_volume(volume):
    volume = np.asarray(volume, dtype=np.float64)
    positive = volume > 0
    return np.where(positive, np.log(np.where(positive, volume, 1.0)), 0.0)


def compute_features(record: TickRecord | Mapping) -> FeatureRow:
    """The 13 variables for one snapshot; non-positive level-1 prices make the row invalid."""
    if not isinstance(record, TickRecord):
        record = TickRecord.from_row(record)
    bid1, ask1 = record.bidPrice[0], record.askPrice[0]
    mid = (bid1 + ask1) / 2.0
    valid = bool(
        np.isfinite(bid1) and np.isfinite(ask1) and bid1 > 0 and ask1 > 0 and not record.crossed
    )
    return FeatureRow(
        timestamp=record.timestamp,
        midPrice=mid,
        diffBidPrice=tuple(p - mid for p in record.bidPrice),
        diffAskPrice=tuple(p - mid for p in record.askPrice),
        diffLastPrice=record.lastPrice - mid,
        logVolume=float(log_volume(record.volume)),
        valid=valid,
    )


def compute_feature_frame(ticks: pd.DataFrame) -> pd.DataFrame:
    """Vectorised compute_features over a whole (gap-free) stream."""
    bid = ticks[BID_PRICES].to_numpy(np.float64)
    ask = ticks[ASK_PRICES].to_numpy(np.float64)
    mid = (bid[:, 0] + ask[:, 0]) / 2.0

    out = pd.DataFrame({"timestamp": ticks["timestamp"].to_numpy(np.int64)})
    out["midPrice"] = mid
    out[DIFF_BID] = bid - mid[:, None]
    out[DIFF_ASK] = ask - mid[:, None]
    out["diffLastPrice"] = ticks["lastPrice"].to_numpy(np.float64) - mid
    out["logVolume"] = log_volume(ticks["volume"].to_numpy(np.float64))

    with np.errstate(invalid="ignore"):
        valid = np.isfinite(bid[:, 0]) & np.isfinite(ask[:, 0]) & (bid[:, 0] > 0) & (ask[:, 0] > 0)
    for flag in ("crossed", "fill_invalid"):
        if flag in ticks.columns:
            valid &= ~ticks[flag].to_numpy(bool)
    out["valid"] = valid
    for col in ("session_id", "instrument"):
        if col in ticks.columns:
            out[col] = ticks[col].to_numpy()
    return out


def compute_return(mid_series, t: int, horizon: int = HORIZON, session_id=None,
                   valid=None) -> tuple[float, bool]:
    """
    Forward return of the window ending at t: (mid[t+h] - mid[t]) / mid[t].

    label_valid is False when t+h runs past the series, leaves t's session or
    touches an invalid point.
    """
    mid = np.asarray(mid_series, dtype=np.float64)
    end = t + horizon
    if end >= len(mid):
        return float("nan"), False
    if session_id is not None and session_id[end] != session_id[t]:
        return float("nan"), False
    if valid is not None and not bool(np.all(np.asarray(valid[t:end + 1], dtype=bool))):
        return float("nan"), False
    return float((mid[end] - mid[t]) / mid[t]), True


def forward_returns(mid_series, session_id=None, valid=None,
                    horizon: int = HORIZON) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised compute_return for every t."""
    mid = np.asarray(mid_series, dtype=np.float64)
    n = len(mid)
    returns = np.full(n, np.nan)
    ok = np.zeros(n, dtype=bool)
    if n <= horizon:
        return returns, ok

    t = np.arange(n - horizon)
    ok[t] = True
    if session_id is not None:
        sid = np.asarray(session_id)
        ok[t] &= sid[t + horizon] == sid[t]
    if valid is not None:
        bad = np.concatenate([[0], np.cumsum(~np.asarray(valid, dtype=bool))])
        ok[t] &= (bad[t + horizon + 1] - bad[t]) == 0
    with np.errstate(invalid="ignore", divide="ignore"):
        returns[t] = (mid[t + horizon] - mid[t]) / mid[t]
    returns[~ok] = np.nan
    return returns, ok


def label(forward_return: float, fee: float = DEFAULT_FEE) -> int:
    """+1 if R > fee, -1 if R < -fee, 0 if |R| <= fee."""
    if fee < 0:
        raise ValueError(f"fee must be non-negative, got {fee}")
    if forward_return > fee:
        return 1
    if forward_return < -fee:
        return -1
    return 0


def label_returns(returns, fee: float = DEFAULT_FEE) -> np.ndarray:
    if fee < 0:
        raise ValueError(f"fee must be non-negative, got {fee}")
    r = np.asarray(returns, dtype=np.float64)
    return np.select([r > fee, r < -fee], [1, -1], default=0).astype(np.int8)


def build_labeled_frame(ticks: pd.DataFrame, fee: float = DEFAULT_FEE, horizon: int = HORIZON,
                        warmup_len: int = WARMUP) -> pd.DataFrame:
    """features + forward_return + label + label_valid for an ingested stream"""
    frame = compute_feature_frame(ticks)
    warm = (ticks["warmup_valid"].to_numpy(bool) if "warmup_valid" in ticks.columns
            else mark_warmup(ticks, warmup_len))
    returns, ok = forward_returns(frame["midPrice"], frame.get("session_id"), frame["valid"],
                                  horizon)
    frame["forward_return"] = returns
    frame["label_valid"] = ok & warm
    frame["label"] = label_returns(np.nan_to_num(returns), fee)
    return frame


def labeled_points(frame: pd.DataFrame) -> list[LabeledPoint]:
    return [
        LabeledPoint(int(ts), float(r), int(y), bool(v))
        for ts, r, y, v in frame[["timestamp", "forward_return", "label", "label_valid"]]
        .itertuples(index=False)
    ]


def write_feature_file(frame: pd.DataFrame, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cols = [c for c in FEATURE_OUTPUT_COLUMNS if c in frame.columns]
    frame[cols].to_csv(path, index=False)


def read_feature_file(path) -> pd.DataFrame:
    frame = pd.read_csv(path, float_precision="round_trip", keep_default_na=False,
                        na_values=[""])
    for col in ("valid", "label_valid"):
        frame[col] = frame[col].astype(bool)
    frame["label"] = frame["label"].astype(np.int8)
    if "instrument" in frame.columns:
        frame["instrument"] = frame["instrument"].fillna("").astype(str)
    return frame
