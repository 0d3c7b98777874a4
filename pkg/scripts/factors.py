#!/usr/bin/env python3
"""
Factors: data-quality diagnostics over the ingested grid
HFT Label Imbalance Toolkit

Eight factors per grid point t, using only points at or before t:

  mid_price_mean / std / skew / kurt   moments of midPrice over the past 60 points
                                       (std with ddof=1, excess kurtosis)
  volume_pct          volume over 60 points / volume over 600 points
  prop_quoted_spread  (askPrice1 - bidPrice1) / midPrice
  beta                cov(r, v) / var(v), r the per-step mid returns and v the
                      per-step volume over the past 60 steps
  illiquidity         |midPrice[t] / midPrice[t-60] - 1| / volume over 60 points

A point needs 600 points of in-session history; otherwise every factor is NaN
and valid is False. Degenerate factors (flat window, zero volume) are NaN.
"""

import dataclasses
from pathlib import Path

import numpy as np
import pandas as pd
from numpy.lib.stride_tricks import sliding_window_view
from scipy import stats

SHORT_WINDOW = 60
LONG_WINDOW = 600
FACTOR_COLUMNS = [
    "mid_price_mean",
    "mid_price_std",
    "mid_price_skew",
    "mid_price_kurt",
    "volume_pct",
    "prop_quoted_spread",
    "beta",
    "illiquidity",
]


@dataclasses.dataclass(frozen=True)
class FactorRow:
    timestamp: int
    mid_price_mean: float
    mid_price_std: float
    mid_price_skew: float
    mid_price_kurt: float
    volume_pct: float
    prop_quoted_spread: float
    beta: float
    illiquidity: float
    valid: bool

    def values(self) -> dict[str, float]:
        return {c: getattr(self, c) for c in FACTOR_COLUMNS}


def _inputs(ticks: pd.DataFrame):
    bid = ticks["bidPrice1"].to_numpy(np.float64)
    ask = ticks["askPrice1"].to_numpy(np.float64)
    mid = (bid + ask) / 2.0
    volume = ticks["volume"].to_numpy(np.float64)
    ok = np.isfinite(mid)
    if "fill_invalid" in ticks.columns:
        ok &= ~ticks["fill_invalid"].to_numpy(bool)
    session = (ticks["session_id"].to_numpy() if "session_id" in ticks.columns
               else np.zeros(len(ticks), dtype=np.int64))
    return bid, ask, mid, volume, ok, session


def _history_ok(ok: np.ndarray, session: np.ndarray) -> np.ndarray:
    """True where the LONG_WINDOW points ending at t are valid and in t's session."""
    n = len(ok)
    out = np.zeros(n, dtype=bool)
    if n < LONG_WINDOW:
        return out
    bad = np.concatenate([[0], np.cumsum(~ok)])
    t = np.arange(LONG_WINDOW - 1, n)
    out[t] = ((bad[t + 1] - bad[t + 1 - LONG_WINDOW]) == 0) & (
        session[t + 1 - LONG_WINDOW] == session[t]
    )
    return out


def compute_factors(ticks: pd.DataFrame, t: int) -> FactorRow:
    """Factors at row t, computed directly from the window slices."""
    bid, ask, mid, volume, ok, session = _inputs(ticks)
    timestamp = int(ticks["timestamp"].iloc[t])
    if not _history_ok(ok, session)[t]:
        return FactorRow(timestamp, *([float("nan")] * len(FACTOR_COLUMNS)), valid=False)

    w = mid[t - SHORT_WINDOW + 1:t + 1]
    flat = np.ptp(w) == 0
    skew = float("nan") if flat else float(stats.skew(w, bias=True))
    kurt = float("nan") if flat else float(stats.kurtosis(w, fisher=True, bias=True))

    vol_short = volume[t - SHORT_WINDOW + 1:t + 1]
    v_short = vol_short.sum()
    v_long = volume[t - LONG_WINDOW + 1:t + 1].sum()

    r = mid[t - SHORT_WINDOW + 1:t + 1] / mid[t - SHORT_WINDOW:t] - 1.0
    var_v = np.var(vol_short)
    beta = float("nan") if var_v == 0 else float(
        np.mean((r - r.mean()) * (vol_short - vol_short.mean())) / var_v
    )
    move = abs(mid[t] / mid[t - SHORT_WINDOW] - 1.0)

    return FactorRow(
        timestamp=timestamp,
        mid_price_mean=float(w.mean()),
        mid_price_std=float(w.std(ddof=1)),
        mid_price_skew=skew,
        mid_price_kurt=kurt,
        volume_pct=float(v_short / v_long) if v_long > 0 else float("nan"),
        prop_quoted_spread=float((ask[t] - bid[t]) / mid[t]),
        beta=beta,
        illiquidity=float(move / v_short) if v_short > 0 else float("nan"),
        valid=True,
    )


def compute_factor_frame(ticks: pd.DataFrame) -> pd.DataFrame:
    """compute_factors for every row, vectorised over sliding windows."""
    bid, ask, mid, volume, ok, session = _inputs(ticks)
    n = len(ticks)
    out = pd.DataFrame({"timestamp": ticks["timestamp"].to_numpy(np.int64)})
    for col in ("session_id", "instrument"):
        if col in ticks.columns:
            out[col] = ticks[col].to_numpy()
    valid = _history_ok(ok, session)
    columns = {c: np.full(n, np.nan) for c in FACTOR_COLUMNS}

    t = np.flatnonzero(valid)
    if t.size:
        mid_w = sliding_window_view(mid, SHORT_WINDOW)[t - SHORT_WINDOW + 1]
        vol_w = sliding_window_view(volume, SHORT_WINDOW)[t - SHORT_WINDOW + 1]
        vol_long = sliding_window_view(volume, LONG_WINDOW)[t - LONG_WINDOW + 1].sum(axis=1)

        flat = np.ptp(mid_w, axis=1) == 0
        with np.errstate(invalid="ignore", divide="ignore"):
            skew = stats.skew(mid_w, axis=1, bias=True)
            kurt = stats.kurtosis(mid_w, axis=1, fisher=True, bias=True)
        columns["mid_price_mean"][t] = mid_w.mean(axis=1)
        columns["mid_price_std"][t] = mid_w.std(axis=1, ddof=1)
        columns["mid_price_skew"][t] = np.where(flat, np.nan, skew)
        columns["mid_price_kurt"][t] = np.where(flat, np.nan, kurt)

        vol_short = vol_w.sum(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            columns["volume_pct"][t] = np.where(vol_long > 0, vol_short / vol_long, np.nan)
            columns["prop_quoted_spread"][t] = (ask[t] - bid[t]) / mid[t]

            step = np.full(n, np.nan)
            step[1:] = mid[1:] / mid[:-1] - 1.0
            r_w = sliding_window_view(step, SHORT_WINDOW)[t - SHORT_WINDOW + 1]
            rc = r_w - r_w.mean(axis=1, keepdims=True)
            vc = vol_w - vol_w.mean(axis=1, keepdims=True)
            var_v = np.mean(vc * vc, axis=1)
            cov = np.mean(rc * vc, axis=1)
            columns["beta"][t] = np.where(var_v > 0, cov / np.where(var_v > 0, var_v, 1.0), np.nan)

            move = np.abs(mid[t] / mid[t - SHORT_WINDOW] - 1.0)
            columns["illiquidity"][t] = np.where(vol_short > 0, move / vol_short, np.nan)

    for c in FACTOR_COLUMNS:
        out[c] = columns[c]
    out["valid"] = valid
    return out


def accumulate_factor_return(factor, returns, valid=None) -> np.ndarray:
    """
    Running sum of z(factor)_s * R_s over points where both are finite (and
    valid). The z-score uses the mean and population std over those points;
    other points add nothing.
    """
    f = np.asarray(factor, dtype=np.float64)
    r = np.asarray(returns, dtype=np.float64)
    mask = np.isfinite(f) & np.isfinite(r)
    if valid is not None:
        mask &= np.asarray(valid, dtype=bool)
    if not mask.any():
        return np.zeros(len(f))
    mu, sigma = f[mask].mean(), f[mask].std()
    z = np.zeros(len(f)) if sigma == 0 else (f - mu) / sigma
    return np.cumsum(np.where(mask, z * np.where(mask, r, 0.0), 0.0))


def accumulate_factor_frame(factors: pd.DataFrame, returns, valid=None) -> pd.DataFrame:
    """
    Long-form (instrument, timestamp, factor, cumulative) rows, one curve per
    factor per instrument. ``returns`` is aligned row by row with ``factors``.
    """
    returns = np.asarray(returns, dtype=np.float64)
    valid = np.ones(len(factors), dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    instruments = (factors["instrument"].astype(str).to_numpy() if "instrument" in factors.columns
                   else np.full(len(factors), ""))
    pieces = []
    for name in pd.unique(instruments):
        rows = instruments == name
        for col in FACTOR_COLUMNS:
            curve = accumulate_factor_return(
                factors.loc[rows, col].to_numpy(), returns[rows],
                valid[rows] & factors.loc[rows, "valid"].to_numpy(bool),
            )
            pieces.append(pd.DataFrame({
                "instrument": name,
                "timestamp": factors.loc[rows, "timestamp"].to_numpy(np.int64),
                "factor": col,
                "cumulative": curve,
            }))
    if not pieces:
        return pd.DataFrame(columns=["instrument", "timestamp", "factor", "cumulative"])
    return pd.concat(pieces, ignore_index=True)


def write_factor_file(frame: pd.DataFrame, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False)
