#!/usr/bin/env python3
"""
Synth: seeded L5 tick streams with a tunable predictive signal
HFT Label Imbalance Toolkit

Per session the log mid price is a random walk with per-step volatility
sigma, plus announced jumps. An announcement at step t is followed by a jump
of +-jump_size * sigma * sqrt(horizon) at step t + horizon, unless the move is
cancelled (probability cancel_share). Only one announcement is pending at a
time, so every label endpoint in [t, t + horizon) sees exactly the jump it
will be scored on.

The book reveals announcements with strength s:

    revealed_t = s * ANNOUNCE_SCALE * a_t + sqrt(1 - s^2) * eta_t

where a_t is the announced sign on the announcement step and 0 elsewhere.
lastPrice sits at mid + half spread * tanh(revealed_t / 2), so diffLastPrice
carries a one-row spike that survives per-window z-scoring. Level volumes
lean towards the pending sign for the whole wait. s = 0 gives unlearnable
labels; at s = 1 an announced window is a minority label with probability
about 1 - cancel_share, below one half, so plain cross-entropy keeps
predicting the majority while reweighted losses recover the minority.

The fee is calibrated on the generated returns so that the label histogram
matches the target ratio.

Output: one canonical tick file per instrument and trading day,
{instrument}_{YYYYMMDD}.csv, plus synth_meta.json.
"""

import dataclasses
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Mapping

import numpy as np
import pandas as pd
from tqdm import tqdm

from features import label_returns
from ingest import ASK_PRICES, ASK_VOLUMES, BID_PRICES, BID_VOLUMES, DAY_MS, LEVELS, write_tick_file
from pipeline_config import (
    DAY_ROLL,
    GRID_MS,
    HORIZON,
    TZ_OFFSET_HOURS,
    WARMUP,
    ConfigError,
    InfeasibleRatioError,
    SessionSchedule,
    config_from_mapping,
    config_to_mapping,
    parse_time_of_day,
    read_key_value_file,
)

logger = logging.getLogger(__name__)

META_FILE = "synth_meta.json"
ANNOUNCE_SCALE = 2.0
DEFAULT_SESSIONS = ("23:00-01:00", "09:00-10:15", "10:30-11:30", "13:30-15:00")


@dataclasses.dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    instruments: tuple[str, ...] = ("ag",)
    n_days: int = 5
    start_date: str = "2023-05-04"
    sessions: tuple[str, ...] = DEFAULT_SESSIONS
    tz_offset_hours: float = TZ_OFFSET_HOURS
    day_roll: str = DAY_ROLL
    grid_ms: int = GRID_MS
    base_price: float = 5000.0
    tick_size: float = 0.1
    volatility: float = 5e-5
    jump_size: float = 4.0
    cancel_share: float = 0.55
    spread_widen_prob: float = 0.05
    depth: float = 50.0
    depth_decay: float = 0.8
    imbalance_strength: float = 0.5
    volume_intensity: float = 20.0
    signal_strength: float = 1.0
    label_ratio: tuple[float, ...] = (1.0, 8.0, 1.0)
    horizon: int = HORIZON
    warmup: int = WARMUP
    row_dropout: float = 0.01
    fee: float | None = None

    def __post_init__(self):
        if not 0.0 <= self.signal_strength <= 1.0:
            raise ConfigError(f"signal_strength must be in [0, 1], got {self.signal_strength}")
        if not 0.0 <= self.cancel_share < 1.0:
            raise ConfigError(f"cancel_share must be in [0, 1), got {self.cancel_share}")
        if self.jump_size < 0:
            raise ConfigError(f"jump_size must be >= 0, got {self.jump_size}")
        if len(self.label_ratio) != 3 or any(r <= 0 for r in self.label_ratio):
            raise ConfigError(f"label_ratio needs three positive parts, got {self.label_ratio}")
        if not self.instruments or any("_" in i or not i for i in self.instruments):
            raise ConfigError(f"instrument names must be non-empty without '_': {self.instruments}")
        if self.n_days < 1 or self.horizon < 1 or self.tick_size <= 0 or self.volatility < 0:
            raise ConfigError("n_days, horizon and tick_size must be positive")
        if not 0.0 <= self.row_dropout < 1.0:
            raise ConfigError(f"row_dropout must be in [0, 1), got {self.row_dropout}")
        self.session_bounds()

    @classmethod
    def from_file(cls, path, overrides: Mapping | None = None) -> "SynthConfig":
        values = dict(read_key_value_file(path)) if path else {}
        values.update({k: v for k, v in (overrides or {}).items() if v is not None})
        return config_from_mapping(cls, values)

    @property
    def minority_share(self) -> float:
        down, flat, up = self.label_ratio
        return (down + up) / (down + flat + up)

    @property
    def announce_rate(self) -> float:
        """
        Per-step announcement probability. Announced windows cover 10% more
        endpoints than the minority share needs after cancellations, so the
        calibrated fee falls among executed jumps rather than random-walk noise.
        """
        covered = min(0.95, 1.1 * self.minority_share / (1.0 - self.cancel_share))
        wait = self.horizon * (1.0 / covered - 1.0)
        return 1.0 / (1.0 + wait)

    def session_bounds(self) -> list[tuple[int, int]]:
        """(start, end) local ms per session; an end at or before its start wraps midnight."""
        bounds = []
        for text in self.sessions:
            try:
                start, end = (parse_time_of_day(p) for p in text.split("-"))
            except ValueError as e:
                raise ConfigError(f"bad session {text!r}; expected HH:MM-HH:MM") from e
            if end <= start:
                end += DAY_MS
            if end - start < self.grid_ms:
                raise ConfigError(f"session {text!r} is shorter than one grid step")
            bounds.append((start, end))
        return bounds

    def schedule(self) -> SessionSchedule:
        starts = tuple(text.split("-")[0].strip() for text in self.sessions)
        return SessionSchedule(starts=starts, tz_offset_hours=self.tz_offset_hours,
                               day_roll=self.day_roll)

    def trading_days(self) -> list[pd.Timestamp]:
        return list(pd.bdate_range(self.start_date, periods=self.n_days))

    def session_grid(self, trading_day: pd.Timestamp) -> list[tuple[int, int]]:
        """(first timestamp in UTC ms, number of grid points) per session, in time order."""
        roll = parse_time_of_day(self.day_roll)
        day_ms = int(trading_day.value // 1_000_000)
        offset = int(round(self.tz_offset_hours * 3_600_000))
        grid = []
        for start, end in self.session_bounds():
            # sessions opening after the roll belong to the next trading day
            local = day_ms - DAY_MS + start if start >= roll else day_ms + start
            grid.append((local - offset, (end - start) // self.grid_ms))
        return sorted(grid)


@dataclasses.dataclass
class SynthResult:
    files: list[Path]
    fee: float
    class_shares: tuple[float, float, float]
    meta_path: Path


def _announcements(config: SynthConfig, rng: np.random.Generator, n: int):
    """Announced signs (on the announcement step), pending signs, and the jump per step."""
    h = config.horizon
    candidate = rng.random(n) < config.announce_rate
    sign = rng.choice((-1.0, 1.0), size=n)
    cancelled = rng.random(n) < config.cancel_share
    size = config.jump_size * config.volatility * np.sqrt(h)

    announced = np.zeros(n)
    pending = np.zeros(n)
    jumps = np.zeros(n)
    free_from = 0
    for t in np.flatnonzero(candidate):
        if t < free_from:
            continue
        announced[t] = sign[t]
        pending[t:t + h] = sign[t]
        if t + h < n and not cancelled[t]:
            jumps[t + h] = sign[t] * size
        free_from = t + h
    return announced, pending, jumps


def _session_book(config: SynthConfig, rng: np.random.Generator, log_price: float, n: int):
    """One session's book arrays plus the closing log price."""
    steps = rng.normal(0.0, config.volatility, n)
    eta = rng.normal(size=n)
    widen = rng.random(n) < config.spread_widen_prob
    announced, pending, jumps = _announcements(config, rng, n)
    log_p = log_price + np.cumsum(steps + jumps)

    s = config.signal_strength
    noise = np.sqrt(1.0 - s * s) * eta
    revealed = s * ANNOUNCE_SCALE * announced + noise

    # mid on the half-tick grid; spread parity keeps both sides on the tick grid
    half_ticks = np.rint(np.exp(log_p) / (config.tick_size / 2.0)).astype(np.int64)
    spread = np.where(half_ticks % 2 == 1, 1, 2) + 2 * widen
    bid1 = (half_ticks - spread) // 2
    ask1 = (half_ticks + spread) // 2
    mid = half_ticks * (config.tick_size / 2.0)

    level = np.arange(LEVELS)
    depth = config.depth * config.depth_decay ** level
    tilt = config.imbalance_strength * np.tanh(s * pending + noise)[:, None]
    book = {
        "bid": (bid1[:, None] - level) * config.tick_size,
        "ask": (ask1[:, None] + level) * config.tick_size,
        "bidv": rng.poisson(depth * (1.0 + tilt)).astype(np.float64),
        "askv": rng.poisson(depth * (1.0 - tilt)).astype(np.float64),
        "volume": rng.poisson(config.volume_intensity, n).astype(np.float64),
        "last": np.round(mid + 0.5 * spread * config.tick_size * np.tanh(revealed / 2.0), 4),
        "mid": mid,
    }
    return book, float(log_p[-1])


def generate_day(config: SynthConfig, instrument_index: int, day_index: int) -> tuple[pd.DataFrame, np.ndarray]:
    """
    One instrument-day. Returns the tick frame (after row dropout) and the
    forward returns of every label-valid point, for fee calibration.
    """
    instrument = config.instruments[instrument_index]
    trading_day = config.trading_days()[day_index]
    rng = np.random.default_rng([config.seed, instrument_index, day_index])
    log_price = np.log(config.base_price) + rng.normal(0.0, 0.01)

    frames, returns = [], []
    cum_volume = cum_amount = 0.0
    for start_ts, n in config.session_grid(trading_day):
        book, log_price = _session_book(config, rng, log_price, n)
        keep = rng.random(n) >= config.row_dropout
        keep[0] = True

        amount = book["volume"] * book["last"]
        frame = pd.DataFrame({
            "timestamp": start_ts + np.arange(n, dtype=np.int64) * config.grid_ms,
            "lastPrice": book["last"],
            "volume": book["volume"],
            "cumAmount": cum_amount + np.cumsum(amount),
            "cumVolume": cum_volume + np.cumsum(book["volume"]),
        })
        cum_amount += float(amount.sum())
        cum_volume += float(book["volume"].sum())
        frame[BID_PRICES] = book["bid"]
        frame[BID_VOLUMES] = book["bidv"]
        frame[ASK_PRICES] = book["ask"]
        frame[ASK_VOLUMES] = book["askv"]
        frame["instrument"] = instrument
        frames.append(frame.loc[keep])

        # returns as the pipeline will see them: dropped rows forward-filled
        seen = book["mid"][np.maximum.accumulate(np.where(keep, np.arange(n), 0))]
        t = np.arange(config.warmup, n - config.horizon)
        if t.size:
            returns.append((seen[t + config.horizon] - seen[t]) / seen[t])

    ticks = pd.concat(frames, ignore_index=True)
    return ticks, (np.concatenate(returns) if returns else np.zeros(0))


def calibrate_fee(returns: np.ndarray, minority_share: float) -> float:
    """Fee whose labels put ``minority_share`` of the returns outside [-fee, fee]."""
    magnitude = np.abs(np.asarray(returns, dtype=np.float64))
    if magnitude.size == 0:
        raise ConfigError("sessions are too short for the horizon; no labelled points")
    ceiling = float(np.mean(magnitude > 0))
    if minority_share > ceiling:
        raise InfeasibleRatioError(
            f"target minority share {minority_share:.4f} is unreachable "
            f"({1 - ceiling:.2%} of returns are exactly zero)",
            achievable=(0.0, ceiling),
        )
    return float(np.quantile(magnitude, 1.0 - minority_share))


def _day_job(args):
    config, instrument_index, day_index, out_dir = args
    ticks, returns = generate_day(config, instrument_index, day_index)
    day = config.trading_days()[day_index]
    path = Path(out_dir) / f"{config.instruments[instrument_index]}_{day:%Y%m%d}.csv"
    write_tick_file(ticks, path)
    return path, returns


def generate(config: SynthConfig, out_dir, workers: int = 1, progress: bool = True) -> SynthResult:
    """Write every instrument-day file and synth_meta.json; returns the calibrated fee."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    jobs = [(config, i, d, str(out_dir))
            for i in range(len(config.instruments)) for d in range(config.n_days)]
    if workers <= 1:
        results = [_day_job(job) for job in tqdm(jobs, disable=not progress, desc="synth")]
    else:
        with ProcessPoolExecutor(max_workers=workers) as executor:
            results = list(tqdm(executor.map(_day_job, jobs), total=len(jobs),
                                disable=not progress, desc="synth"))

    returns = np.concatenate([r for _, r in results])
    fee = config.fee if config.fee is not None else calibrate_fee(returns, config.minority_share)
    labels = label_returns(returns, fee) if returns.size else np.zeros(0, dtype=np.int8)
    shares = tuple(float(np.mean(labels == v)) if labels.size else 0.0 for v in (-1, 0, 1))
    target = config.minority_share
    if config.fee is None and abs((shares[0] + shares[2]) - target) > 0.02:
        logger.warning("achieved minority share %.4f is more than 0.02 from target %.4f",
                       shares[0] + shares[2], target)

    meta_path = out_dir / META_FILE
    meta = {
        "fee": fee,
        "class_shares": {"-1": shares[0], "0": shares[1], "1": shares[2]},
        "labelled_points": int(returns.size),
        "session_starts": list(config.schedule().starts),
        "files": [p.name for p, _ in results],
        "config": {k: list(v) if isinstance(v, tuple) else v
                   for k, v in config_to_mapping(config).items()},
    }
    with open(meta_path, "w", encoding="utf-8") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
    return SynthResult([Path(p) for p, _ in results], fee, shares, meta_path)


def read_meta(directory) -> dict | None:
    path = Path(directory) / META_FILE
    if not path.exists():
        return None
    with open(path, encoding="utf-8") as f:
        return json.load(f)
