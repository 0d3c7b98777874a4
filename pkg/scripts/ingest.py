#!/usr/bin/env python3
"""
Ingest: Tick Parsing, Session Segmentation and Forward Fill
HFT Label Imbalance Toolkit

This module:
1. Parses canonical L5 tick files (one 0.5 s snapshot per row)
2. Attaches each record to a trading session (night segment -> next trading day)
3. Forward-fills the 0.5 s grid inside every session
4. Marks the warm-up region of each session label-invalid
"""

import csv
import dataclasses
import logging
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np
import pandas as pd
from tqdm import tqdm

from pipeline_config import GRID_MS, WARMUP, SessionSchedule, TickFileError

logger = logging.getLogger(__name__)

LEVELS = 5
BID_PRICES = [f"bidPrice{i}" for i in range(1, LEVELS + 1)]
BID_VOLUMES = [f"bidVolume{i}" for i in range(1, LEVELS + 1)]
ASK_PRICES = [f"askPrice{i}" for i in range(1, LEVELS + 1)]
ASK_VOLUMES = [f"askVolume{i}" for i in range(1, LEVELS + 1)]
TICK_COLUMNS = (
    ["timestamp", "lastPrice", "volume", "cumAmount", "cumVolume"]
    + BID_PRICES + BID_VOLUMES + ASK_PRICES + ASK_VOLUMES
)
NUMERIC_COLUMNS = TICK_COLUMNS[1:]
DAY_MS = 86_400_000


@dataclasses.dataclass(frozen=True)
class TickSchema:
    """Column order of a tick file. A trailing 'instrument' column is optional."""

    columns: tuple[str, ...] = tuple(TICK_COLUMNS)
    delimiter: str = ","


DEFAULT_SCHEMA = TickSchema()


@dataclasses.dataclass(frozen=True)
class TickRecord:
    timestamp: int
    lastPrice: float
    volume: float
    cumAmount: float
    cumVolume: float
    bidPrice: tuple[float, ...]
    bidVolume: tuple[float, ...]
    askPrice: tuple[float, ...]
    askVolume: tuple[float, ...]
    instrument: str = ""
    crossed: bool = False

    @classmethod
    def from_row(cls, row: Mapping) -> "TickRecord":
        return cls(
            timestamp=int(row["timestamp"]),
            lastPrice=float(row["lastPrice"]),
            volume=float(row["volume"]),
            cumAmount=float(row["cumAmount"]),
            cumVolume=float(row["cumVolume"]),
            bidPrice=tuple(float(row[c]) for c in BID_PRICES),
            bidVolume=tuple(float(row[c]) for c in BID_VOLUMES),
            askPrice=tuple(float(row[c]) for c in ASK_PRICES),
            askVolume=tuple(float(row[c]) for c in ASK_VOLUMES),
            instrument=str(row.get("instrument", "")),
            crossed=bool(row.get("crossed", False)),
        )

    def as_row(self) -> dict:
        row = {
            "timestamp": self.timestamp,
            "lastPrice": self.lastPrice,
            "volume": self.volume,
            "cumAmount": self.cumAmount,
            "cumVolume": self.cumVolume,
        }
        for names, values in (
            (BID_PRICES, self.bidPrice),
            (BID_VOLUMES, self.bidVolume),
            (ASK_PRICES, self.askPrice),
            (ASK_VOLUMES, self.askVolume),
        ):
            row.update(zip(names, values))
        row["instrument"] = self.instrument
        row["crossed"] = self.crossed
        return row


def iter_records(ticks: pd.DataFrame) -> Iterator[TickRecord]:
    for row in ticks.to_dict(orient="records"):
        yield TickRecord.from_row(row)


def instrument_from_path(path) -> str:
    """'ag_20230505.csv' -> 'ag'."""
    return Path(path).stem.split("_")[0]


def parse_tick_file(path, schema: TickSchema = DEFAULT_SCHEMA, instrument: str | None = None,
                    strict: bool = False) -> pd.DataFrame:
    """
    Parse one canonical tick file.

    Returns a frame sorted by strictly increasing timestamp with a boolean
    'crossed' column. Rows with non-numeric fields or negative volume are
    dropped and reported with their line numbers (raised when strict).
    Backwards or repeated timestamps raise TickFileError naming the line.
    """
    path = Path(path)
    try:
        f = open(path, newline="", encoding="utf-8")
    except OSError as e:
        raise TickFileError(f"cannot read file ({e.strerror})", path) from e

    expected = list(schema.columns)
    rows, lines, bad = [], [], []
    with f:
        reader = csv.reader(f, delimiter=schema.delimiter)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise TickFileError("empty file, header row missing", path, 1)
        has_instrument = header == expected + ["instrument"]
        if header != expected and not has_instrument:
            raise TickFileError(f"header does not match schema: {header[:6]}...", path, 1)
        width = len(header)
        try:
            for row in reader:
                if not row or all(not cell.strip() for cell in row):
                    continue
                if len(row) != width:
                    bad.append(reader.line_num)
                    continue
                rows.append(row)
                lines.append(reader.line_num)
        except (csv.Error, UnicodeDecodeError) as e:
            raise TickFileError(f"unreadable content ({e})", path, reader.line_num) from e

    raw = pd.DataFrame(rows, columns=header)
    line_numbers = np.asarray(lines, dtype=np.int64)
    numeric = raw[expected].apply(pd.to_numeric, errors="coerce")
    malformed = numeric.isna().any(axis=1).to_numpy() | (numeric["volume"] < 0).to_numpy()
    if malformed.any():
        bad.extend(line_numbers[malformed].tolist())
    if bad:
        bad = sorted(bad)
        if strict:
            raise TickFileError(f"{len(bad)} malformed rows, first at line {bad[0]}", path, bad[0])
        logger.warning("%s: dropped %d malformed rows at lines %s", path.name, len(bad),
                       bad[:20])

    keep = ~malformed
    ticks = numeric.loc[keep].reset_index(drop=True)
    kept_lines = line_numbers[keep]
    ticks["timestamp"] = ticks["timestamp"].astype(np.int64)

    ts = ticks["timestamp"].to_numpy()
    backwards = np.flatnonzero(np.diff(ts) <= 0)
    if backwards.size:
        i = backwards[0] + 1
        raise TickFileError(
            f"timestamp {ts[i]} does not increase (previous {ts[i - 1]})", path, int(kept_lines[i])
        )

    if has_instrument:
        ticks["instrument"] = raw.loc[keep, "instrument"].str.strip().to_numpy()
    else:
        ticks["instrument"] = instrument or instrument_from_path(path)
    ticks["crossed"] = (ticks["askPrice1"] <= ticks["bidPrice1"]).to_numpy()
    n_crossed = int(ticks["crossed"].sum())
    if n_crossed:
        logger.warning("%s: %d crossed-book rows flagged", path.name, n_crossed)
    return ticks


def parse_tick_files(paths: Sequence, schema: TickSchema = DEFAULT_SCHEMA, workers: int = 1,
                     progress: bool = True) -> list[pd.DataFrame]:
    """Parse several files, concurrently when workers > 1; output keeps input order."""
    paths = [Path(p) for p in paths]
    if workers <= 1 or len(paths) <= 1:
        return [parse_tick_file(p, schema) for p in tqdm(paths, disable=not progress,
                                                          desc="parsing")]
    results: list[pd.DataFrame | None] = [None] * len(paths)
    with ProcessPoolExecutor(max_workers=workers) as executor:
        futures = {executor.submit(parse_tick_file, p, schema): i for i, p in enumerate(paths)}
        with tqdm(total=len(paths), disable=not progress, desc="parsing") as pbar:
            for future in futures:
                results[futures[future]] = future.result()
                pbar.update(1)
    return results


def assign_sessions(ticks: pd.DataFrame, schedule: SessionSchedule | None = None) -> pd.DataFrame:
    """
    Attach trading_day, segment, session_start (ms) and session_id.

    A record belongs to the latest segment start at or before its local time;
    segments starting after the day roll belong to the next trading day.
    Records before the first segment of a trading day are dropped.
    """
    schedule = schedule or SessionSchedule()
    out = ticks.copy()
    if out.empty:
        for col, dtype in (("trading_day", object), ("segment", np.int64),
                           ("session_start", np.int64), ("session_id", np.int64)):
            out[col] = pd.Series(dtype=dtype)
        return out

    starts = np.asarray(schedule.clock_starts_ms(), dtype=np.int64)
    clock = out["timestamp"].to_numpy(np.int64) + schedule.offset_ms + schedule.shift_ms
    day = clock // DAY_MS
    segment = np.searchsorted(starts, clock % DAY_MS, side="right") - 1

    orphan = segment < 0
    if orphan.any():
        logger.warning("dropped %d records outside every session segment", int(orphan.sum()))
        out = out.loc[~orphan].reset_index(drop=True)
        day, segment = day[~orphan], segment[~orphan]

    out["trading_day"] = pd.to_datetime(day * DAY_MS, unit="ms").strftime("%Y-%m-%d")
    out["segment"] = segment.astype(np.int64)
    out["session_start"] = day * DAY_MS + starts[segment] - schedule.offset_ms - schedule.shift_ms
    keys = out["instrument"].astype(str) + "|" + out["session_start"].astype(str)
    out["session_id"] = pd.factorize(keys)[0].astype(np.int64)
    return out


def forward_fill(ticks: pd.DataFrame, grid_ms: int = GRID_MS,
                 schedule: SessionSchedule | None = None) -> pd.DataFrame:
    """
    Put every session on a gap-free grid starting at its session start.

    Missing grid points copy the most recent prior record with volume 0 and
    filled=True. Grid points before the first record of a session have no
    prior record: they are kept with NaN fields and fill_invalid=True.
    Applying the function twice gives the same frame.
    """
    if "session_id" not in ticks.columns:
        ticks = assign_sessions(ticks, schedule)

    pieces = []
    for _, session in ticks.groupby("session_id", sort=False):
        if "fill_invalid" in session.columns:
            session = session.loc[~session["fill_invalid"].astype(bool)]
        if session.empty:
            continue
        start = int(session["session_start"].iloc[0])
        k = np.rint((session["timestamp"].to_numpy(np.int64) - start) / grid_ms).astype(np.int64)
        body = session.assign(_k=k).drop_duplicates("_k", keep="last").set_index("_k")
        if len(body) < len(session):
            logger.warning("session %s: %d records collapsed onto shared grid points",
                           session["session_id"].iloc[0], len(session) - len(body))
        prior_filled = body["filled"].astype(bool) if "filled" in body.columns else None
        # flags go numeric so the reindexed frame has no object columns for ffill to downcast
        body = body.drop(columns=["filled", "fill_invalid"], errors="ignore")
        if "crossed" in body.columns:
            body = body.assign(crossed=body["crossed"].astype(np.float64))

        grid = body.reindex(np.arange(0, int(k.max()) + 1))
        present = grid["timestamp"].notna().to_numpy()
        leading = np.cumsum(present) == 0

        grid = grid.ffill()
        grid["timestamp"] = start + grid.index.to_numpy(np.int64) * grid_ms
        grid.loc[~present, "volume"] = 0.0
        filled = ~present
        if prior_filled is not None:
            filled = filled | prior_filled.reindex(grid.index, fill_value=False).to_numpy(bool)
        grid["filled"] = filled
        grid["fill_invalid"] = leading
        for col in ("instrument", "trading_day", "segment", "session_start", "session_id"):
            grid[col] = session[col].iloc[0]
        if "crossed" in grid.columns:
            grid["crossed"] = grid["crossed"].eq(1.0)
        pieces.append(grid)

    if not pieces:
        out = ticks.iloc[0:0].copy()
        out["filled"] = pd.Series(dtype=bool)
        out["fill_invalid"] = pd.Series(dtype=bool)
        return out

    out = pd.concat(pieces, ignore_index=True)
    for col in ("timestamp", "segment", "session_start", "session_id"):
        out[col] = out[col].astype(np.int64)
    return out


def mark_warmup(ticks: pd.DataFrame, warmup_len: int = WARMUP) -> np.ndarray:
    """Label-validity mask: False for the first warmup_len grid points of every session."""
    if "session_id" not in ticks.columns:
        raise ValueError("session boundaries unknown: run assign_sessions/forward_fill first")
    position = ticks.groupby("session_id", sort=False).cumcount().to_numpy()
    return position >= warmup_len


def ingest_file(path, schedule: SessionSchedule | None = None, grid_ms: int = GRID_MS,
                warmup_len: int = WARMUP, schema: TickSchema = DEFAULT_SCHEMA) -> pd.DataFrame:
    """parse -> sessions -> forward fill -> warm-up mask"""
    ticks = parse_tick_file(path, schema)
    ticks = forward_fill(assign_sessions(ticks, schedule), grid_ms)
    ticks["warmup_valid"] = mark_warmup(ticks, warmup_len)
    return ticks


def write_tick_file(ticks: pd.DataFrame, path) -> None:
    """Write records in the canonical tick format (instrument column appended)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    ticks[TICK_COLUMNS + ["instrument"]].to_csv(path, index=False, float_format="%.4f")


def write_ingested_file(ticks: pd.DataFrame, path) -> None:
    """Full ingested grid (session columns and fill flags included)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    ticks.to_csv(path, index=False)


def read_ingested_file(path) -> pd.DataFrame:
    ticks = pd.read_csv(path, float_precision="round_trip", keep_default_na=False,
                        na_values=[""], dtype={"instrument": str, "trading_day": str})
    for col in ("crossed", "filled", "fill_invalid", "warmup_valid"):
        if col in ticks.columns:
            ticks[col] = ticks[col].astype(str).str.lower().eq("true")
    for col in ("timestamp", "segment", "session_start", "session_id"):
        if col in ticks.columns:
            ticks[col] = ticks[col].astype(np.int64)
    return ticks
