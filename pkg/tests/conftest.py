"""
shared fixtures
small synthetic tick frames, feature frames and generated train/val/test splits
"""

import numpy as np
import pandas as pd
import pytest

from dataset import assemble_samples, chronological_split, concat_samples
from features import FEATURE_COLUMNS, build_labeled_frame
from ingest import ASK_PRICES, ASK_VOLUMES, BID_PRICES, BID_VOLUMES, LEVELS, ingest_file
from synth import SynthConfig, generate

# 09:00 exchange-local (UTC+8) on 2023-05-04, in UTC epoch ms
DAY_SESSION_START = int(pd.Timestamp("2023-05-04 01:00").value // 1_000_000)
# 23:00 exchange-local on 2023-05-03: night segment of trading day 2023-05-04
NIGHT_SESSION_START = int(pd.Timestamp("2023-05-03 15:00").value // 1_000_000)


def make_ticks(n, start=DAY_SESSION_START, step_ms=500, mid=5000.0, tick=1.0,
               instrument="ag", seed=0) -> pd.DataFrame:
    """Uncrossed L5 books on a regular grid with a random-walk mid."""
    rng = np.random.default_rng(seed)
    mids = mid + np.cumsum(rng.choice([-tick, 0.0, tick], size=n))
    bid1 = mids - tick / 2
    ask1 = mids + tick / 2
    level = np.arange(LEVELS)
    frame = pd.DataFrame({
        "timestamp": start + np.arange(n, dtype=np.int64) * step_ms,
        "lastPrice": mids + rng.choice([-tick / 2, tick / 2], size=n),
        "volume": rng.integers(0, 30, size=n).astype(float),
    })
    frame["cumAmount"] = np.cumsum(frame["volume"] * frame["lastPrice"])
    frame["cumVolume"] = np.cumsum(frame["volume"])
    frame[BID_PRICES] = bid1[:, None] - level * tick
    frame[BID_VOLUMES] = rng.integers(1, 50, size=(n, LEVELS)).astype(float)
    frame[ASK_PRICES] = ask1[:, None] + level * tick
    frame[ASK_VOLUMES] = rng.integers(1, 50, size=(n, LEVELS)).astype(float)
    frame["instrument"] = instrument
    return frame


def make_feature_frame(n, session_id=0, seed=0, start=DAY_SESSION_START) -> pd.DataFrame:
    """Feature-stage frame with every point valid and labelled."""
    rng = np.random.default_rng(seed)
    frame = pd.DataFrame(rng.normal(size=(n, len(FEATURE_COLUMNS))), columns=FEATURE_COLUMNS)
    frame.insert(0, "timestamp", start + np.arange(n, dtype=np.int64) * 500)
    frame["forward_return"] = rng.normal(scale=1e-3, size=n)
    frame["label"] = rng.integers(-1, 2, size=n).astype(np.int8)
    frame["valid"] = True
    frame["label_valid"] = True
    frame["session_id"] = session_id
    frame["instrument"] = "ag"
    return frame


def synthetic_splits(root, **overrides):
    """Generate a market, run it through ingest and labelling, and split it 8:1:1."""
    config = SynthConfig(**overrides)
    result = generate(config, root, progress=False)
    parts = []
    for path in result.files:
        ticks = ingest_file(path, config.schedule(), config.grid_ms, config.warmup)
        samples, _ = assemble_samples(build_labeled_frame(ticks, fee=result.fee,
                                                          horizon=config.horizon,
                                                          warmup_len=config.warmup))
        parts.append(samples)
    samples = concat_samples(parts)
    split = chronological_split(samples.t_end)
    return tuple(samples.subset(split.slice(name)) for name in ("train", "val", "test"))


@pytest.fixture
def ticks():
    return make_ticks(200)
