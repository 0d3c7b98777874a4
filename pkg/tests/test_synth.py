"""
test synth
seeded generator: determinism, ingest compatibility, label-ratio calibration
"""

import json

import numpy as np
import pandas as pd
import pytest

from features import build_labeled_frame
from ingest import ingest_file, parse_tick_file
from pipeline_config import ConfigError, InfeasibleRatioError
from synth import (
    META_FILE,
    SynthConfig,
    _announcements,
    calibrate_fee,
    generate,
    generate_day,
    read_meta,
)
from tests.conftest import DAY_SESSION_START, NIGHT_SESSION_START

SMALL = dict(sessions=("09:00-09:30",), n_days=3, instruments=("ag", "cu"))


@pytest.fixture(scope="module")
def generated(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    config = SynthConfig(seed=7, **SMALL)
    return config, generate(config, out, progress=False)


def test_file_layout(generated):
    """one file per instrument-day plus the meta file"""
    config, result = generated
    names = sorted(p.name for p in result.files)
    assert names == ["ag_20230504.csv", "ag_20230505.csv", "ag_20230508.csv",
                     "cu_20230504.csv", "cu_20230505.csv", "cu_20230508.csv"]
    meta = json.loads(result.meta_path.read_text())
    assert meta["fee"] == result.fee
    assert meta["session_starts"] == ["09:00"]
    assert read_meta(result.meta_path.parent) == meta


def test_label_ratio_calibrated(generated):
    """the calibrated fee puts 20% of labels in the minority classes"""
    config, result = generated
    down, flat, up = result.class_shares
    assert abs((down + up) - config.minority_share) <= 0.02, result.class_shares
    assert flat == pytest.approx(1 - down - up)


def test_pipeline_sees_the_same_ratio(generated):
    """ingesting and labelling the files reproduces the generator's class shares"""
    config, result = generated
    labels = []
    for path in result.files:
        frame = build_labeled_frame(ingest_file(path, config.schedule()), fee=result.fee)
        labels.append(frame.loc[frame["label_valid"], "label"].to_numpy())
    labels = np.concatenate(labels)
    share = np.mean(labels != 0)
    assert abs(share - config.minority_share) <= 0.02, f"minority share {share:.4f}"


def test_files_ingest_cleanly(generated, caplog):
    """generated files parse and fill without warnings"""
    config, result = generated
    with caplog.at_level("WARNING"):
        ticks = ingest_file(result.files[0], config.schedule())
    assert not [r for r in caplog.records if r.levelname == "WARNING"], caplog.text
    assert 3500 < len(ticks) <= 3600, "grid runs from the session open to the last record"
    assert not ticks["crossed"].any()
    assert ticks["filled"].sum() > 0, "row dropout leaves gaps to fill"


def test_deterministic(tmp_path):
    """same seed gives byte-identical output, across worker counts"""
    config = SynthConfig(seed=3, sessions=("09:00-09:10",), n_days=2)
    a = generate(config, tmp_path / "a", progress=False)
    b = generate(config, tmp_path / "b", workers=2, progress=False)
    for pa, pb in zip(a.files, b.files):
        assert pa.read_bytes() == pb.read_bytes(), pa.name
    assert (tmp_path / "a" / META_FILE).read_bytes() == (tmp_path / "b" / META_FILE).read_bytes()


def test_seed_changes_output():
    config = SynthConfig(seed=1, sessions=("09:00-09:10",), n_days=1)
    a, _ = generate_day(config, 0, 0)
    b, _ = generate_day(SynthConfig(seed=2, sessions=("09:00-09:10",), n_days=1), 0, 0)
    assert not a["bidPrice1"].equals(b["bidPrice1"])


def test_book_is_consistent():
    """bid levels descend, ask levels ascend, the book never crosses"""
    ticks, _ = generate_day(SynthConfig(sessions=("09:00-09:30",), n_days=1), 0, 0)
    bids = ticks[[f"bidPrice{i}" for i in range(1, 6)]].to_numpy()
    asks = ticks[[f"askPrice{i}" for i in range(1, 6)]].to_numpy()
    assert np.all(np.diff(bids, axis=1) < 0) and np.all(np.diff(asks, axis=1) > 0)
    assert np.all(asks[:, 0] > bids[:, 0])
    assert np.all(np.diff(ticks["cumVolume"]) >= 0)


def test_night_session_mapping():
    """a 23:00 session opens on the previous calendar evening"""
    config = SynthConfig(sessions=("23:00-23:30", "09:00-09:30"), n_days=1)
    grid = config.session_grid(pd.Timestamp("2023-05-04"))
    assert grid == [(NIGHT_SESSION_START, 3600), (DAY_SESSION_START, 3600)]


def test_night_session_ingests_into_trading_day(tmp_path):
    config = SynthConfig(sessions=("23:00-23:10", "09:00-09:10"), n_days=1)
    result = generate(config, tmp_path, progress=False)
    ticks = ingest_file(result.files[0], config.schedule())
    assert (ticks["trading_day"] == "2023-05-04").all()
    assert ticks["session_id"].nunique() == 2


def test_announced_jumps_land_one_horizon_later():
    """each announcement moves the mid exactly one horizon later unless cancelled"""
    config = SynthConfig(sessions=("09:00-11:00",), n_days=1)
    announced, pending, jumps = _announcements(config, np.random.default_rng(0), 14_400)
    h = config.horizon
    starts = np.flatnonzero(announced)
    assert starts.size > 50
    assert np.all(np.diff(starts) >= h), "one announcement pending at a time"
    moved = np.flatnonzero(jumps)
    assert set(moved - h) <= set(starts)
    np.testing.assert_array_equal(np.sign(jumps[moved]), announced[moved - h])
    np.testing.assert_allclose(np.abs(jumps[moved]), config.jump_size * config.volatility * np.sqrt(h))
    assert 0.3 < 1 - moved.size / starts.size < 0.8, "about cancel_share of moves are called off"
    for t in starts[:10]:
        assert np.all(pending[t:t + h] == announced[t])


def test_announce_rate_covers_minority_share():
    """announced windows cover a bit more than the minority share needs"""
    config = SynthConfig()
    wait = 1.0 / config.announce_rate - 1.0
    covered = 1.0 / (1.0 + wait / config.horizon)
    assert covered * (1 - config.cancel_share) == pytest.approx(1.1 * config.minority_share)


def test_signal_spikes_last_price_on_announcements():
    """with full signal the last price leaves the mid only on announcement rows"""
    config = SynthConfig(sessions=("09:00-09:30",), n_days=1, row_dropout=0.0)
    ticks, _ = generate_day(config, 0, 0)
    mid = (ticks["bidPrice1"] + ticks["askPrice1"]) / 2
    off_mid = np.abs(ticks["lastPrice"] - mid) > 1e-6
    assert 0 < off_mid.sum() < 0.05 * len(ticks)


def test_infeasible_ratio(tmp_path):
    """a frozen price cannot produce any minority labels"""
    config = SynthConfig(volatility=0.0, sessions=("09:00-09:10",), n_days=1)
    with pytest.raises(InfeasibleRatioError) as err:
        generate(config, tmp_path, progress=False)
    assert err.value.achievable == (0.0, 0.0)


def test_calibrate_fee_quantile():
    """fee sits at the (1 - minority share) quantile of |R|"""
    returns = np.linspace(-1.0, 1.0, 1001)
    assert calibrate_fee(returns, 0.2) == pytest.approx(0.8)


def test_fixed_fee_skips_calibration(tmp_path):
    config = SynthConfig(fee=1e-3, sessions=("09:00-09:10",), n_days=1)
    assert generate(config, tmp_path, progress=False).fee == 1e-3


def test_config_validation():
    """bad generator settings are configuration errors"""
    for bad in (dict(signal_strength=1.5), dict(label_ratio=(1.0, 8.0)),
                dict(instruments=("a_b",)), dict(sessions=("09:00",)),
                dict(row_dropout=1.0), dict(n_days=0), dict(cancel_share=1.0),
                dict(jump_size=-1.0)):
        with pytest.raises(ConfigError):
            SynthConfig(**bad)


def test_config_file(tmp_path):
    path = tmp_path / "synth.cfg"
    path.write_text("instruments = ag,cu\nsessions = 09:00-09:30\nlabel_ratio = 1,18,1\n")
    config = SynthConfig.from_file(path, {"seed": 4})
    assert config.instruments == ("ag", "cu") and config.seed == 4
    assert config.minority_share == pytest.approx(0.1)


def test_tick_file_format(generated):
    """written files use the canonical header"""
    _, result = generated
    ticks = parse_tick_file(result.files[0])
    assert (ticks["instrument"] == "ag").all()


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
