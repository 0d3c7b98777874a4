"""
test features
per-timestamp variables, forward returns and the 3-class fee label
"""

import math

import numpy as np
import pandas as pd
import pytest

from features import (
    FEATURE_COLUMNS,
    build_labeled_frame,
    compute_feature_frame,
    compute_features,
    compute_return,
    forward_returns,
    label,
    label_returns,
    labeled_points,
    read_feature_file,
    write_feature_file,
)
from ingest import TickRecord, assign_sessions, forward_fill
from tests.conftest import NIGHT_SESSION_START, make_ticks


def _record(bid1=100.0, ask1=102.0, last=101.5, volume=0.0, crossed=False):
    return TickRecord(
        timestamp=0, lastPrice=last, volume=volume, cumAmount=0.0, cumVolume=0.0,
        bidPrice=(bid1, bid1 - 1, bid1 - 2, bid1 - 3, bid1 - 4), bidVolume=(1.0,) * 5,
        askPrice=(ask1, ask1 + 1, ask1 + 2, ask1 + 3, ask1 + 4), askVolume=(1.0,) * 5,
        crossed=crossed,
    )


def test_compute_features_example():
    """diffs are taken against the mid of the best quotes"""
    row = compute_features(_record(volume=0.0))
    assert row.midPrice == 101.0
    assert row.diffBidPrice == (-1.0, -2.0, -3.0, -4.0, -5.0)
    assert row.diffAskPrice == (1.0, 2.0, 3.0, 4.0, 5.0)
    assert row.diffLastPrice == 0.5
    assert row.logVolume == 0.0, "zero volume maps to logVolume 0"
    assert row.valid
    assert len(row.values()) == len(FEATURE_COLUMNS) == 13


def test_log_volume_positive():
    """positive volume is log-transformed"""
    assert compute_features(_record(volume=math.e)).logVolume == pytest.approx(1.0)


def test_nonpositive_price_invalid():
    """zero or negative level-1 prices make the row invalid"""
    assert not compute_features(_record(bid1=0.0)).valid
    assert not compute_features(_record(ask1=-1.0)).valid


def test_crossed_record_invalid():
    """crossed books never produce valid features"""
    assert not compute_features(_record(crossed=True)).valid


def test_feature_frame_matches_scalar():
    """vectorised features equal the per-record computation"""
    ticks = make_ticks(300, seed=7)
    frame = compute_feature_frame(ticks)
    for i in range(0, 300, 17):
        expected = compute_features(ticks.iloc[i].to_dict()).values()
        got = frame.loc[i, FEATURE_COLUMNS].to_numpy(np.float64)
        np.testing.assert_allclose(got, expected, rtol=1e-10, atol=0)
    assert frame["valid"].all()


def test_feature_frame_masks_fill_invalid():
    """leading unfilled grid points are invalid"""
    ticks = forward_fill(assign_sessions(make_ticks(5, start=NIGHT_SESSION_START + 1000)))
    frame = compute_feature_frame(ticks)
    assert frame["valid"].tolist() == [False, False, True, True, True, True, True]


def test_compute_return_example():
    """R = (mid[t+h] - mid[t]) / mid[t]"""
    mid = np.full(100, 100.0)
    mid[59] = 101.0
    r, ok = compute_return(mid, 0, horizon=59)
    assert ok and r == pytest.approx(0.01, rel=1e-12)


def test_compute_return_past_end():
    """no return when t + h runs past the series"""
    r, ok = compute_return(np.ones(100), 41, horizon=59)
    assert not ok and math.isnan(r)


def test_compute_return_session_boundary():
    """returns never cross a session boundary"""
    session = np.r_[np.zeros(60, int), np.ones(60, int)]
    _, ok = compute_return(np.ones(120), 1, horizon=59, session_id=session)
    assert not ok
    _, ok = compute_return(np.ones(120), 0, horizon=59, session_id=session)
    assert ok


def test_compute_return_invalid_point():
    """an invalid point inside [t, t+h] invalidates the label"""
    valid = np.ones(100, bool)
    valid[30] = False
    assert not compute_return(np.ones(100), 0, 59, valid=valid)[1]
    assert compute_return(np.ones(100), 31, 59, valid=valid)[1]


def test_forward_returns_match_scalar():
    """vectorised forward returns agree with compute_return everywhere"""
    rng = np.random.default_rng(1)
    n = 400
    mid = 5000 + np.cumsum(rng.normal(size=n))
    session = np.repeat([0, 1], n // 2)
    valid = rng.random(n) > 0.01
    returns, ok = forward_returns(mid, session, valid, horizon=59)
    for t in range(n):
        r, expect_ok = compute_return(mid, t, 59, session, valid)
        assert ok[t] == expect_ok, f"validity differs at t={t}"
        if expect_ok:
            assert returns[t] == pytest.approx(r, rel=1e-12)


def test_label_partition():
    """every (R, fee) lands in exactly one class, boundaries go to 0"""
    fee = 1e-4
    assert label(2e-4, fee) == 1
    assert label(-2e-4, fee) == -1
    assert label(1e-4, fee) == 0
    assert label(-1e-4, fee) == 0
    assert label(0.0, fee) == 0
    assert label(0.0, 0.0) == 0
    assert label(1e-12, 0.0) == 1
    rng = np.random.default_rng(0)
    r = rng.normal(scale=3e-4, size=1000)
    np.testing.assert_array_equal(label_returns(r, fee), [label(x, fee) for x in r])


def test_negative_fee_rejected():
    """fees are non-negative"""
    with pytest.raises(ValueError):
        label(0.0, -1e-4)
    with pytest.raises(ValueError):
        label_returns([0.0], -1e-4)


def test_build_labeled_frame_warmup():
    """labels inside the warm-up window or without a full horizon are invalid"""
    ticks = forward_fill(assign_sessions(make_ticks(200)))
    frame = build_labeled_frame(ticks, fee=1e-4, horizon=59, warmup_len=59)
    assert not frame.loc[:58, "label_valid"].any()
    assert frame.loc[59:140, "label_valid"].all()
    assert not frame.loc[141:, "label_valid"].any()
    points = labeled_points(frame)
    assert len(points) == 200 and points[60].label in (-1, 0, 1)


def test_feature_file_reload(tmp_path):
    """feature files read back with identical values and flags"""
    ticks = forward_fill(assign_sessions(make_ticks(150, seed=4)))
    frame = build_labeled_frame(ticks, fee=1e-4)
    write_feature_file(frame, tmp_path / "ag.csv")
    back = read_feature_file(tmp_path / "ag.csv")
    np.testing.assert_array_equal(back[FEATURE_COLUMNS].to_numpy(), frame[FEATURE_COLUMNS].to_numpy())
    assert back["label_valid"].tolist() == frame["label_valid"].tolist()
    assert back["label"].tolist() == frame["label"].tolist()
    pd.testing.assert_series_equal(back["instrument"], frame["instrument"].astype(str),
                                   check_names=False)


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
