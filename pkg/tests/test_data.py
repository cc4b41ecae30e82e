import math
from datetime import datetime, timezone

import numpy as np
import pytest

from lem import kernels
from lem.data import (
    CandleParseError,
    CandleSeries,
    DatasetManifest,
    FeatureSpec,
    SampleBatch,
    bar_vwap,
    build_features,
    load_candles,
    normalize_volumes,
    prepare_dataset,
    resample,
    seasonal_features,
    split_dataset,
    synth_market,
    write_candles,
)

HEADER = "timestamp,open,high,low,close,volume,quote_volume\n"


def series_from(volume, quote=None, close=None, freq=15, start=0):
    n = len(volume)
    volume = np.asarray(volume, dtype=float)
    close = np.full(n, 100.0) if close is None else np.asarray(close, dtype=float)
    quote = volume * close if quote is None else np.asarray(quote, dtype=float)
    ts = start + np.arange(n) * freq * 60
    return CandleSeries("T", freq, ts, close, close * 1.01, close * 0.99, close, volume, quote)


def test_load_three_rows(tmp_path):
    p = tmp_path / "a.csv"
    p.write_text(HEADER + "0,1,2,0.5,1.5,10,15\n900,1.5,2,1,1.2,5,6\n1800,1.2,1.3,1.1,1.25,0,0\n")
    c = load_candles(p)
    assert len(c) == 3
    assert c.frequency_minutes == 15
    assert c.asset_id == "a"
    np.testing.assert_array_equal(c.volume, [10, 5, 0])


def test_duplicate_timestamp_reports_line(tmp_path):
    p = tmp_path / "a.csv"
    p.write_text(HEADER + "0,1,1,1,1,1,1\n900,1,1,1,1,1,1\n900,1,1,1,1,1,1\n")
    with pytest.raises(CandleParseError) as err:
        load_candles(p)
    assert err.value.line == 4


@pytest.mark.parametrize("body, line", [
    ("0,1,1,1,1,1\n", 2),
    ("0,1,1,1,x,1,1\n", 2),
    ("0,1,1,1,1,1,1\n900,1,1,1,-1,1,1\n", 3),
    ("0,1,1,1,1,-2,1\n", 2),
])
def test_malformed_rows(tmp_path, body, line):
    p = tmp_path / "a.csv"
    p.write_text(HEADER + body)
    with pytest.raises(CandleParseError) as err:
        load_candles(p)
    assert err.value.line == line


def test_bad_header(tmp_path):
    p = tmp_path / "a.csv"
    p.write_text("time,open,high,low,close,volume\n0,1,1,1,1,1\n")
    with pytest.raises(CandleParseError):
        load_candles(p)


def test_uneven_spacing_rejected(tmp_path):
    p = tmp_path / "a.csv"
    p.write_text(HEADER + "0,1,1,1,1,1,1\n900,1,1,1,1,1,1\n2700,1,1,1,1,1,1\n")
    with pytest.raises(ValueError):
        load_candles(p)


def test_quote_volume_proxy(tmp_path):
    rows = [(0, 10.0, 3.0), (900, 11.0, 0.0), (1800, 12.5, 7.25), (2700, 9.0, 1.5), (3600, 10.5, 2.0)]
    p = tmp_path / "eq.csv"
    p.write_text("timestamp,open,high,low,close,volume\n" + "".join(f"{t},{c},{c},{c},{c},{v}\n" for t, c, v in rows))
    c = load_candles(p)
    for i, (_, close, vol) in enumerate(rows):
        assert c.quote_volume[i] == close * vol


def test_write_load_round_trip(tmp_path):
    s = synth_market(3, 50)
    write_candles(s, tmp_path / "s.csv")
    back = load_candles(tmp_path / "s.csv", asset_id=s.asset_id)
    for name in ("timestamps", "open", "high", "low", "close", "volume", "quote_volume"):
        np.testing.assert_array_equal(getattr(back, name), getattr(s, name))


def test_bar_vwap_definition_and_carry():
    c = series_from([2.0, 0.0, 0.0], quote=[200.0, 0.0, 0.0])
    np.testing.assert_array_equal(bar_vwap(c), [100.0, 100.0, 100.0])


def test_bar_vwap_matches_loop():
    vol = [0.0, 3.0, 0.0, 1.5, 0.0, 2.0]
    quote = [0.0, 303.0, 0.0, 150.75, 0.0, 204.0]
    close = [99.0, 101.0, 100.0, 100.5, 101.0, 102.0]
    expected = []
    for t in range(6):
        if vol[t] > 0:
            expected.append(quote[t] / vol[t])
        elif t == 0:
            expected.append(close[0])
        else:
            expected.append(expected[-1])
    np.testing.assert_allclose(bar_vwap(series_from(vol, quote, close)), expected, rtol=0, atol=1e-14)


def test_normalization_constant_and_scale():
    spec = FeatureSpec(lookback_steps=4, horizon_steps=2, normalization_window=10)
    c = series_from(np.full(40, 7.0))
    norm, usable = normalize_volumes(c, spec)
    assert usable.sum() == 40 - (10 + 6 - 1)
    np.testing.assert_array_equal(norm[usable], 1.0)

    rng = np.random.default_rng(0)
    v = rng.exponential(1.0, 60)
    a, _ = normalize_volumes(series_from(v), spec)
    b, _ = normalize_volumes(series_from(v * 37.5), spec)
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=0)


def test_normalization_matches_loop():
    spec = FeatureSpec(lookback_steps=48, horizon_steps=12)
    rng = np.random.default_rng(1)
    v = rng.exponential(1.0, 400)
    norm, usable = normalize_volumes(series_from(v), spec)
    W, shift = 336, 60
    for t in range(400):
        if t - shift - W + 1 < 0:
            assert not usable[t]
            continue
        mean = sum(v[t - shift - W + 1: t - shift + 1]) / W
        assert abs(norm[t] - v[t] / mean) < 1e-12


def test_normalization_shift_safety():
    spec = FeatureSpec(lookback_steps=3, horizon_steps=2, normalization_window=8)
    rng = np.random.default_rng(2)
    v = rng.exponential(1.0, 60)
    base, _ = normalize_volumes(series_from(v), spec)
    t = 40
    bumped = v.copy()
    bumped[t - 5 + 1:] *= 3.0  # positions after t - (L + N)
    again, _ = normalize_volumes(series_from(bumped), spec)
    assert again[t] / bumped[t] == base[t] / v[t]


def test_zero_trailing_volume_is_unusable():
    spec = FeatureSpec(lookback_steps=2, horizon_steps=2, normalization_window=3)
    v = np.ones(30)
    v[5:12] = 0.0
    norm, usable = normalize_volumes(series_from(v), spec)
    assert not usable[5 + 2 + 4: 12 + 4].any()
    assert np.isfinite(norm).all()


def test_seasonal_monday_midnight():
    ts = int(datetime(2024, 1, 1, tzinfo=timezone.utc).timestamp())  # a Monday
    s = seasonal_features([ts], "intraday")[0]
    assert abs(s[0]) < 1e-15 and s[1] == 1.0
    assert abs(s[2]) < 1e-15 and s[3] == 1.0


def test_seasonal_unit_circle():
    ts = np.arange(0, 86400 * 400, 3600 * 7)
    for mode in ("intraday", "calendar"):
        s = seasonal_features(ts, mode)
        np.testing.assert_allclose(s[:, 0] ** 2 + s[:, 1] ** 2, 1.0, atol=1e-12)
        np.testing.assert_allclose(s[:, 2] ** 2 + s[:, 3] ** 2, 1.0, atol=1e-12)


def test_windows_shape_and_flag():
    spec = FeatureSpec(lookback_steps=4, horizon_steps=2, normalization_window=20)
    c = synth_market(0, 400)
    b = build_features(c, spec)
    _, usable = normalize_volumes(c, spec)
    assert b.features.shape == (int(usable.sum()) - 5, 6, 8)
    np.testing.assert_array_equal(b.features[:, :4, 7], 0.0)
    np.testing.assert_array_equal(b.features[:, 4:, 7], 1.0)
    assert b.target_prices.shape == (len(b), 2)


def test_features_match_straight_line_reference():
    spec = FeatureSpec(lookback_steps=3, horizon_steps=2, normalization_window=5, frequency_tag=0.5)
    c = synth_market(5, 60, regime="volume_seasonal")
    b = build_features(c, spec, stride=3)
    T, W = 5, 5
    n = len(c)
    vwap = []
    for t in range(n):
        vwap.append(c.quote_volume[t] / c.volume[t] if c.volume[t] > 0 else (vwap[-1] if t else c.close[0]))
    first = T + W - 1
    starts = list(range(first, n - T + 1))[::3]
    assert len(b) == len(starts)
    for i, s in enumerate(starts):
        for j in range(T):
            t = s + j
            mean = sum(c.volume[t - T - W + 1: t - T + 1]) / W
            ret = 0.0 if j == 0 else (vwap[t] / vwap[t - 1] - 1) * 100
            hour = (c.timestamps[t] % 86400) / 3600
            dow = ((c.timestamps[t] // 86400) + 3) % 7
            row = [ret, c.volume[t] / mean, math.sin(2 * math.pi * hour / 24), math.cos(2 * math.pi * hour / 24),
                   math.sin(2 * math.pi * dow / 7), math.cos(2 * math.pi * dow / 7), 0.5, float(j >= 3)]
            np.testing.assert_allclose(b.features[i, j], row, rtol=1e-12, atol=1e-12)
        scale = sum(c.volume[s + 3 - T - W + 1: s + 3 - T + 1]) / W
        np.testing.assert_allclose(b.target_prices[i], vwap[s + 3: s + 5], rtol=1e-15)
        np.testing.assert_allclose(b.target_volumes[i], c.volume[s + 3: s + 5] / scale, rtol=1e-12)


def test_split_boundaries():
    spec = FeatureSpec(lookback_steps=2, horizon_steps=2, normalization_window=2)
    c = synth_market(0, 20, frequency_minutes=60, start=0)
    w = build_features(c, spec)
    starts = w.start_timestamps
    assert len(starts) == 20 - (4 + 2 - 1) - (4 - 1)
    (tr, va, te), warn = split_dataset(w, int(starts[-1]) + 1, int(starts[-1]) + 2)
    assert (len(tr), len(va), len(te)) == (len(starts), 0, 0)
    assert len(warn) == 2

    val_date, test_date = int(starts[3]), int(starts[7])
    (tr, va, te), _ = split_dataset(w, val_date, test_date)
    hand_train = [s for s in starts if s < val_date]
    hand_val = [s for s in starts if val_date <= s < test_date]
    hand_test = [s for s in starts if s >= test_date]
    assert list(tr.start_timestamps) == hand_train
    assert list(va.start_timestamps) == hand_val
    assert list(te.start_timestamps) == hand_test
    assert te.start_timestamps[0] == test_date


def test_split_iso_dates():
    spec = FeatureSpec(lookback_steps=2, horizon_steps=2, normalization_window=2)
    w = build_features(synth_market(0, 200, frequency_minutes=60), spec)
    (tr, va, te), _ = split_dataset(w, "2020-01-09", "2020-01-12T00:00:00")
    assert len(tr) + len(va) + len(te) == len(w)
    assert te.start_timestamps.min() >= int(datetime(2020, 1, 12, tzinfo=timezone.utc).timestamp())


def test_synth_determinism_and_regimes():
    a, b = synth_market(11, 300, "trending"), synth_market(11, 300, "trending")
    np.testing.assert_array_equal(a.quote_volume, b.quote_volume)
    with pytest.raises(ValueError):
        synth_market(0, 10, "sideways")

    c = synth_market(0, 10000, "mean_reverting")
    r = np.diff(np.log(bar_vwap(c)))
    r = r - r.mean()
    assert (r[1:] * r[:-1]).sum() / (r * r).sum() < 0

    s = synth_market(0, 96 * 200, "volume_seasonal")
    hour = (s.timestamps % 86400) / 3600
    edges = s.volume[(hour < 1) | (hour >= 23)].mean()
    midday = s.volume[(hour >= 11) & (hour < 13)].mean()
    assert edges > midday


def test_resample_aggregates():
    c = synth_market(0, 10)
    r = resample(c, 4)
    assert len(r) == 2 and r.frequency_minutes == 60
    assert r.volume[0] == c.volume[:4].sum()
    assert r.high[1] == c.high[4:8].max()
    assert r.close[1] == c.close[7]


def test_manifest_multi_frequency(tmp_path):
    write_candles(synth_market(0, 800, asset_id="A"), tmp_path / "a.csv")
    m = DatasetManifest([{"path": "a.csv", "asset_id": "A", "frequencies": [15, 30]}], "2020-01-10", "2020-01-12")
    m.dump(tmp_path / "m.json")
    loaded = DatasetManifest.load(tmp_path / "m.json")
    spec = FeatureSpec(lookback_steps=4, horizon_steps=2, normalization_window=10)
    (tr, va, te), _ = prepare_dataset(loaded, spec, stride=1)
    tags = np.concatenate([tr.frequency_tags, va.frequency_tags, te.frequency_tags])
    assert set(np.unique(tags)) == {0.5, 1.0}


def test_sample_batch_save_round_trip():
    spec = FeatureSpec(lookback_steps=2, horizon_steps=2, normalization_window=3)
    b = build_features(synth_market(0, 40), spec)
    back = SampleBatch.from_arrays(b.save(None, prefix="x_"), prefix="x_")
    np.testing.assert_array_equal(back.features, b.features)
    assert list(back.asset_ids) == list(b.asset_ids)


@pytest.mark.parametrize("numba", ["1", "0"])
def test_kernel_paths_agree(monkeypatch, numba):
    rng = np.random.default_rng(3)
    v = rng.exponential(1.0, 300)
    v[rng.random(300) < 0.1] = 0.0
    q = v * rng.uniform(90, 110, 300)
    close = rng.uniform(90, 110, 300)
    monkeypatch.setenv("LEM_NUMBA", numba)
    got_vwap = kernels.bar_vwap(v, q, close)
    got_norm = kernels.rolling_normalize(v, 20, 7)
    monkeypatch.setenv("LEM_NUMBA", "0" if numba == "1" else "1")
    np.testing.assert_allclose(got_vwap, kernels.bar_vwap(v, q, close), rtol=1e-15)
    for x, y in zip(got_norm, kernels.rolling_normalize(v, 20, 7)):
        np.testing.assert_allclose(x, y, rtol=1e-12)


def test_rolling_normalize_long_series_paths_agree(monkeypatch):
    rng = np.random.default_rng(9)
    v = rng.exponential(1.0, 6000)
    v[1000:1400] = 0.0
    v[2500] = 1e5
    monkeypatch.setenv("LEM_NUMBA", "1")
    fast = kernels.rolling_normalize(v, 96, 6)
    monkeypatch.setenv("LEM_NUMBA", "0")
    slow = kernels.rolling_normalize(v, 96, 6)
    np.testing.assert_array_equal(fast[1], slow[1])
    np.testing.assert_allclose(fast[2], slow[2], rtol=1e-9, atol=0)
    np.testing.assert_allclose(fast[0], slow[0], rtol=1e-9, atol=0)
    assert not fast[1][1000 + 96 + 6:1400 + 6].any()
