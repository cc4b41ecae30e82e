"""Candle ingestion, synthetic markets, feature engineering and dataset splits."""
import csv
import json
import logging
import math
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import kernels

logger = logging.getLogger(__name__)

CSV_COLUMNS = ("timestamp", "open", "high", "low", "close", "volume", "quote_volume")
REGIMES = ("iid", "trending", "mean_reverting", "volume_seasonal")
SEASONAL_MODES = ("intraday", "calendar")

# feature channel layout of SampleBatch.features
RETURN_CH = 0
VOLUME_CH = 1
HORIZON_FLAG_CH = -1

# Monday 2020-01-06 00:00 UTC, start of synthetic series
SYNTH_EPOCH = 1578268800


class CandleError(ValueError):
    pass


class CandleParseError(CandleError):
    def __init__(self, line, message):
        super().__init__(f"line {line}: {message}")
        self.line = line


class CandleGapError(CandleError):
    def __init__(self, spans):
        text = ", ".join(f"{a}..{b}" for a, b in spans)
        super().__init__(f"missing bars in timestamp spans: {text}")
        self.spans = spans


@dataclass
class CandleSeries:
    asset_id: str
    frequency_minutes: int
    timestamps: np.ndarray
    open: np.ndarray
    high: np.ndarray
    low: np.ndarray
    close: np.ndarray
    volume: np.ndarray
    quote_volume: np.ndarray

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.int64)
        for name in ("open", "high", "low", "close", "volume", "quote_volume"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        self.validate()

    def __len__(self):
        return len(self.timestamps)

    def validate(self):
        if self.frequency_minutes <= 0:
            raise CandleError("frequency_minutes must be positive")
        n = len(self.timestamps)
        for name in ("open", "high", "low", "close", "volume", "quote_volume"):
            if getattr(self, name).shape != (n,):
                raise CandleError(f"column {name} has wrong length")
        step = self.frequency_minutes * 60
        diffs = np.diff(self.timestamps)
        if np.any(diffs <= 0):
            raise CandleError("timestamps must be strictly increasing")
        if np.any(diffs != step):
            bad = np.flatnonzero(diffs != step)
            spans = [(int(self.timestamps[i] + step), int(self.timestamps[i + 1] - step)) for i in bad]
            raise CandleGapError(spans)
        prices = np.stack([self.open, self.high, self.low, self.close])
        if not np.all(prices > 0):
            raise CandleError("prices must be positive")
        if np.any(self.volume < 0) or np.any(self.quote_volume < 0):
            raise CandleError("volumes must be nonnegative")


@dataclass
class FeatureSpec:
    lookback_steps: int = 48
    horizon_steps: int = 12
    normalization_window: int = 336
    seasonal_mode: str = "intraday"
    frequency_tag: float = 1.0
    # returns enter the network in percent so they sit inside the spline grid
    return_scale: float = 100.0

    def __post_init__(self):
        if self.lookback_steps < 1:
            raise ValueError("lookback_steps must be positive")
        if self.horizon_steps < 2:
            raise ValueError("horizon_steps must be at least 2")
        if self.normalization_window < 1:
            raise ValueError("normalization_window must be >= 1")
        if self.seasonal_mode not in SEASONAL_MODES:
            raise ValueError(f"seasonal_mode must be one of {SEASONAL_MODES}")
        if not 0.0 <= self.frequency_tag <= 1.0:
            raise ValueError("frequency_tag must lie in [0, 1]")

    @property
    def total_steps(self):
        return self.lookback_steps + self.horizon_steps

    @property
    def num_features(self):
        # return, volume, two sin/cos pairs, frequency tag, horizon flag
        return 8


@dataclass
class SampleBatch:
    features: np.ndarray  # [B, L+N, D]
    target_prices: np.ndarray  # [B, N]
    target_volumes: np.ndarray  # [B, N]
    asset_ids: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=object))
    start_timestamps: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    frequency_tags: np.ndarray = field(default_factory=lambda: np.empty(0))

    def __len__(self):
        return self.features.shape[0]

    def validate(self):
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features contain non-finite values")
        if not np.all(self.target_prices > 0):
            raise ValueError("target prices must be strictly positive")
        if np.any(self.target_volumes < 0):
            raise ValueError("target volumes must be nonnegative")

    def subset(self, index):
        return SampleBatch(
            self.features[index],
            self.target_prices[index],
            self.target_volumes[index],
            self.asset_ids[index],
            self.start_timestamps[index],
            self.frequency_tags[index],
        )

    @staticmethod
    def concat(batches):
        batches = [b for b in batches if b is not None]
        if not batches:
            raise ValueError("nothing to concatenate")
        return SampleBatch(
            np.concatenate([b.features for b in batches]),
            np.concatenate([b.target_prices for b in batches]),
            np.concatenate([b.target_volumes for b in batches]),
            np.concatenate([b.asset_ids for b in batches]),
            np.concatenate([b.start_timestamps for b in batches]),
            np.concatenate([b.frequency_tags for b in batches]),
        )

    def save(self, path, prefix=""):
        return {
            f"{prefix}features": self.features,
            f"{prefix}target_prices": self.target_prices,
            f"{prefix}target_volumes": self.target_volumes,
            f"{prefix}asset_ids": self.asset_ids.astype(str),
            f"{prefix}start_timestamps": self.start_timestamps,
            f"{prefix}frequency_tags": self.frequency_tags,
        }

    @classmethod
    def from_arrays(cls, arrays, prefix=""):
        return cls(
            np.asarray(arrays[f"{prefix}features"]),
            np.asarray(arrays[f"{prefix}target_prices"]),
            np.asarray(arrays[f"{prefix}target_volumes"]),
            np.asarray(arrays[f"{prefix}asset_ids"]).astype(object),
            np.asarray(arrays[f"{prefix}start_timestamps"]),
            np.asarray(arrays[f"{prefix}frequency_tags"]),
        )


def empty_batch(spec):
    return SampleBatch(
        np.zeros((0, spec.total_steps, spec.num_features)),
        np.zeros((0, spec.horizon_steps)),
        np.zeros((0, spec.horizon_steps)),
        np.empty(0, dtype=object),
        np.empty(0, dtype=np.int64),
        np.empty(0),
    )


# ---------------------------------------------------------------------------
# ingestion
# ---------------------------------------------------------------------------

def load_candles(path, schema=None, asset_id=None, frequency_minutes=None):
    """Read a candle CSV.

    ``frequency_minutes`` defaults to the spacing of the first two rows. A missing
    ``quote_volume`` column is filled with ``volume * close``.
    """
    path = Path(path)
    asset_id = asset_id or path.stem
    rows = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise CandleParseError(1, "empty file") from None
        if header == list(CSV_COLUMNS):
            has_quote = True
        elif header == list(CSV_COLUMNS[:-1]):
            has_quote = False
        else:
            raise CandleParseError(1, f"unexpected header {','.join(header)}")
        width = len(header)
        last_ts = None
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != width:
                raise CandleParseError(lineno, f"expected {width} fields, got {len(row)}")
            try:
                ts = int(row[0])
                values = [float(v) for v in row[1:]]
            except ValueError as exc:
                raise CandleParseError(lineno, str(exc)) from None
            if not all(math.isfinite(v) for v in values):
                raise CandleParseError(lineno, "non-finite value")
            if last_ts is not None and ts <= last_ts:
                raise CandleParseError(lineno, f"timestamp {ts} does not increase")
            if min(values[:4]) <= 0:
                raise CandleParseError(lineno, "prices must be positive")
            if min(values[4:]) < 0:
                raise CandleParseError(lineno, "volumes must be nonnegative")
            last_ts = ts
            rows.append((ts, *values))
    if not rows:
        raise CandleParseError(2, "no data rows")
    arr = np.array([r[1:] for r in rows], dtype=np.float64)
    ts = np.array([r[0] for r in rows], dtype=np.int64)
    if frequency_minutes is None:
        if len(ts) < 2:
            raise CandleError("cannot infer frequency from a single row")
        frequency_minutes = int((ts[1] - ts[0]) // 60)
    quote = arr[:, 5] if has_quote else arr[:, 4] * arr[:, 3]
    return CandleSeries(asset_id, int(frequency_minutes), ts, arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3], arr[:, 4], quote)


def write_candles(series, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for i in range(len(series)):
            writer.writerow([
                int(series.timestamps[i]),
                repr(float(series.open[i])),
                repr(float(series.high[i])),
                repr(float(series.low[i])),
                repr(float(series.close[i])),
                repr(float(series.volume[i])),
                repr(float(series.quote_volume[i])),
            ])


def resample(series, factor):
    """Aggregate ``factor`` consecutive bars into one (drops a trailing partial bar)."""
    if factor == 1:
        return series
    n = (len(series) // factor) * factor
    if n == 0:
        raise CandleError("series shorter than one resampled bar")

    def blocks(a):
        return a[:n].reshape(-1, factor)

    return CandleSeries(
        series.asset_id,
        series.frequency_minutes * factor,
        blocks(series.timestamps)[:, 0],
        blocks(series.open)[:, 0],
        blocks(series.high).max(axis=1),
        blocks(series.low).min(axis=1),
        blocks(series.close)[:, -1],
        blocks(series.volume).sum(axis=1),
        blocks(series.quote_volume).sum(axis=1),
    )


# ---------------------------------------------------------------------------
# per-bar transforms
# ---------------------------------------------------------------------------

def bar_vwap(c):
    """quote_volume / volume per bar, carrying the previous value over empty bars."""
    return kernels.bar_vwap(c.volume, c.quote_volume, c.close)


def normalize_volumes(c, spec):
    """Volume divided by its trailing mean, shifted back by lookback + horizon.

    Returns ``(normalized, usable)``; positions without a full history or with a
    zero trailing mean are flagged unusable.
    """
    normalized, usable, _ = kernels.rolling_normalize(c.volume, spec.normalization_window, spec.total_steps)
    return normalized, usable


def seasonal_features(timestamps, mode):
    """Two cyclic components as ``[n, 4]`` (sin_a, cos_a, sin_b, cos_b)."""
    ts = np.asarray(timestamps, dtype=np.int64)
    days = ts // 86400
    # 1970-01-01 was a Thursday; shift so Monday == 0
    dow = ((days + 3) % 7).astype(np.float64)
    if mode == "intraday":
        hour = (ts % 86400) / 3600.0
        phase_a = 2 * np.pi * hour / 24.0
        phase_b = 2 * np.pi * dow / 7.0
    elif mode == "calendar":
        month = np.array([datetime.fromtimestamp(int(t), tz=timezone.utc).month for t in ts], dtype=np.float64)
        phase_a = 2 * np.pi * dow / 7.0
        phase_b = 2 * np.pi * (month - 1) / 12.0
    else:
        raise ValueError(f"unknown seasonal mode {mode!r}")
    return np.stack([np.sin(phase_a), np.cos(phase_a), np.sin(phase_b), np.cos(phase_b)], axis=1)


def build_features(c, spec, stride=1):
    """Window a candle series into a SampleBatch.

    Each window covers ``lookback + horizon`` consecutive usable bars. Horizon
    positions carry the realized return and volume of their own bar.
    """
    L, N, T = spec.lookback_steps, spec.horizon_steps, spec.total_steps
    vwap = bar_vwap(c)
    normalized, usable, means = kernels.rolling_normalize(c.volume, spec.normalization_window, T)
    n = len(c)
    # a window starting at p needs usable[p .. p+T-1]
    bad = np.concatenate([[0], np.cumsum(~usable)])
    starts = np.arange(0, n - T + 1) if n >= T else np.zeros(0, dtype=np.int64)
    ok = (bad[starts + T] - bad[starts]) == 0
    starts = starts[ok][::stride]
    if len(starts) == 0:
        logger.warning("%s: no usable windows", c.asset_id)
        return empty_batch(spec)

    idx = starts[:, None] + np.arange(T)[None, :]
    prices = vwap[idx]
    rets = np.zeros_like(prices)
    rets[:, 1:] = prices[:, 1:] / prices[:, :-1] - 1.0
    season = seasonal_features(c.timestamps, spec.seasonal_mode)[idx]
    B = len(starts)
    feats = np.empty((B, T, spec.num_features))
    feats[:, :, RETURN_CH] = rets * spec.return_scale
    feats[:, :, VOLUME_CH] = normalized[idx]
    feats[:, :, 2:6] = season
    feats[:, :, 6] = spec.frequency_tag
    feats[:, :, 7] = 0.0
    feats[:, L:, 7] = 1.0

    hz = idx[:, L:]
    # one scale per window keeps horizon VWAP weights exact
    target_volumes = c.volume[hz] / means[hz[:, :1]]
    batch = SampleBatch(
        feats,
        vwap[hz],
        target_volumes,
        np.full(B, c.asset_id, dtype=object),
        c.timestamps[starts],
        np.full(B, spec.frequency_tag),
    )
    batch.validate()
    return batch


def split_dataset(windows, val_date, test_date):
    """Partition windows by start timestamp: train < val_date <= val < test_date <= test."""
    val_ts, test_ts = _to_epoch(val_date), _to_epoch(test_date)
    if not val_ts < test_ts:
        raise ValueError("val_date must precede test_date")
    start = windows.start_timestamps
    order = np.argsort(start, kind="stable")
    s = start[order]
    train = order[s < val_ts]
    val = order[(s >= val_ts) & (s < test_ts)]
    test = order[s >= test_ts]
    parts = (windows.subset(train), windows.subset(val), windows.subset(test))
    warnings = [f"{name} split is empty" for name, p in zip(("train", "validation", "test"), parts) if len(p) == 0]
    for w in warnings:
        logger.warning(w)
    return parts, warnings


def _to_epoch(value):
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, float):
        return int(value)
    if isinstance(value, datetime):
        dt = value if value.tzinfo else value.replace(tzinfo=timezone.utc)
        return int(dt.timestamp())
    dt = datetime.fromisoformat(str(value))
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return int(dt.timestamp())


# ---------------------------------------------------------------------------
# synthetic markets
# ---------------------------------------------------------------------------

def synth_market(seed, n_bars, regime="iid", frequency_minutes=15, asset_id="SYN", start=SYNTH_EPOCH,
                 volatility=0.005, price0=100.0):
    """Seeded synthetic candles.

    Regimes: ``iid`` returns, ``trending`` (constant positive drift),
    ``mean_reverting`` (AR(1) returns with negative coefficient) and
    ``volume_seasonal`` (iid returns, U-shaped intraday volume). Log volume is a
    persistent AR(1) in every regime.
    """
    if regime not in REGIMES:
        raise ValueError(f"regime must be one of {REGIMES}")
    rng = np.random.default_rng(seed)
    shocks = rng.standard_normal(n_bars) * volatility
    if regime == "mean_reverting":
        rets = np.empty(n_bars)
        prev = 0.0
        for t in range(n_bars):
            prev = -0.4 * prev + shocks[t]
            rets[t] = prev
    elif regime == "trending":
        rets = shocks + 0.2 * volatility
    else:
        rets = shocks
    vwap = price0 * np.exp(np.cumsum(rets))

    log_vol = np.empty(n_bars)
    noise = rng.standard_normal(n_bars) * 0.3
    prev = 0.0
    for t in range(n_bars):
        prev = 0.7 * prev + noise[t]
        log_vol[t] = prev
    timestamps = start + np.arange(n_bars, dtype=np.int64) * frequency_minutes * 60
    volume = 1000.0 * np.exp(log_vol)
    if regime == "volume_seasonal":
        volume = volume * intraday_u_shape(timestamps)

    spread = np.abs(rng.standard_normal((n_bars, 3))) * volatility * 0.5
    close = vwap * np.exp(rng.standard_normal(n_bars) * volatility * 0.25)
    open_ = np.concatenate([[price0], close[:-1]])
    high = np.maximum.reduce([open_, close, vwap]) * np.exp(spread[:, 0])
    low = np.minimum.reduce([open_, close, vwap]) * np.exp(-spread[:, 1])
    return CandleSeries(asset_id, frequency_minutes, timestamps, open_, high, low, close, volume, volume * vwap)


def intraday_u_shape(timestamps):
    """Deterministic U-shaped volume multiplier over the UTC day (2.5 at the edges, 0.5 at midday)."""
    x = (np.asarray(timestamps) % 86400) / 86400.0
    return 0.5 + 8.0 * (x - 0.5) ** 2


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

@dataclass
class DatasetManifest:
    assets: list
    val_date: str
    test_date: str

    @classmethod
    def load(cls, path):
        path = Path(path)
        raw = json.loads(path.read_text())
        assets = []
        for entry in raw["assets"]:
            entry = dict(entry)
            entry["path"] = str((path.parent / entry["path"]).resolve()) if not Path(entry["path"]).is_absolute() else entry["path"]
            entry.setdefault("frequencies", [None])
            assets.append(entry)
        return cls(assets, raw["val_date"], raw["test_date"])

    def dump(self, path):
        Path(path).write_text(json.dumps({"assets": self.assets, "val_date": self.val_date, "test_date": self.test_date}, indent=2))


def prepare_dataset(manifest, spec, stride=1):
    """Build and split windows for every asset/frequency listed in a manifest.

    Windows from all frequencies are concatenated; the frequency tag is the bar
    length divided by the longest bar length in the manifest.
    """
    jobs = []
    for entry in manifest.assets:
        base = load_candles(entry["path"], asset_id=entry.get("asset_id"), frequency_minutes=entry.get("frequency_minutes"))
        for freq in entry["frequencies"]:
            freq = base.frequency_minutes if freq is None else int(freq)
            if freq % base.frequency_minutes:
                raise ValueError(f"{base.asset_id}: frequency {freq} is not a multiple of {base.frequency_minutes}")
            jobs.append((base, freq))
    max_freq = max(f for _, f in jobs)
    batches = []
    for base, freq in jobs:
        series = resample(base, freq // base.frequency_minutes)
        fspec = FeatureSpec(**{**spec.__dict__, "frequency_tag": freq / max_freq})
        batches.append(build_features(series, fspec, stride=stride))
    windows = SampleBatch.concat(batches)
    return split_dataset(windows, manifest.val_date, manifest.test_date)
