"""Hard-decision evaluation, slippage statistics and report files.

Slippage is ``(achieved / benchmark - 1) * 1e4`` bps for every side: negative is
good for buys, positive is good for sells.
"""
import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import kernels

STRATEGY_NAMES = ("VWAP-vol", "VWAP-notional", "TWAP-vol", "TWAP-notional")
SIDES = ("BUY", "SELL")
BASELINES = ("TWAP-baseline-notional", "TWAP-baseline-volume")
STAT_COLUMNS = ("count", "mean_bps", "std_bps", "median_bps", "p5_bps", "p95_bps", "q25_bps", "q75_bps")
KEY_COLUMNS = ("order_type", "strategy", "min_period")
DECILES = tuple(range(10, 100, 10))
HIST_RANGE = (-500, 500)


class ShapeMismatchError(ValueError):
    pass


def strategy_name(k, a):
    bench = "VWAP" if k in (0, 2) else "TWAP"
    return f"{bench}-{'vol' if a == 0 else 'notional'}"


def min_period_label(n, horizon):
    """``n`` is the 0-based min-period index; index ``horizon`` is the match scenario."""
    return "match" if n == horizon else str(n + 1)


def path_table(horizon):
    """Per flattened path: (min period used for stopping, allocation type, VWAP benchmark?)."""
    n, k, a = np.meshgrid(np.arange(horizon + 1), np.arange(4), np.arange(2), indexing="ij")
    n, k, a = n.ravel(), k.ravel(), a.ravel()
    return np.minimum(n + 1, horizon), a, (k == 0) | (k == 2)


@dataclass
class EvaluationResult:
    horizon: int
    slippage: np.ndarray  # [W, N+1, 4, 2] bps
    tau: np.ndarray  # [W, N+1, 4, 2]
    curves: np.ndarray  # [W, N, N+1, 4, 2]
    baseline_slippage: dict = field(default_factory=dict)  # (order_type, strategy) -> [W]

    def save(self, path):
        arrays = {"horizon": np.array(self.horizon), "slippage": self.slippage, "tau": self.tau, "curves": self.curves}
        for (order, strat), v in self.baseline_slippage.items():
            arrays[f"baseline::{order}::{strat}"] = v
        with Path(path).open("wb") as fh:
            np.savez(fh, **arrays)

    @classmethod
    def load(cls, path):
        with np.load(path) as data:
            base = {}
            for key in data.files:
                if key.startswith("baseline::"):
                    _, order, strat = key.split("::")
                    base[(order, strat)] = data[key]
            return cls(int(data["horizon"]), data["slippage"], data["tau"], data["curves"], base)


def execute_allocations(alloc, prices, volumes, eps_complete=1e-6):
    """Hard execution of every scenario path: returns (slippage bps, tau, curves)."""
    alloc = np.asarray(alloc, dtype=np.float64)
    W, N = alloc.shape[:2]
    flat = alloc.reshape(W, N, -1)
    min_period, alloc_type, vwap = path_table(N)
    tau, achieved, bench, curves = kernels.execute_paths(flat, prices, volumes, min_period, alloc_type, vwap, eps_complete)
    slip = (achieved / bench - 1.0) * 1e4
    shape = (W, N + 1, 4, 2)
    return slip.reshape(shape), tau.reshape(shape), curves.reshape((W, N) + shape[1:])


def twap_baselines(prices, volumes):
    """Uniform volume and uniform notional schedules over the full horizon.

    Returns ``{(order_type, strategy): slippage [W]}`` against the full-horizon
    VWAP and, for reference, the full-horizon TWAP.
    """
    prices = np.asarray(prices, dtype=np.float64)
    W, N = prices.shape
    alloc = np.full((W, N, 4), 1.0 / N)
    min_period = np.full(4, N)
    alloc_type = np.array([0, 1, 0, 1])
    vwap = np.array([True, True, False, False])
    _, achieved, bench, _ = kernels.execute_paths(alloc, prices, volumes, min_period, alloc_type, vwap)
    slip = (achieved / bench - 1.0) * 1e4
    return {
        ("TWAP-baseline-notional", "VWAP-notional"): slip[:, 1],
        ("TWAP-baseline-notional", "TWAP-notional"): slip[:, 3],
        ("TWAP-baseline-volume", "VWAP-vol"): slip[:, 0],
        ("TWAP-baseline-volume", "TWAP-vol"): slip[:, 2],
    }


def predict_allocations(model, features, batch_size=1024):
    dtype = next(model.parameters()).dtype
    model.eval()
    out = []
    with torch.no_grad():
        for start in range(0, len(features), batch_size):
            x = torch.as_tensor(features[start:start + batch_size], dtype=dtype)
            out.append(model(x).double().numpy())
    if not out:
        N = model.cfg.horizon
        return np.zeros((0, N, N + 1, 4, 2))
    return np.concatenate(out)


def check_compatible(model, dataset):
    cfg = model.cfg
    expected = (cfg.total_steps, cfg.num_features, cfg.horizon)
    got = (dataset.features.shape[1], dataset.features.shape[2], dataset.target_prices.shape[1])
    if expected != got:
        names = ("window length", "feature channels", "horizon")
        diff = "; ".join(f"{n}: checkpoint {e} vs data {g}" for n, e, g in zip(names, expected, got) if e != g)
        raise ShapeMismatchError(f"checkpoint/data shape mismatch ({diff})")


def evaluate(model, test_set, eps_complete=1e-6, batch_size=1024):
    """Run the model on a test set and score every scenario under hard completion."""
    if len(test_set) == 0:
        raise ValueError("test set is empty")
    check_compatible(model, test_set)
    alloc = predict_allocations(model, test_set.features, batch_size)
    return evaluate_allocations(alloc, test_set.target_prices, test_set.target_volumes, eps_complete)


def evaluate_allocations(alloc, prices, volumes, eps_complete=1e-6):
    slip, tau, curves = execute_allocations(alloc, prices, volumes, eps_complete)
    return EvaluationResult(alloc.shape[1], slip, tau, curves, twap_baselines(prices, volumes))


# ---------------------------------------------------------------------------
# statistics and reports
# ---------------------------------------------------------------------------

def slippage_stats(values):
    """Count, mean, sample std and linear-interpolation percentiles."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return None
    q = np.percentile(v, [50, 5, 95, 25, 75])
    std = float(np.std(v, ddof=1)) if v.size > 1 else 0.0
    return {
        "count": int(v.size),
        "mean_bps": float(np.mean(v)),
        "std_bps": std,
        "median_bps": float(q[0]),
        "p5_bps": float(q[1]),
        "p95_bps": float(q[2]),
        "q25_bps": float(q[3]),
        "q75_bps": float(q[4]),
    }


@dataclass
class SlippageReport:
    horizon: int
    rows: list = field(default_factory=list)  # dicts with KEY_COLUMNS + STAT_COLUMNS
    samples: dict = field(default_factory=dict)  # key tuple -> slippage values

    def get(self, order_type, strategy, min_period):
        for r in self.rows:
            if (r["order_type"], r["strategy"], r["min_period"]) == (order_type, strategy, str(min_period)):
                return r
        raise KeyError((order_type, strategy, min_period))


@dataclass
class ExecutionCurveSet:
    horizon: int
    rows: list = field(default_factory=list)


def scenario_keys(horizon):
    """Model scenarios in report order: side, strategy, min period."""
    keys = []
    for side_i, side in enumerate(SIDES):
        for j, (k_off, a) in enumerate(((0, 0), (0, 1), (1, 0), (1, 1))):
            k = 2 * side_i + k_off
            for n in range(horizon + 1):
                keys.append((side, strategy_name(k, a), min_period_label(n, horizon), n, k, a))
    return keys


def build_report(result):
    N = result.horizon
    report = SlippageReport(N)
    for (order, strat), values in result.baseline_slippage.items():
        _add_row(report, (order, strat, "all"), values)
    for side, strat, label, n, k, a in scenario_keys(N):
        _add_row(report, (side, strat, label), result.slippage[:, n, k, a])
    return report


def _add_row(report, key, values):
    stats = slippage_stats(values)
    if stats is None:
        return
    report.rows.append(dict(zip(KEY_COLUMNS, key), **stats))
    report.samples[key] = np.asarray(values, dtype=np.float64)


def build_curves(result):
    N = result.horizon
    curves = ExecutionCurveSet(N)
    if result.curves.shape[0] == 0:
        return curves
    for side, strat, label, n, k, a in scenario_keys(N):
        c = result.curves[:, :, n, k, a]
        mean = c.mean(axis=0)
        dec = np.percentile(c, DECILES, axis=0)
        for t in range(N):
            row = {"order_type": side, "strategy": strat, "min_period": label, "step": t + 1, "mean": mean[t]}
            row.update({f"d{d}": dec[i, t] for i, d in enumerate(DECILES)})
            curves.rows.append(row)
    return curves


def histogram(values, bin_width=1.0, value_range=HIST_RANGE):
    """Probability mass per bin; values outside the range are clipped into the edge bins."""
    lo, hi = value_range
    edges = np.arange(lo, hi + bin_width, bin_width, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    low, high = int((v < lo).sum()), int((v > hi).sum())
    counts, _ = np.histogram(np.clip(v, lo, hi), bins=edges)
    mass = counts / max(v.size, 1)
    return edges, mass, low, high


def fmt(x):
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, str):
        return x
    s = f"{float(x):.6f}"
    return "0.000000" if s == "-0.000000" else s


def _write(path, header, rows):
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for r in rows:
            writer.writerow([fmt(r[h]) for h in header])


def emit_reports(report, curves, out_dir):
    """Write the summary, detailed, curve and histogram CSVs; returns the paths written."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    N = report.horizon
    header = KEY_COLUMNS + STAT_COLUMNS
    written = []

    summary = [r for r in report.rows if r["strategy"] == "VWAP-vol" and r["order_type"] in SIDES]
    baselines = [r for r in report.rows if r["order_type"] in BASELINES and r["strategy"].startswith("VWAP")]
    path = out / "slippage_by_min_period.csv"
    _write(path, header, baselines + summary)
    written.append(path)

    for n in range(N + 1):
        label = min_period_label(n, N)
        rows = [r for r in report.rows if r["order_type"] in SIDES and r["min_period"] == label]
        path = out / f"slippage_detailed_min_{label}.csv"
        _write(path, header, rows)
        written.append(path)

    curve_header = ("order_type", "strategy", "min_period", "step", "mean") + tuple(f"d{d}" for d in DECILES)
    path = out / "execution_curves.csv"
    _write(path, curve_header, curves.rows)
    written.append(path)

    hist_header = KEY_COLUMNS + ("bin_low", "bin_high", "mass", "clipped_low", "clipped_high")
    hist_rows = []
    for r in report.rows:
        key = (r["order_type"], r["strategy"], r["min_period"])
        edges, mass, low, high = histogram(report.samples[key])
        for i in range(len(mass)):
            hist_rows.append(dict(zip(KEY_COLUMNS, key), bin_low=int(edges[i]), bin_high=int(edges[i + 1]),
                                  mass=mass[i], clipped_low=low, clipped_high=high))
    path = out / "slippage_histograms.csv"
    _write(path, hist_header, hist_rows)
    written.append(path)
    return written
