import numpy as np
import pytest
import torch

from lem.decision import DecisionConfig
from lem.encoder import EncoderConfig
from lem.model import LargeExecutionModel, ModelConfig

torch.set_num_threads(1)


def tiny_model(horizon=4, lookback=3, num_features=3, hidden=4, heads=2, seed=0, dtype=torch.float64, **encoder_kw):
    torch.manual_seed(seed)
    cfg = ModelConfig(lookback, num_features, EncoderConfig(hidden_size=hidden, num_heads=heads, **encoder_kw),
                      DecisionConfig(horizon=horizon))
    return LargeExecutionModel(cfg).to(dtype)


def random_market(rng, batch, horizon, vol=0.02):
    prices = 100.0 * np.exp(np.cumsum(rng.normal(0, vol, (batch, horizon)), axis=1))
    volumes = rng.uniform(0.2, 2.0, (batch, horizon))
    return prices, volumes


def random_allocations(rng, batch, horizon, sparsity=0.3):
    """Random simplex allocations [B, N, N+1, 4, 2] with some exact zeros."""
    raw = rng.exponential(1.0, (batch, horizon, horizon + 1, 4, 2))
    raw *= rng.random(raw.shape) > sparsity
    raw[:, -1] += 1e-3
    return raw / raw.sum(axis=1, keepdims=True)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one PASS/FAIL line per acceptance criterion in the terminal summary

def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, name): acceptance criterion")
    config.stash[CRITERIA] = {}


CRITERIA = pytest.StashKey()


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    results = item.config.stash[CRITERIA]
    number, name = mark.args
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    if rep.failed or rep.when == "call" or rep.skipped:
        status = "PASS" if rep.passed else ("SKIP" if rep.skipped else "FAIL")
        if results.get(number, ("", "PASS"))[1] == "PASS":
            results[number] = (name, status, detail)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(CRITERIA, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        name, status, detail = results[number]
        line = f"[{status}] criterion {number:2d}: {name}"
        terminalreporter.write_line(line + (f" ({detail})" if detail else ""))
