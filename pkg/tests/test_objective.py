import math

import numpy as np
import pytest
import torch

from lem.objective import (
    EPS,
    achieved_price_notional,
    achieved_price_volume,
    benchmark_prices,
    build_masks,
    execution_outcome,
    hard_execution,
    objective,
    performance_diff,
    total_loss,
    volume_guard,
)

import reference as ref
from conftest import random_allocations, random_market

D64 = torch.float64


def t(x):
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def single_path_alloc(path, horizon=None):
    """[1, N, N+1, 4, 2] tensor with the same schedule on every scenario path."""
    N = len(path)
    a = torch.zeros(1, N, N + 1, 4, 2, dtype=D64)
    a[0] = t(path)[:, None, None, None]
    return a


def test_mask_all_in_first_step():
    N = 5
    masks = build_masks(single_path_alloc([1.0] + [0.0] * (N - 1)), torch.ones(1, N, dtype=D64))
    eff = masks.effective[0, :, :, 0, 0]
    for n in range(N):
        for s in range(N):
            assert eff[s, n].item() == (1.0 if s <= n else 0.5)
    assert (masks.effective[0, :, N] == 1).all()


def test_mask_uniform():
    for N in (2, 6, 12):
        masks = build_masks(single_path_alloc([1.0 / N] * N), torch.ones(1, N, dtype=D64))
        eff = masks.effective[0, :, :, 0, 0]
        for n in range(N):
            for s in range(n + 1, N):
                assert abs(eff[s, n].item() - ref.sigmoid(100 * (N - s) / N)) < 1e-15
                assert eff[s, n].item() > 0.9997


def test_volume_guard():
    assert volume_guard(torch.zeros(1, 4, dtype=D64)).tolist() == [[1, 0, 0, 0]]
    assert volume_guard(t([[0.0, 0.0, 2.0, 0.0]])).tolist() == [[1, 0, 0, 1]]


def test_achieved_prices_simple():
    prices = t([[100.0, 101.0, 99.0, 102.0]])
    eff = torch.ones(1, 4, 5, 4, dtype=D64)
    spike = torch.zeros(1, 4, 5, 4, dtype=D64)
    spike[:, 2] = 1.0
    assert torch.allclose(achieved_price_volume(spike, prices, eff), t(99.0), rtol=1e-7)
    const = torch.full((1, 4), 42.0, dtype=D64)
    uniform = torch.full((1, 4, 5, 4), 0.25, dtype=D64)
    expected = 42.0 * 1.0 / (1.0 + EPS)
    assert torch.allclose(achieved_price_volume(uniform, const, eff), t(expected), rtol=0, atol=1e-12)
    # the epsilon sits next to sum(notional / price) ~ 1 / 42
    expected = 1.0 / (1.0 / 42.0 + EPS)
    assert torch.allclose(achieved_price_notional(uniform, const, eff), t(expected), rtol=1e-13)
    assert torch.allclose(achieved_price_notional(uniform, const, eff), t(42.0), rtol=1e-5)


def test_notional_harmonic_mean():
    alloc = torch.full((1, 2, 3, 4), 0.5, dtype=D64)
    got = achieved_price_notional(alloc, t([[100.0, 200.0]]), torch.ones_like(alloc))
    assert torch.allclose(got, t(1.0 / (0.5 / 100 + 0.5 / 200 + EPS)), rtol=1e-13)
    assert abs(got[0, 0, 0].item() - 400 / 3) < 1e-3


def test_benchmark_hand_values():
    vols, prices = t([[2.0, 1.0]]), t([[100.0, 101.0]])
    eff = torch.ones(1, 2, 3, 4, dtype=D64)
    guard = volume_guard(vols)[:, :, None, None].expand(1, 2, 3, 4)
    b = benchmark_prices(vols, prices, eff, guard)
    assert abs(b[0, 0, 0].item() - 301 / 3) < 1e-6
    assert abs(b[0, 0, 1].item() - 100.5) < 1e-6
    const = torch.full((1, 2), 7.0, dtype=D64)
    b = benchmark_prices(vols, const, eff, guard)
    assert torch.allclose(b, t(7.0), rtol=1e-6)


def test_performance_diff():
    b = t([1.5, 200.0])
    assert torch.equal(performance_diff(b, b), torch.zeros(2, dtype=D64))
    assert torch.allclose(performance_diff(1.01 * b, b), t(1.0), rtol=1e-12)


def test_diff_price_scale_invariance(rng):
    ach = t(rng.uniform(90, 110, (2, 2, 5, 4)))
    bench = t(rng.uniform(90, 110, (2, 2, 5, 4)))
    for c in (1e-3, 0.37, 37.0, 1e4):
        assert (performance_diff(ach, bench) - performance_diff(c * ach, c * bench)).abs().max().item() < 1e-9


def test_volume_paths_scale_invariant(rng):
    # volume-type paths carry epsilon only next to sum(alloc) ~ 1, so rescaling prices is harmless
    alloc = t(random_allocations(rng, 2, 5, sparsity=0.0))
    prices, vols = random_market(rng, 2, 5)
    a = execution_outcome(alloc, t(prices / prices[:, :1]), t(vols)).diff[:, 0]
    b = execution_outcome(alloc, t(prices / prices[:, :1] * 37.0), t(vols)).diff[:, 0]
    assert (a - b).abs().max().item() < 1e-6


def test_loss_zero_diff():
    d = torch.zeros(3, 2, 5, 4, dtype=D64)
    assert abs(total_loss(d).total.item() - math.log(2)) < 1e-15


def test_loss_oracle_random_diff(rng):
    d = rng.normal(0, 2, (1, 2, 4, 4))
    got = total_loss(t(d))
    pnl = sum(ref.softplus(d[0, a, n, k] - d[0, a, n, k + 2]) for a in range(2) for n in range(3) for k in range(2))
    risk = sum(ref.softplus(abs(d[0, a, 3, k])) for a in range(2) for k in range(4))
    assert abs(got.pnl_term.item() - pnl) < 1e-12
    assert abs(got.risk_term.item() - risk) < 1e-12
    assert abs(got.total.item() - (pnl + risk) / (1 * 2 * 3 * 2 + 1 * 2 * 4)) < 1e-12


def test_buy_decrease_lowers_pnl(rng):
    d = t(rng.normal(0, 1, (2, 2, 4, 4)))
    base = total_loss(d).pnl_term.item()
    d2 = d.clone()
    d2[1, 0, 2, 1] -= 0.5
    assert total_loss(d2).pnl_term.item() < base


def test_objective_matches_oracle(rng):
    for _ in range(5):
        alloc = random_allocations(rng, 2, 4)
        prices, vols = random_market(rng, 2, 4)
        vols[0, 1] = 0.0
        out = execution_outcome(t(alloc), t(prices), t(vols))
        ach, bench, diff, loss = ref.objective_terms(alloc.tolist(), prices.tolist(), vols.tolist())
        for (b, a, n, k), v in ach.items():
            assert abs(out.achieved_price[b, a, n, k].item() - v) < 1e-10
            assert abs(out.benchmark_price[b, a, n, k].item() - bench[b, a, n, k]) < 1e-10
            assert abs(out.diff[b, a, n, k].item() - diff[b, a, n, k]) < 1e-10
        assert abs(objective(t(alloc), t(prices), t(vols)).total.item() - loss) < 1e-10


def test_hard_execution_examples():
    assert hard_execution([1, 0, 0, 0], 1)[0] == 1
    for n in (1, 3, 5):
        assert hard_execution([0.2] * 5, n)[0] == 5
    tau, sched = hard_execution([0.5, 0.5, 0, 0], 3)
    assert tau == 3
    tau, sched = hard_execution([0.6, 0.4, 0.0, 0.0], 1)
    assert tau == 2 and sched.tolist() == [0.6, 0.4, 0.0, 0.0]
    tau, sched = hard_execution([0.5, 0.5 - 1e-7, 1e-7, 0.0], 1)
    assert tau == 2 and sched.tolist() == [0.5, 0.5 - 1e-7, 0.0, 0.0]


def test_objective_is_differentiable(rng):
    alloc = t(random_allocations(rng, 2, 4, sparsity=0.0)).requires_grad_(True)
    prices, vols = random_market(rng, 2, 4)
    objective(alloc, t(prices), t(vols)).total.backward()
    assert torch.isfinite(alloc.grad).all()
    assert alloc.grad.abs().sum() > 0


@pytest.mark.parametrize("sign", [1, -1])
def test_loss_direction_prices(rng, sign):
    """Buy-lower / sell-higher achieved prices never increase the loss."""
    d = t(rng.normal(0, 1, (2, 2, 5, 4)))
    moved = d.clone()
    if sign > 0:
        moved[..., :4, :2] -= 0.3  # buys cheaper
    else:
        moved[..., :4, 2:] += 0.3  # sells dearer
    assert total_loss(moved).total.item() < total_loss(d).total.item()
