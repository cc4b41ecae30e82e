"""Benchmark-beating objective over the full scenario grid.

Tensor layout follows the allocation block: allocations are ``[B, N, N+1, 4, 2]``
(batch, step, min period, strategy, allocation type). Strategy index 0/1 are
Buy-VWAP/Buy-TWAP, 2/3 the matching sells.
"""
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

EPS = 1e-8
VWAP_STRATEGIES = (True, False, True, False)


@dataclass
class MaskSet:
    base: torch.Tensor  # [N, N+1]
    volume_guard: torch.Tensor  # [B, N, N+1, 4]
    effective: torch.Tensor  # [B, N, N+1, 4, 2]
    completion_sharpness: float


@dataclass
class ExecutionOutcome:
    achieved_price: torch.Tensor  # [B, 2, N+1, 4]
    benchmark_price: torch.Tensor
    diff: torch.Tensor


@dataclass
class LossBreakdown:
    pnl_term: torch.Tensor
    risk_term: torch.Tensor
    total: torch.Tensor
    diff: torch.Tensor

    def summary(self):
        d = self.diff.detach()
        return {
            "pnl_term": float(self.pnl_term),
            "risk_term": float(self.risk_term),
            "total": float(self.total),
            "mean_diff_by_strategy": d.mean(dim=(0, 1, 2)).tolist(),
        }


def base_mask(horizon, dtype=torch.float64, device=None):
    """1 where step t (1-based) is forced by min period n: t <= n, plus an all-ones last column."""
    t = torch.arange(1, horizon + 1, device=device)[:, None]
    n = torch.arange(1, horizon + 2, device=device)[None, :]
    mask = (t <= n).to(dtype)
    mask[:, horizon] = 1.0
    return mask


def volume_guard(market_volumes):
    """[B, N]: 1 at the first step and wherever earlier steps traded some volume."""
    prior = torch.cumsum(market_volumes, dim=1) - market_volumes
    guard = (prior > 0).to(market_volumes.dtype)
    guard[:, 0] = 1.0
    return guard


def build_masks(alloc, market_volumes, completion_sharpness=100.0):
    B, N = alloc.shape[:2]
    base = base_mask(N, alloc.dtype, alloc.device)
    remaining = torch.flip(torch.cumsum(torch.flip(alloc, [1]), dim=1), [1])
    soft = torch.sigmoid(completion_sharpness * remaining)
    b = base[None, :, :, None, None]
    effective = b + (1 - b) * soft
    guard = volume_guard(market_volumes)[:, :, None, None].expand(B, N, N + 1, 4)
    return MaskSet(base, guard, effective, completion_sharpness)


def achieved_price_volume(alloc_vol, prices, eff_mask):
    """Volume-denominated paths: executed-volume-weighted price, [B, N+1, 4]."""
    p = prices[:, :, None, None]
    v_exec = alloc_vol * eff_mask
    return (v_exec * p).sum(dim=1) / (v_exec.sum(dim=1) + EPS)


def achieved_price_notional(alloc_notional, prices, eff_mask):
    """Notional-denominated paths: spent notional over acquired volume, [B, N+1, 4]."""
    p = prices[:, :, None, None]
    n_exec = alloc_notional * eff_mask
    return n_exec.sum(dim=1) / ((n_exec / p).sum(dim=1) + EPS)


def benchmark_prices(market_volumes, market_prices, eff_mask, guard, vwap_kinds=VWAP_STRATEGIES):
    """VWAP (volume weights) or TWAP (uniform weights) over the effective period, [B, N+1, 4]."""
    kinds = torch.tensor(vwap_kinds, device=eff_mask.device)
    v = market_volumes[:, :, None, None]
    p = market_prices[:, :, None, None]
    vwap_w = v * torch.maximum(eff_mask, guard)
    weights = torch.where(kinds, vwap_w, eff_mask)
    return ((weights * p).sum(dim=1) + EPS) / (weights.sum(dim=1) + EPS)


def performance_diff(achieved, benchmark):
    return (achieved / benchmark - 1.0) * 100.0


def execution_outcome(alloc, prices, volumes, completion_sharpness=100.0):
    masks = build_masks(alloc, volumes, completion_sharpness)
    eff = masks.effective
    ach_v = achieved_price_volume(alloc[..., 0], prices, eff[..., 0])
    ach_n = achieved_price_notional(alloc[..., 1], prices, eff[..., 1])
    bench_v = benchmark_prices(volumes, prices, eff[..., 0], masks.volume_guard)
    bench_n = benchmark_prices(volumes, prices, eff[..., 1], masks.volume_guard)
    achieved = torch.stack([ach_v, ach_n], dim=1)
    benchmark = torch.stack([bench_v, bench_n], dim=1)
    return ExecutionOutcome(achieved, benchmark, performance_diff(achieved, benchmark))


def total_loss(diff):
    """Softplus PnL over flexible min periods plus softplus risk at the match index.

    ``diff`` is [B, 2, N+1, 4]. Buy performance below sell performance lowers the
    loss; the match scenario is pulled toward zero difference.
    """
    B, A, P, _ = diff.shape
    N = P - 1
    flexible = diff[:, :, :N]
    pnl = F.softplus(flexible[..., :2] - flexible[..., 2:]).sum()
    risk = F.softplus(diff[:, :, N].abs()).sum()
    normalizer = B * A * N * 2 + B * A * 4
    return LossBreakdown(pnl, risk, (pnl + risk) / normalizer, diff)


def objective(alloc, prices, volumes, completion_sharpness=100.0):
    outcome = execution_outcome(alloc, prices, volumes, completion_sharpness)
    return total_loss(outcome.diff)


def hard_execution(alloc, min_period, eps_complete=1e-6):
    """Stop step and truncated schedule for one path under hard completion.

    ``tau`` is the first step >= ``min_period`` at which the cumulative allocation
    reaches ``1 - eps_complete`` (the horizon if never). Steps after ``tau`` are
    zeroed in the returned schedule.
    """
    alloc = np.asarray(alloc, dtype=np.float64)
    N = len(alloc)
    cum = np.cumsum(alloc)
    steps = np.arange(1, N + 1)
    hits = np.flatnonzero((steps >= min_period) & (cum >= 1.0 - eps_complete))
    tau = int(hits[0] + 1) if len(hits) else N
    schedule = np.where(steps <= tau, alloc, 0.0)
    return tau, schedule
