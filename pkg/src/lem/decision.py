"""Step-wise allocation networks and budget-conserving constraints.

Paths are the flattened scenario grid (min period, strategy, allocation type):
path index ``m = (n * 4 + k) * 2 + a`` with ``n`` in ``0..N`` (``N`` is the match
scenario), ``k`` in Buy-VWAP, Buy-TWAP, Sell-VWAP, Sell-TWAP and ``a`` in
volume, notional.
"""
import math
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn.functional as F
from torch import nn

STRATEGIES = ("BUY_VWAP", "BUY_TWAP", "SELL_VWAP", "SELL_TWAP")
ALLOCATION_TYPES = ("volume", "notional")

ACTIVATIONS = {"elu": F.elu, "relu": F.relu, "tanh": torch.tanh, "silu": F.silu}


@dataclass
class DecisionConfig:
    horizon: int = 12
    mlp_depth: int = 2
    mlp_width: int = 16
    clip_sharpness: float = 50.0
    min_rate: Optional[float] = None  # defaults to 1 / horizon**2
    max_rate: float = 1.0
    activation: str = "elu"

    def __post_init__(self):
        if self.horizon < 2:
            raise ValueError("horizon must be at least 2")
        if self.min_rate is None:
            self.min_rate = 1.0 / self.horizon ** 2
        if self.min_rate <= 0 or self.min_rate * self.horizon > 1 + 1e-12:
            raise ValueError("min_rate must be positive with min_rate * horizon <= 1")
        if not 0 < self.max_rate <= 1:
            raise ValueError("max_rate must lie in (0, 1]")
        if self.min_rate >= self.max_rate:
            raise ValueError("min_rate must be below max_rate")
        if self.mlp_depth < 1:
            raise ValueError("mlp_depth must be positive")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {sorted(ACTIVATIONS)}")

    @property
    def num_paths(self):
        return (self.horizon + 1) * 4 * 2


def path_index(n, k, a):
    return (n * 4 + k) * 2 + a


def soft_clip(x, u, sharpness):
    """x * s + u * (1 - s) with s = sigmoid(sharpness * (u - x))."""
    s = torch.sigmoid(sharpness * (u - x))
    return x * s + u * (1 - s)


def constrain_step(raw, remaining, cfg, return_binding=False):
    """Soft-clip ``raw + min_rate`` under ``max_rate``, then hard-cap by the remaining budget.

    With ``return_binding`` also returns where the budget cap is active.
    """
    temp = soft_clip(raw + cfg.min_rate, cfg.max_rate, cfg.clip_sharpness)
    alpha = torch.clamp(torch.minimum(temp, remaining), min=0.0)
    if return_binding:
        return alpha, temp >= remaining
    return alpha


class FusedStepMLP(nn.Module):
    """Independent small MLPs for every (step, path): one batched einsum per layer."""

    def __init__(self, steps, paths, in_features, cfg):
        super().__init__()
        self.steps = steps
        self.activation = ACTIVATIONS[cfg.activation]
        widths = [in_features] + [cfg.mlp_width] * (cfg.mlp_depth - 1) + [1]
        self.weights = nn.ParameterList()
        self.biases = nn.ParameterList()
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            bound = 1.0 / math.sqrt(fan_in)
            self.weights.append(nn.Parameter(torch.empty(steps, paths, fan_in, fan_out).uniform_(-bound, bound)))
            self.biases.append(nn.Parameter(torch.zeros(steps, paths, fan_out)))
        # start near a uniform schedule: softplus(b) + min_rate = 1 / horizon
        target = max(1.0 / cfg.horizon - cfg.min_rate, 1e-3)
        with torch.no_grad():
            self.biases[-1].fill_(math.log(math.expm1(target)))

    def forward(self, inputs, step):
        """``inputs`` [B, M, F] for 1-based ``step`` -> nonnegative raw rates [B, M]."""
        if not 1 <= step <= self.steps:
            raise IndexError(f"step {step} outside 1..{self.steps}")
        x = inputs
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            x = torch.einsum("bmf,mfh->bmh", x, w[step - 1]) + b[step - 1]
            x = F.softplus(x) if i == last else self.activation(x)
        return x.squeeze(-1)


class AllocationBlock(nn.Module):
    def __init__(self, context_size, num_features, cfg, return_channel=0, volume_channel=1):
        super().__init__()
        self.cfg = cfg
        self.return_channel = return_channel
        self.volume_channel = volume_channel
        N = cfg.horizon
        self.step_features = context_size + num_features + (N - 1) + 3
        self.mlp = FusedStepMLP(N - 1, cfg.num_paths, self.step_features, cfg)

    def step_inputs(self, context_s, features_s, history, remaining):
        B, M = remaining.shape
        shared = torch.cat([context_s, features_s], dim=-1).unsqueeze(1).expand(B, M, -1)
        market = features_s[:, [self.return_channel, self.volume_channel]].unsqueeze(1).expand(B, M, 2)
        return torch.cat([shared, history, remaining.unsqueeze(-1), market], dim=-1)

    def forward(self, context, features):
        """Context and features over the horizon ([B, N, H], [B, N, D]) -> [B, N, N+1, 4, 2]."""
        cfg = self.cfg
        N, M = cfg.horizon, cfg.num_paths
        B = context.shape[0]
        remaining = context.new_ones(B, M)
        allocs = []
        binding = []
        for s in range(1, N):
            history = torch.stack(allocs, dim=-1) if allocs else context.new_zeros(B, M, 0)
            history = F.pad(history, (0, N - 1 - history.shape[-1]))
            x = self.step_inputs(context[:, s - 1], features[:, s - 1], history, remaining)
            alpha, bound = constrain_step(self.mlp(x, s), remaining, cfg, return_binding=True)
            allocs.append(alpha)
            binding.append(bound)
            remaining = remaining - alpha
        allocs.append(remaining)
        # which hard-clip branch each step took; read by the gradient checker
        self.last_binding = torch.stack(binding, dim=1).detach()
        out = torch.stack(allocs, dim=1)  # [B, N, M]
        return out.view(B, N, N + 1, 4, 2)
