"""Causal market-context encoder.

Wiring: per-feature embedding -> variable selection -> temporal KAN recurrence
-> causal multi-head attention with a gated residual output.
"""
import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn


@dataclass
class EncoderConfig:
    hidden_size: int = 32
    num_heads: int = 4
    tkan_sublayers: int = 2
    spline_grid_size: int = 5
    spline_order: int = 3
    dropout_rate: float = 0.0
    # gate activation of the TKAN candidate memory; "tanh" gives the LSTM-style zero fixed point
    candidate_activation: str = "sigmoid"

    def __post_init__(self):
        if self.hidden_size % self.num_heads:
            raise ValueError("hidden_size must be divisible by num_heads")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if self.candidate_activation not in ("sigmoid", "tanh"):
            raise ValueError("candidate_activation must be 'sigmoid' or 'tanh'")


class FeatureEmbedding(nn.Module):
    """One affine map R -> R^H per input channel: [B, T, D] -> [B, T, H, D]."""

    def __init__(self, num_features, hidden_size):
        super().__init__()
        self.num_features = num_features
        self.weight = nn.Parameter(torch.empty(num_features, hidden_size))
        self.bias = nn.Parameter(torch.zeros(num_features, hidden_size))
        nn.init.normal_(self.weight, std=1.0)

    def forward(self, x):
        if x.shape[-1] != self.num_features:
            raise ValueError(f"expected {self.num_features} feature channels, got {x.shape[-1]}")
        out = x.unsqueeze(-1) * self.weight + self.bias  # [B, T, D, H]
        return out.transpose(-1, -2)


class GatedLinearUnit(nn.Module):
    def __init__(self, size):
        super().__init__()
        self.gate = nn.Linear(size, size)
        self.value = nn.Linear(size, size)

    def forward(self, x):
        return torch.sigmoid(self.gate(x)) * self.value(x)


class GatedResidualNetwork(nn.Module):
    """LayerNorm(skip(x) + GLU(W1 ELU(W2 x + b2) + b1)), no context input.

    ``skip`` is the identity when input and output widths match, otherwise a
    linear projection.
    """

    def __init__(self, input_size, hidden_size, output_size=None, dropout=0.0):
        super().__init__()
        output_size = output_size or hidden_size
        self.fc2 = nn.Linear(input_size, hidden_size)
        self.fc1 = nn.Linear(hidden_size, output_size)
        self.dropout = nn.Dropout(dropout)
        self.glu = GatedLinearUnit(output_size)
        self.norm = nn.LayerNorm(output_size)
        self.skip = nn.Linear(input_size, output_size) if input_size != output_size else None

    def forward(self, x):
        residual = x if self.skip is None else self.skip(x)
        eta = self.fc1(F.elu(self.fc2(x)))
        return self.norm(residual + self.glu(self.dropout(eta)))


class VariableSelection(nn.Module):
    """Softmax-weighted mix of per-variable GRNs; returns ``(mixed, weights)``."""

    def __init__(self, num_features, hidden_size, dropout=0.0):
        super().__init__()
        self.num_features = num_features
        self.selector = GatedResidualNetwork(hidden_size * num_features, hidden_size, num_features, dropout)
        self.variable_grns = nn.ModuleList(
            [GatedResidualNetwork(hidden_size, hidden_size, dropout=dropout) for _ in range(num_features)]
        )

    def forward(self, embedded):
        # embedded [B, T, H, D]
        B, T, H, D = embedded.shape
        flat = embedded.transpose(-1, -2).reshape(B, T, D * H)
        weights = torch.softmax(self.selector(flat), dim=-1)  # [B, T, D]
        processed = torch.stack([grn(embedded[..., j]) for j, grn in enumerate(self.variable_grns)], dim=-1)
        mixed = (processed * weights.unsqueeze(-2)).sum(dim=-1)
        return mixed, weights


def bspline_basis(x, knots, order, with_lower=False):
    """Cox-de Boor B-spline bases of degree ``order`` on ``knots``: [..., len(knots) - order - 1].

    With ``with_lower`` also returns the degree ``order - 1`` bases from the same pass.
    """
    x = x.unsqueeze(-1)
    bases = ((x >= knots[:-1]) & (x < knots[1:])).to(x.dtype)
    lower = bases
    for k in range(1, order + 1):
        lower = bases
        left = (x - knots[: -(k + 1)]) / (knots[k:-1] - knots[: -(k + 1)]) * bases[..., :-1]
        right = (knots[k + 1:] - x) / (knots[k + 1:] - knots[1:-k]) * bases[..., 1:]
        bases = left + right
    if with_lower:
        return bases, lower
    return bases


class KANLayer(nn.Module):
    """Sum over inputs of learnable univariate functions.

    phi_io(s) = base_weight[i, o] * SiLU(s) + sum_j coef[i, o, j] * B_j(s), with a
    uniform spline grid on [grid_min, grid_max] and linear extrapolation outside.
    """

    def __init__(self, in_features, out_features, grid_size=5, order=3, grid_range=(-3.0, 3.0)):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        self.order = order
        self.grid_range = grid_range
        lo, hi = grid_range
        h = (hi - lo) / grid_size
        knots = lo + h * torch.arange(-order, grid_size + order + 1, dtype=torch.float64)
        self.register_buffer("knots", knots)
        self.base_weight = nn.Parameter(torch.empty(in_features, out_features))
        self.spline_coef = nn.Parameter(torch.empty(in_features, out_features, grid_size + order))
        bound = 1.0 / math.sqrt(in_features)
        nn.init.uniform_(self.base_weight, -bound, bound)
        nn.init.normal_(self.spline_coef, std=0.1 * bound)

    def basis(self, s):
        lo, hi = self.grid_range
        knots = self.knots.to(s.dtype)
        inside = s.clamp(lo, hi)
        bases, lower = bspline_basis(inside, knots, self.order, with_lower=True)
        # d/ds B_{j,k} = k / (t_{j+k} - t_j) B_{j,k-1} - k / (t_{j+k+1} - t_{j+1}) B_{j+1,k-1}
        k = self.order
        slope = k * (lower[..., :-1] / (knots[k:-1] - knots[: -(k + 1)]) - lower[..., 1:] / (knots[k + 1:] - knots[1:-k]))
        return bases + (s - inside).unsqueeze(-1) * slope

    def forward(self, s):
        base = F.silu(s) @ self.base_weight
        spline = torch.einsum("...ij,ioj->...o", self.basis(s), self.spline_coef)
        return base + spline


class TKAN(nn.Module):
    """Recurrent block with KAN sub-layers feeding the output gate of an LSTM-style cell."""

    def __init__(self, input_size, hidden_size, sublayers=2, grid_size=5, order=3, candidate_activation="sigmoid"):
        super().__init__()
        self.hidden_size = hidden_size
        self.sublayers = sublayers
        self.sub_input = nn.ModuleList([nn.Linear(input_size, hidden_size, bias=False) for _ in range(sublayers)])
        self.sub_state = nn.ModuleList([nn.Linear(hidden_size, hidden_size, bias=False) for _ in range(sublayers)])
        self.kans = nn.ModuleList([KANLayer(hidden_size, hidden_size, grid_size, order) for _ in range(sublayers)])
        # diagonal memory mixes for the sub-layer states
        self.w_hh = nn.Parameter(torch.full((sublayers, hidden_size), 0.5))
        self.w_hz = nn.Parameter(torch.full((sublayers, hidden_size), 0.5))
        self.output_gate = nn.Linear(sublayers * hidden_size, hidden_size)
        # forget, input and candidate gates stacked: W x + U h + b
        self.gates_x = nn.Linear(input_size, 3 * hidden_size)
        self.gates_h = nn.Linear(hidden_size, 3 * hidden_size, bias=False)
        self.candidate = torch.tanh if candidate_activation == "tanh" else torch.sigmoid

    def cell(self, x_t, state):
        h, c, sub = state
        outs = []
        new_sub = []
        for l in range(self.sublayers):
            s = self.sub_input[l](x_t) + self.sub_state[l](sub[l])
            o = self.kans[l](s)
            new_sub.append(self.w_hh[l] * sub[l] + self.w_hz[l] * o)
            outs.append(o)
        r = torch.cat(outs, dim=-1)
        o_t = torch.sigmoid(self.output_gate(r))
        f_pre, i_pre, c_pre = (self.gates_x(x_t) + self.gates_h(h)).chunk(3, dim=-1)
        c = torch.sigmoid(f_pre) * c + torch.sigmoid(i_pre) * self.candidate(c_pre)
        h = o_t * torch.tanh(c)
        return h, (h, c, new_sub)

    def initial_state(self, batch_size, like):
        zeros = like.new_zeros(batch_size, self.hidden_size)
        return zeros, zeros, [zeros] * self.sublayers

    def forward(self, x):
        state = self.initial_state(x.shape[0], x)
        outputs = []
        for t in range(x.shape[1]):
            h, state = self.cell(x[:, t], state)
            outputs.append(h)
        return torch.stack(outputs, dim=1)


class CausalSelfAttention(nn.Module):
    """Masked multi-head attention followed by a residual add and a GRN gate."""

    def __init__(self, hidden_size, num_heads, dropout=0.0):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = hidden_size // num_heads
        self.query = nn.Linear(hidden_size, hidden_size, bias=False)
        self.key = nn.Linear(hidden_size, hidden_size, bias=False)
        self.value = nn.Linear(hidden_size, hidden_size, bias=False)
        self.mix = nn.Linear(hidden_size, hidden_size, bias=False)
        self.gate = GatedResidualNetwork(hidden_size, hidden_size, dropout=dropout)

    def attention(self, h):
        """Raw multi-head output and the attention weights [B, heads, T, T]."""
        B, T, H = h.shape

        def heads(x):
            return x.view(B, T, self.num_heads, self.head_dim).transpose(1, 2)

        q, k, v = heads(self.query(h)), heads(self.key(h)), heads(self.value(h))
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        future = torch.ones(T, T, dtype=torch.bool, device=h.device).triu(1)
        weights = torch.softmax(scores.masked_fill(future, float("-inf")), dim=-1)
        out = (weights @ v).transpose(1, 2).reshape(B, T, H)
        return self.mix(out), weights

    def forward(self, h):
        out, _ = self.attention(h)
        return self.gate(h + out)


class ContextEncoder(nn.Module):
    def __init__(self, num_features, cfg=None):
        super().__init__()
        cfg = cfg or EncoderConfig()
        self.cfg = cfg
        H = cfg.hidden_size
        self.embedding = FeatureEmbedding(num_features, H)
        self.vsn = VariableSelection(num_features, H, cfg.dropout_rate)
        self.tkan = TKAN(H, H, cfg.tkan_sublayers, cfg.spline_grid_size, cfg.spline_order, cfg.candidate_activation)
        self.attention = CausalSelfAttention(H, cfg.num_heads, cfg.dropout_rate)

    def forward(self, x, return_weights=False):
        mixed, weights = self.vsn(self.embedding(x))
        context = self.attention(self.tkan(mixed))
        if return_weights:
            return context, weights
        return context
