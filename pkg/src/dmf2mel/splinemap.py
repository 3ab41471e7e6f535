"""Spline (KAN) layers, external attention, the gated AGKAN blend, and
spline-projected attention used to fuse the two feature branches."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .esm import ConfigError
from .numerics import softmax

SCHEDULES = ("alternate", "always_H", "always_D")


@dataclass
class SplineConfig:
    grid_size: int = 8
    order: int = 3
    grid_range: float = 3.0


@dataclass
class AgkanConfig:
    d_model: int = 64
    rank: int = 32
    gate_hidden: int = 16
    n_fusion_layers: int = 6
    schedule: str = "alternate"
    spline: SplineConfig | None = None

    def validate(self) -> None:
        if self.rank < 1:
            raise ConfigError("rank must be >= 1")
        if self.n_fusion_layers < 1:
            raise ConfigError("n_fusion_layers must be >= 1")
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"schedule must be one of {SCHEDULES}")


def make_knots(grid_size: int, order: int, grid_range: float, dtype=torch.float64) -> torch.Tensor:
    """Uniform knots on [-range, range], extended by ``order`` knots per side."""
    h = 2 * grid_range / grid_size
    return torch.arange(-order, grid_size + order + 1, dtype=dtype) * h - grid_range


def bspline_basis(x: torch.Tensor, knots: torch.Tensor, order: int) -> torch.Tensor:
    """Cox-de Boor recursion. Returns (..., len(knots) - order - 1) basis values."""
    x = x.unsqueeze(-1)
    t = knots.to(x.dtype)
    b = ((x >= t[:-1]) & (x < t[1:])).to(x.dtype)
    for k in range(1, order + 1):
        left = (x - t[: -k - 1]) / (t[k:-1] - t[: -k - 1])
        right = (t[k + 1 :] - x) / (t[k + 1 :] - t[1:-k])
        b = left * b[..., :-1] + right * b[..., 1:]
    return b


# rows: coefficients of 1, f, f^2, f^3 for the four cubic pieces active on [t_j, t_j+1)
_CUBIC = torch.tensor([[1, 4, 1, 0], [-3, 0, 3, 0], [3, -6, 3, 0], [-1, 3, -3, 1]], dtype=torch.float64) / 6
_CUBIC_D = torch.tensor([[-3, 0, 3, 0], [6, -12, 6, 0], [-3, 9, -9, 3]], dtype=torch.float64) / 6


class _UniformCubicBasis(torch.autograd.Function):
    """Cubic B-spline basis on uniform knots: only the four bases that are
    non-zero at x are evaluated, then scattered into place."""

    @staticmethod
    def forward(ctx, x, t0: float, h: float, n_basis: int):
        u = (x - t0) / h
        j = torch.floor(u).clamp(3, n_basis)
        f = u - j
        f2 = f * f
        w = torch.stack([torch.ones_like(f), f, f2, f2 * f], dim=-1) @ _CUBIC.to(x.dtype)
        idx = (j.long() - 3).unsqueeze(-1) + torch.arange(4, device=x.device)
        out = x.new_zeros(*x.shape, n_basis + 1).scatter_(-1, idx, w)
        ctx.save_for_backward(f, idx)
        ctx.h = h
        return out[..., :n_basis]

    @staticmethod
    def backward(ctx, grad):
        f, idx = ctx.saved_tensors
        dw = torch.stack([torch.ones_like(f), f, f * f], dim=-1) @ (_CUBIC_D.to(f.dtype) / ctx.h)
        grad = torch.nn.functional.pad(grad, (0, 1))
        return (grad.gather(-1, idx) * dw).sum(-1), None, None, None


def uniform_cubic_basis(x: torch.Tensor, knots: torch.Tensor) -> torch.Tensor:
    """Same values as ``bspline_basis(x, knots, 3)`` for uniform knots and
    x inside [knots[3], knots[-4]]."""
    h = float(knots[1] - knots[0])
    return _UniformCubicBasis.apply(x, float(knots[0]), h, len(knots) - 4)


def silu(x):
    return x * torch.sigmoid(x)


class KANLayer(nn.Module):
    """y_j = sum_i c_ji * silu(x_i) + sum_i sum_g theta_jig * B_g(clamp(x_i))."""

    def __init__(self, d_in: int, d_out: int, spline: SplineConfig | None = None):
        super().__init__()
        spline = spline or SplineConfig()
        self.order = spline.order
        self.grid_range = spline.grid_range
        self.register_buffer("knots", make_knots(spline.grid_size, spline.order, spline.grid_range), persistent=False)
        n_basis = spline.grid_size + spline.order
        self.base = nn.Parameter(torch.empty(d_out, d_in))
        self.theta = nn.Parameter(torch.randn(d_out, d_in, n_basis) * (0.1 / math.sqrt(d_in)))
        nn.init.kaiming_uniform_(self.base, a=math.sqrt(5))

    def basis(self, x):
        x = x.clamp(-self.grid_range, self.grid_range)
        if self.order == 3:
            return uniform_cubic_basis(x, self.knots)
        return bspline_basis(x, self.knots, self.order)

    def forward(self, x):
        base = silu(x) @ self.base.t()
        bas = self.basis(x)
        spl = bas.reshape(*bas.shape[:-2], -1) @ self.theta.reshape(self.theta.shape[0], -1).t()
        return base + spl


class ExternalAttention(nn.Module):
    """A = softmax_r(x M_k^T); out = A M_v with learned memories of r rows."""

    def __init__(self, d: int, rank: int):
        super().__init__()
        self.m_k = nn.Parameter(torch.randn(rank, d) / math.sqrt(d))
        self.m_v = nn.Parameter(torch.randn(rank, d) / math.sqrt(rank))

    def forward(self, x):
        a = softmax(x @ self.m_k.t(), dim=-1)
        a = a / a.sum(dim=-1, keepdim=True)
        return a @ self.m_v


class AGKAN(nn.Module):
    """out = g * KAN(x) + (1 - g) * ExternalAttention(x), g = sigmoid(MLP(mean_t x))."""

    def __init__(self, d: int, rank: int = 32, gate_hidden: int = 16, spline: SplineConfig | None = None):
        super().__init__()
        self.kan = KANLayer(d, d, spline)
        self.ea = ExternalAttention(d, rank)
        self.gate = nn.Sequential(nn.Linear(d, gate_hidden), nn.GELU(), nn.Linear(gate_hidden, 1))

    def gate_value(self, x):
        return torch.sigmoid(self.gate(x.mean(dim=1)))[:, :, None]

    def forward(self, x):
        g = self.gate_value(x)
        return g * self.kan(x) + (1 - g) * self.ea(x)


class SplineMapAttention(nn.Module):
    """Attention with KAN projections and an AGKAN output layer, residual on the query."""

    def __init__(self, d: int, rank: int = 32, gate_hidden: int = 16, spline: SplineConfig | None = None):
        super().__init__()
        self.norm_q = nn.LayerNorm(d)
        self.norm_k = nn.LayerNorm(d)
        self.norm_v = nn.LayerNorm(d)
        self.kan_q = KANLayer(d, d, spline)
        self.kan_k = KANLayer(d, d, spline)
        self.kan_v = KANLayer(d, d, spline)
        self.out = AGKAN(d, rank, gate_hidden, spline)

    def scores(self, q_in, k_in):
        Q = self.kan_q(self.norm_q(q_in))
        K = self.kan_k(self.norm_k(k_in))
        return softmax(Q @ K.transpose(1, 2) / math.sqrt(Q.shape[-1]), dim=-1)

    def forward(self, q_in, k_in, v_in):
        V = self.kan_v(self.norm_v(v_in))
        return self.out(self.scores(q_in, k_in) @ V) + q_in


def kv_source(step: int, schedule: str) -> str:
    """Which branch feeds keys/values at 1-based fusion ``step``."""
    if step == 1 or schedule == "always_H":
        return "H"
    if schedule == "always_D":
        return "D"
    return "H" if step % 2 == 1 else "D"


class ProgressiveFusion(nn.Module):
    """F_1 = SMA(D1, H1, H1); F_i = SMA(F_{i-1}, S_i, S_i) with S_i per schedule."""

    def __init__(self, cfg: AgkanConfig):
        super().__init__()
        cfg.validate()
        self.schedule = cfg.schedule
        self.layers = nn.ModuleList(
            SplineMapAttention(cfg.d_model, cfg.rank, cfg.gate_hidden, cfg.spline) for _ in range(cfg.n_fusion_layers)
        )

    def forward(self, d1, h1):
        f = d1
        for i, layer in enumerate(self.layers, start=1):
            src = h1 if kv_source(i, self.schedule) == "H" else d1
            f = layer(f, src, src)
        return f


class ConcatFusion(nn.Module):
    """Fallback fusion: channel concatenation and a linear projection."""

    def __init__(self, d: int):
        super().__init__()
        self.proj = nn.Linear(2 * d, d)

    def forward(self, d1, h1):
        return self.proj(torch.cat([d1, h1], dim=-1))
