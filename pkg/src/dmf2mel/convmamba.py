"""Bidirectional diagonal state-space scans and the convMamba block.

Each of the d channels runs an independent N-state linear system
h_t = A h_{t-1} + B x_t, y_t = C h_t with A = exp(-softplus(a_raw)) in (0, 1).
The scan is evaluated chunk-wise: inside a chunk the system is a short
causal convolution, and only the chunk-boundary state is carried
sequentially, so cost is O(T * chunk * d) and memory O(B * d * N) per carry.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn
import torch.nn.functional as F

from .esm import ConfigError

# keeps exp(-softplus) strictly inside (0, 1) once a_raw saturates
_DECAY_MIN, _DECAY_MAX = 1e-6, 700.0


@dataclass
class ConvMambaConfig:
    d_model: int = 64
    d_state: int = 16
    n_blocks: int = 2
    conv_kernel: int = 3
    d_ff: int | None = None
    tie_directions: bool = True
    selective: bool = False
    chunk: int = 64

    def validate(self) -> None:
        if self.n_blocks < 1:
            raise ConfigError("n_blocks must be >= 1")
        if self.selective:
            raise ConfigError("selective scans are not implemented")


class SSMParams(nn.Module):
    def __init__(self, d: int, n: int, generator: torch.Generator | None = None):
        super().__init__()
        target = torch.empty(d, n).uniform_(0.5, 0.98, generator=generator)
        # inverse of a -> exp(-softplus(a)) so the initial decay equals target
        self.a_raw = nn.Parameter(torch.log(torch.expm1(-torch.log(target))))
        self.b = nn.Parameter(torch.randn(d, n, generator=generator) / n**0.5)
        self.c = nn.Parameter(torch.randn(d, n, generator=generator) / n**0.5)

    def log_a(self) -> torch.Tensor:
        return -F.softplus(self.a_raw).clamp(_DECAY_MIN, _DECAY_MAX)

    def transition(self) -> torch.Tensor:
        return torch.exp(self.log_a())


def naive_scan(x, a, b, c):
    """Reference recurrence. x (B,T,d); a, b, c (d,N)."""
    B, T, d = x.shape
    h = x.new_zeros(B, d, a.shape[1])
    ys = []
    for t in range(T):
        h = a * h + b * x[:, t, :, None]
        ys.append((h * c).sum(-1))
    return torch.stack(ys, dim=1)


def chunked_scan(x, log_a, b, c, chunk: int = 64):
    """Forward scan h_t = A h_{t-1} + B x_t, y_t = C h_t with h_0 = 0."""
    B, T, d = x.shape
    L = min(chunk, T)
    pad = (-T) % L
    if pad:
        x = F.pad(x, (0, 0, 0, pad))
    n_chunks = x.shape[1] // L
    xc = x.view(B, n_chunks, L, d)
    tau = torch.arange(L, dtype=x.dtype, device=x.device)

    # intra-chunk causal kernel K[d, tau] = sum_n c b a^tau
    powers = torch.exp(log_a[:, :, None] * tau)  # (d, N, L)
    kernel = torch.einsum("dn,dnl->dl", b * c, powers)
    lag = tau[:, None] - tau[None, :]
    idx = lag.clamp(min=0).long()
    toeplitz = kernel[:, idx] * (lag >= 0).to(x.dtype)  # (d, L, L)
    y = torch.einsum("dts,bksd->bktd", toeplitz, xc)

    if n_chunks > 1:
        # state left at the end of each chunk by its own inputs
        tail = b[:, :, None] * torch.flip(powers, dims=[-1])  # b * a^(L-1-s)
        local_state = torch.einsum("dns,bksd->bkdn", tail, xc)
        a_chunk = torch.exp(log_a * L)
        carried = [x.new_zeros(B, d, log_a.shape[1])]
        for k in range(n_chunks - 1):
            carried.append(a_chunk * carried[-1] + local_state[:, k])
        h_prev = torch.stack(carried, dim=1)  # state entering chunk k
        lead = c[:, :, None] * powers * torch.exp(log_a)[:, :, None]  # c * a^(t+1)
        y = y + torch.einsum("dnt,bkdn->bktd", lead, h_prev)
    return y.reshape(B, n_chunks * L, d)[:, :T]


def ssm_scan_forward(x, params: SSMParams, chunk: int = 64):
    return chunked_scan(x, params.log_a(), params.b, params.c, chunk)


def ssm_scan_backward(x, params: SSMParams, chunk: int = 64):
    """g_t = A g_{t+1} + B x_t, y_t = C g_t with g_{T+1} = 0."""
    return torch.flip(ssm_scan_forward(torch.flip(x, dims=[1]), params, chunk), dims=[1])


class BiMamba(nn.Module):
    def __init__(self, d: int, n: int, tie_directions: bool = True, chunk: int = 64):
        super().__init__()
        self.chunk = chunk
        self.fwd = SSMParams(d, n)
        self.bwd = None if tie_directions else SSMParams(d, n)
        self.proj = nn.Linear(2 * d, d, bias=False)

    def both_directions(self, x):
        bwd = self.bwd if self.bwd is not None else self.fwd
        return torch.cat([ssm_scan_forward(x, self.fwd, self.chunk), ssm_scan_backward(x, bwd, self.chunk)], dim=-1)

    def forward(self, x):
        return self.proj(self.both_directions(x))


def ffn(d: int, d_ff: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(d, d_ff), nn.GELU(), nn.Linear(d_ff, d))


class ConvMambaBlock(nn.Module):
    """conv -> +FFN -> +BiMamba -> +FFN, each residual branch pre-normalised."""

    def __init__(self, cfg: ConvMambaConfig):
        super().__init__()
        cfg.validate()
        d = cfg.d_model
        d_ff = cfg.d_ff or 4 * d
        self.conv = nn.Conv1d(d, d, cfg.conv_kernel, padding=cfg.conv_kernel // 2)
        self.norm1 = nn.LayerNorm(d)
        self.ff1 = ffn(d, d_ff)
        self.norm2 = nn.LayerNorm(d)
        self.bimamba = BiMamba(d, cfg.d_state, cfg.tie_directions, cfg.chunk)
        self.norm3 = nn.LayerNorm(d)
        self.ff2 = ffn(d, d_ff)

    def forward(self, x):
        x = self.conv(x.transpose(1, 2)).transpose(1, 2)
        x = x + self.ff1(self.norm1(x))
        x = x + self.bimamba(self.norm2(x))
        return x + self.ff2(self.norm3(x))


class ConvMambaStack(nn.Module):
    def __init__(self, cfg: ConvMambaConfig):
        super().__init__()
        cfg.validate()
        self.blocks = nn.ModuleList(ConvMambaBlock(cfg) for _ in range(cfg.n_blocks))

    def forward(self, x):
        for blk in self.blocks:
            x = blk(x)
        return x
