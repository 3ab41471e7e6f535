"""Dynamic contrastive feature aggregation: a local depthwise-separable
branch, a global attention branch, and windowed contrastive fusion."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn
import torch.nn.functional as F

from .esm import ConfigError
from .numerics import softmax


@dataclass
class DcfamConfig:
    d_model: int = 64
    window: int = 9
    shuffle_groups: int = 4
    n_blocks: int = 4

    def validate(self) -> None:
        if self.window < 1 or self.window % 2 == 0:
            raise ConfigError(f"window must be odd, got {self.window}")
        if self.d_model % self.shuffle_groups:
            raise ConfigError("d_model must be divisible by shuffle_groups")
        if self.n_blocks < 1:
            raise ConfigError("n_blocks must be >= 1")


def channel_shuffle(x: torch.Tensor, groups: int) -> torch.Tensor:
    """ShuffleNet permutation over the last (channel) axis."""
    *lead, d = x.shape
    return x.reshape(*lead, groups, d // groups).transpose(-1, -2).reshape(*lead, d)


def shuffle_order(d: int, groups: int) -> list[int]:
    return channel_shuffle(torch.arange(d), groups).tolist()


class DepthwiseConv(nn.Module):
    """Per-channel temporal convolution, kernel 3, same padding, on (B, T, d)."""

    def __init__(self, d: int, kernel: int = 3):
        super().__init__()
        self.conv = nn.Conv1d(d, d, kernel, padding=kernel // 2, groups=d)

    def forward(self, x):
        return self.conv(x.transpose(1, 2)).transpose(1, 2)


class LocalBranch(nn.Module):
    def __init__(self, d: int, groups: int):
        super().__init__()
        self.groups = groups
        self.pw_in = nn.Linear(d, d)
        self.dw = DepthwiseConv(d)
        self.pw_out = nn.Linear(d, d)
        self.w_local = nn.Parameter(torch.ones(()))

    def forward(self, x):
        y = self.pw_out(self.dw(self.pw_in(x)))
        return channel_shuffle(y, self.groups) * self.w_local


class GlobalBranch(nn.Module):
    def __init__(self, d: int):
        super().__init__()
        self.qkv = nn.Linear(d, 3 * d)
        self.dw = DepthwiseConv(3 * d)
        self.w_global = nn.Parameter(torch.ones(()))

    def forward(self, x):
        d = x.shape[-1]
        q, k, v = self.dw(self.qkv(x)).split(d, dim=-1)
        att = softmax(q @ k.transpose(-2, -1) / math.sqrt(d), dim=-1)
        return (att @ v) * self.w_global


def unfold_time(x: torch.Tensor, window: int) -> torch.Tensor:
    """(B, T, d) -> (B, T, window, d); zero padded, window centred on t."""
    half = window // 2
    xp = F.pad(x, (0, 0, half, half))
    return xp.unfold(1, window, 1).transpose(-1, -2)


class CDFA(nn.Module):
    """Contrastive maps over a temporal window applied to windows of F_conv."""

    def __init__(self, d: int, window: int):
        super().__init__()
        self.window = window
        self.w_fg = nn.Linear(d, window, bias=False)
        self.w_bg = nn.Linear(d, window, bias=False)

    def maps(self, f_conv, f_atten):
        return softmax(self.w_fg(f_conv), dim=-1), softmax(self.w_bg(f_atten), dim=-1)

    def forward(self, f_conv, f_atten):
        a_fg, a_bg = self.maps(f_conv, f_atten)
        v = unfold_time(f_conv, self.window)
        o_fg = (a_fg.unsqueeze(-1) * v).sum(dim=2)
        o_bg = (a_bg.unsqueeze(-1) * v).sum(dim=2)
        return o_fg + o_bg


class DcfamBlock(nn.Module):
    def __init__(self, cfg: DcfamConfig):
        super().__init__()
        d = cfg.d_model
        self.norm = nn.LayerNorm(d)
        self.local = LocalBranch(d, cfg.shuffle_groups)
        self.glob = GlobalBranch(d)
        self.cdfa = CDFA(d, cfg.window)

    def forward(self, x):
        h = self.norm(x)
        return x + self.cdfa(self.local(h), self.glob(h))


class DCFAM(nn.Module):
    def __init__(self, cfg: DcfamConfig):
        super().__init__()
        cfg.validate()
        self.blocks = nn.ModuleList(DcfamBlock(cfg) for _ in range(cfg.n_blocks))

    def forward(self, x):
        for blk in self.blocks:
            x = blk(x)
        return x
