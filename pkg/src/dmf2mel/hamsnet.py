"""1-D U-Net with adaptive dual-attention feedback (ADAF) blocks."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn
import torch.nn.functional as F

from .esm import ConfigError
from .numerics import softmax


@dataclass
class HamsConfig:
    d_model: int = 64
    levels: int = 3
    n_adaf: int = 6
    feedback: bool = True
    use_adaf: bool = True
    max_channels: int = 256

    def validate(self) -> None:
        if self.levels < 1:
            raise ConfigError("levels must be >= 1")
        if self.n_adaf < 1:
            raise ConfigError("n_adaf must be >= 1")

    def channels(self) -> list[int]:
        return [min(self.d_model * 2**i, max(self.max_channels, self.d_model)) for i in range(self.levels + 1)]


class Conv(nn.Module):
    """Conv1d on (B, T, c) tensors."""

    def __init__(self, c_in, c_out, kernel=3, stride=1):
        super().__init__()
        self.conv = nn.Conv1d(c_in, c_out, kernel, stride=stride, padding=kernel // 2)

    def forward(self, x):
        return self.conv(x.transpose(1, 2)).transpose(1, 2)


class PAM(nn.Module):
    """Position attention: softmax over source positions, plus identity."""

    def __init__(self, d: int):
        super().__init__()
        self.q = nn.Linear(d, d, bias=False)
        self.k = nn.Linear(d, d, bias=False)
        self.v = nn.Linear(d, d, bias=False)

    def forward(self, x):
        s = softmax(self.q(x) @ self.k(x).transpose(1, 2), dim=-1)
        return s @ self.v(x) + x


def cam(x: torch.Tensor) -> torch.Tensor:
    """Channel attention: G = softmax_j(sum_t x_ti x_tj); out = x G^T + x."""
    g = softmax(x.transpose(1, 2) @ x, dim=-1)
    return x @ g.transpose(1, 2) + x


class ADAF(nn.Module):
    """sigmoid(w1) * PAM(f) + sigmoid(w2) * CAM(f) + Feedback(x_prev), f = conv(x)."""

    def __init__(self, d: int, feedback: bool = True):
        super().__init__()
        self.extract = Conv(d, d)
        self.pam = PAM(d)
        self.w1 = nn.Parameter(torch.zeros(()))
        self.w2 = nn.Parameter(torch.zeros(()))
        self.feedback = nn.Linear(d, d) if feedback else None

    @property
    def alpha(self):
        return torch.sigmoid(self.w1)

    @property
    def beta(self):
        return torch.sigmoid(self.w2)

    def forward(self, x, x_prev=None):
        if x_prev is not None and x_prev.shape != x.shape:
            raise ValueError(f"x_prev shape {tuple(x_prev.shape)} != x shape {tuple(x.shape)}")
        f = self.extract(x)
        out = self.alpha * self.pam(f) + self.beta * cam(f)
        if x_prev is not None and self.feedback is not None:
            out = out + self.feedback(x_prev)
        return out


class HAMSNet(nn.Module):
    def __init__(self, cfg: HamsConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        ch = cfg.channels()
        L = cfg.levels
        self.down = nn.ModuleList(Conv(ch[i], ch[i + 1], stride=2) for i in range(L))
        if cfg.use_adaf:
            self.bottleneck = nn.ModuleList(ADAF(ch[L], cfg.feedback) for _ in range(cfg.n_adaf))
            self.dec_adaf = nn.ModuleList(ADAF(ch[i], cfg.feedback) for i in range(L))
        self.fuse = nn.ModuleList(Conv(ch[i + 1] + ch[i], ch[i]) for i in range(L))
        self.out = nn.Linear(ch[0], ch[0])

    def forward(self, x, skip_mask: dict[int, float] | None = None):
        B, T, d = x.shape
        L = self.cfg.levels
        pad = (-T) % (2**L)
        h = F.pad(x, (0, 0, 0, pad)) if pad else x
        skips = []
        for down in self.down:
            skips.append(h)
            h = down(h)
        if self.cfg.use_adaf:
            prev = None
            for layer in self.bottleneck:
                h = layer(h, prev)
                prev = h
        for i in reversed(range(L)):
            skip = skips[i]
            if skip_mask is not None and i in skip_mask:
                skip = skip * skip_mask[i]
            up = F.interpolate(h.transpose(1, 2), size=skip.shape[1], mode="linear", align_corners=False).transpose(1, 2)
            h = self.fuse[i](torch.cat([up, skip], dim=-1))
            if self.cfg.use_adaf:
                h = self.dec_adaf[i](h)
        return self.out(h[:, :T])


class HamsStack(nn.Module):
    """``n_unets`` HAMS-Nets applied in sequence with residual connections."""

    def __init__(self, cfg: HamsConfig, n_unets: int = 1):
        super().__init__()
        self.nets = nn.ModuleList(HAMSNet(cfg) for _ in range(n_unets))

    def forward(self, x):
        for net in self.nets:
            x = net(x) if len(self.nets) == 1 else x + net(x)
        return x
