"""Subject conditioning: embedding table, multi-head attention and the
embedding strength modulator."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .numerics import softmax


class ConfigError(ValueError):
    pass


@dataclass
class EsmConfig:
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 256
    n_subjects_table: int = 8

    def validate(self) -> None:
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.n_subjects_table < 1:
            raise ConfigError("n_subjects_table must be >= 1")


class MultiHeadAttention(nn.Module):
    def __init__(self, d: int, n_heads: int):
        super().__init__()
        if d % n_heads:
            raise ConfigError(f"d={d} not divisible by n_heads={n_heads}")
        self.n_heads = n_heads
        self.q = nn.Linear(d, d, bias=False)
        self.k = nn.Linear(d, d, bias=False)
        self.v = nn.Linear(d, d, bias=False)
        self.o = nn.Linear(d, d, bias=False)

    def forward(self, q, k, v):
        B, T, d = q.shape
        h = self.n_heads
        hd = d // h
        Q = self.q(q).view(B, T, h, hd).transpose(1, 2)
        K = self.k(k).view(B, k.shape[1], h, hd).transpose(1, 2)
        V = self.v(v).view(B, v.shape[1], h, hd).transpose(1, 2)
        att = softmax(Q @ K.transpose(-2, -1) / math.sqrt(hd), dim=-1)
        y = (att @ V).transpose(1, 2).reshape(B, T, d)
        return self.o(y)


class SubjectEmbedding(nn.Module):
    """Embedding table whose fallback for unseen subjects is the row mean."""

    def __init__(self, n_subjects: int, d: int):
        super().__init__()
        self.table = nn.Parameter(torch.randn(n_subjects, d) * 0.1)

    @property
    def unknown_vector(self) -> torch.Tensor:
        return self.table.mean(dim=0)

    def forward(self, subjects, allow_unknown: bool = False) -> torch.Tensor:
        n = self.table.shape[0]
        rows = []
        for s in subjects:
            if s is not None and 0 <= s < n:
                rows.append(self.table[s])
            elif allow_unknown:
                rows.append(self.unknown_vector)
            else:
                raise IndexError(f"subject {s} outside embedding table of size {n}")
        return torch.stack(rows)


class ESM(nn.Module):
    """y = LN2(h + FFN(h)), h = h0 + MHA(h0), h0 = LN1(x W_in + e_subject)."""

    def __init__(self, n_channels: int, cfg: EsmConfig):
        super().__init__()
        cfg.validate()
        d = cfg.d_model
        self.inp = nn.Linear(n_channels, d)
        self.embed = SubjectEmbedding(cfg.n_subjects_table, d)
        self.ln1 = nn.LayerNorm(d)
        self.mha = MultiHeadAttention(d, cfg.n_heads)
        self.ff = nn.Sequential(nn.Linear(d, cfg.d_ff), nn.GELU(), nn.Linear(cfg.d_ff, d))
        self.ln2 = nn.LayerNorm(d)

    def forward(self, x, subjects, allow_unknown: bool = False):
        e = self.embed(subjects, allow_unknown=allow_unknown).to(x.dtype)
        h0 = self.ln1(self.inp(x) + e[:, None, :])
        h = h0 + self.mha(h0, h0, h0)
        return self.ln2(h + self.ff(h))
