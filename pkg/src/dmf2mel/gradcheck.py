"""Tiny float64 instances of every trainable block, each paired with a
scalar objective for finite-difference gradient checking."""

from __future__ import annotations

from collections.abc import Callable
from dataclasses import dataclass

import torch
from torch import nn

from .convmamba import ConvMambaBlock, ConvMambaConfig
from .dcfam import DCFAM, DcfamConfig
from .esm import ESM, EsmConfig
from .hamsnet import HAMSNet, HamsConfig
from .losses import LossWeights, total_loss
from .numerics import ParamStore, grad_check
from .splinemap import AgkanConfig, ProgressiveFusion, SplineConfig

MODULES = ("esm", "dcfam", "hamsnet", "splinemap", "convmamba", "losses")
TOLERANCE = 1e-4


@dataclass
class GradCase:
    module: nn.Module
    objective: Callable[[ParamStore], torch.Tensor]


def _probe(shape, g):
    return torch.randn(*shape, generator=g, dtype=torch.float64)


def build_case(name: str, seed: int = 0) -> GradCase:
    g = torch.Generator().manual_seed(seed)
    torch.manual_seed(seed)
    if name == "esm":
        mod = ESM(3, EsmConfig(d_model=4, n_heads=2, d_ff=8, n_subjects_table=3)).double()
        x, w = _probe((2, 5, 3), g), _probe((2, 5, 4), g)
        return GradCase(mod, lambda p: (mod(x, [0, 2]) * w).sum())
    if name == "dcfam":
        mod = DCFAM(DcfamConfig(d_model=4, window=3, shuffle_groups=2, n_blocks=2)).double()
        x, w = _probe((1, 6, 4), g), _probe((1, 6, 4), g)
        return GradCase(mod, lambda p: (mod(x) * w).sum())
    if name == "hamsnet":
        mod = HAMSNet(HamsConfig(d_model=4, levels=2, n_adaf=2, max_channels=8)).double()
        x, w = _probe((1, 16, 4), g) * 0.5, _probe((1, 16, 4), g)
        return GradCase(mod, lambda p: (mod(x) * w).sum())
    if name == "splinemap":
        cfg = AgkanConfig(d_model=4, rank=3, gate_hidden=3, n_fusion_layers=2, spline=SplineConfig(grid_range=3.0))
        mod = ProgressiveFusion(cfg).double()
        d1, h1, w = _probe((2, 5, 4), g), _probe((2, 5, 4), g), _probe((2, 5, 4), g)
        return GradCase(mod, lambda p: (mod(d1, h1) * w).sum())
    if name == "convmamba":
        mod = ConvMambaBlock(ConvMambaConfig(d_model=4, d_state=4, chunk=8)).double()
        x, w = _probe((1, 16, 4), g), _probe((1, 16, 4), g)
        return GradCase(mod, lambda p: (mod(x) * w).sum())
    if name == "losses":
        mod = nn.Sequential(nn.Linear(3, 6), nn.Tanh(), nn.Linear(6, 2)).double()
        x, y = _probe((3, 8, 3), g), _probe((3, 8, 2), g)
        weights = LossWeights(lam=0.5, beta=0.1, tau=0.5)
        return GradCase(mod, lambda p: total_loss(mod(x), y, weights).total)
    raise KeyError(f"unknown module {name!r}; expected one of {MODULES}")


def check_module(name: str, eps: float = 1e-5) -> tuple[float, dict[str, float]]:
    case = build_case(name)
    errs: dict[str, float] = {}
    worst = grad_check(case.objective, ParamStore(case.module), eps=eps, per_entry=errs)
    return worst, errs
