"""The full EEG-to-mel network."""

from __future__ import annotations

import torch
from torch import nn

from .config import ModelConfig
from .convmamba import ConvMambaStack
from .dcfam import DCFAM
from .esm import ESM
from .hamsnet import HamsStack
from .numerics import check_finite
from .splinemap import ConcatFusion, ProgressiveFusion


class DMF2Mel(nn.Module):
    """subject conditioning -> {contrastive aggregation, multiscale U-Net}
    -> spline-attention fusion -> convMamba stack -> linear head.

    A disabled block is an identity, except that without the subject
    conditioning block the EEG still goes through a linear C -> d_model
    projection, and without spline fusion the branches are concatenated
    and projected.
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            d = cfg.d_model
            self.esm = ESM(cfg.C, cfg.esm_config()) if cfg.esm else None
            self.inp = None if cfg.esm else nn.Linear(cfg.C, d)
            self.dcfam = DCFAM(cfg.dcfam_config()) if cfg.dcfam else None
            self.hams = HamsStack(cfg.hams_config(), cfg.n_unets()) if cfg.hams else None
            self.fusion = ProgressiveFusion(cfg.agkan_config()) if cfg.splinemap_fusion else ConcatFusion(d)
            self.convmamba = ConvMambaStack(cfg.convmamba_config()) if cfg.convmamba else None
            self.head = nn.Linear(d, cfg.M)

    def encode(self, eeg, subjects, allow_unknown: bool = False):
        if self.esm is not None:
            return self.esm(eeg, subjects, allow_unknown=allow_unknown)
        return self.inp(eeg)

    def branches(self, x0):
        d1 = self.dcfam(x0) if self.dcfam is not None else x0
        h1 = self.hams(x0) if self.hams is not None else x0
        return d1, h1

    def forward(self, eeg, subjects, allow_unknown: bool = False, zero_dcfam: bool = False):
        if eeg.ndim != 3 or eeg.shape[-1] != self.cfg.C:
            raise ValueError(f"expected (B, T, {self.cfg.C}) EEG, got {tuple(eeg.shape)}")
        check_finite(eeg, "eeg")
        x0 = self.encode(eeg, subjects, allow_unknown)
        d1, h1 = self.branches(x0)
        if zero_dcfam:
            d1 = torch.zeros_like(d1)
        f = self.fusion(d1, h1)
        y = self.convmamba(f) if self.convmamba is not None else f
        return self.head(y)

    def n_params(self) -> int:
        return sum(p.numel() for p in self.parameters())
