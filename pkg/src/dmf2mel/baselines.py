"""Closed-form lagged ridge regression from EEG to mel."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def lagged(eeg: np.ndarray, n_lags: int) -> np.ndarray:
    """Stack eeg[t], eeg[t+1], ..., eeg[t+n_lags-1] (zero past the end) plus a bias column."""
    n, c = eeg.shape
    out = np.zeros((n, c * n_lags + 1))
    for k in range(n_lags):
        out[: n - k, k * c : (k + 1) * c] = eeg[k:]
    out[:, -1] = 1.0
    return out


@dataclass
class RidgeDecoder:
    n_lags: int = 17
    alpha: float = 1.0
    coef: np.ndarray | None = None

    def fit(self, eegs: list[np.ndarray], mels: list[np.ndarray]) -> "RidgeDecoder":
        xtx = None
        xty = None
        for e, m in zip(eegs, mels):
            X = lagged(e.astype(np.float64), self.n_lags)
            Y = m.astype(np.float64)
            xtx = X.T @ X if xtx is None else xtx + X.T @ X
            xty = X.T @ Y if xty is None else xty + X.T @ Y
        # scale-free regulariser: alpha is relative to the mean feature energy
        reg = self.alpha * np.trace(xtx) / xtx.shape[0]
        eye = np.eye(xtx.shape[0])
        eye[-1, -1] = 0.0
        self.coef = np.linalg.solve(xtx + reg * eye, xty)
        return self

    def predict(self, eeg: np.ndarray) -> np.ndarray:
        if self.coef is None:
            raise RuntimeError("decoder is not fitted")
        return lagged(eeg.astype(np.float64), self.n_lags) @ self.coef


def band_pearson(pred: np.ndarray, target: np.ndarray) -> float:
    """Mean over bands of the Pearson r along time; constant bands score 0."""
    pc = pred - pred.mean(axis=0)
    tc = target - target.mean(axis=0)
    den = np.sqrt((pc**2).sum(axis=0) * (tc**2).sum(axis=0))
    r = np.where(den > 0, (pc * tc).sum(axis=0) / np.where(den > 0, den, 1.0), 0.0)
    return float(r.mean())


def fit_ridge_with_validation(
    eegs_fit, mels_fit, eegs_val, mels_val, alphas=(1e-4, 1e-3, 1e-2, 1e-1, 1.0, 10.0), n_lags: int = 17
) -> tuple[RidgeDecoder, float]:
    """Pick alpha on a validation set, then return the decoder refit on fit+val."""
    best_alpha, best_r = alphas[0], -np.inf
    for a in alphas:
        dec = RidgeDecoder(n_lags=n_lags, alpha=a).fit(eegs_fit, mels_fit)
        r = np.mean([band_pearson(dec.predict(e), m) for e, m in zip(eegs_val, mels_val)])
        if r > best_r:
            best_alpha, best_r = a, r
    dec = RidgeDecoder(n_lags=n_lags, alpha=best_alpha).fit(list(eegs_fit) + list(eegs_val), list(mels_fit) + list(mels_val))
    return dec, best_alpha
