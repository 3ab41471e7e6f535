"""Shared numerics: Pearson correlation, stable softmax, a counter-based RNG,
a named parameter store, and the finite-difference gradient checker."""

from __future__ import annotations

from collections.abc import Callable, Iterator

import numpy as np
import torch
from torch import nn


class NumericError(ArithmeticError):
    """Raised when a value that must be finite is not."""


def make_rng(seed: int) -> np.random.Generator:
    """Return a Philox-4x64 generator for ``seed``.

    Philox is counter-based, so every stream is a pure function of
    ``(seed, counter)`` and is identical across platforms.
    """
    return np.random.Generator(np.random.Philox(int(seed)))


def check_finite(t: torch.Tensor | np.ndarray, what: str = "tensor") -> None:
    ok = torch.isfinite(t).all() if isinstance(t, torch.Tensor) else np.isfinite(t).all()
    if not bool(ok):
        raise NumericError(f"{what} contains NaN or Inf")


def softmax(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    x = x - x.amax(dim=dim, keepdim=True).detach()
    e = torch.exp(x)
    return e / e.sum(dim=dim, keepdim=True)


def pearson_along(x: torch.Tensor, y: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """Pearson r reduced over ``dim``. Zero-variance slices give r = 0."""
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")
    if x.shape[dim] < 2:
        raise ValueError("pearson needs at least 2 samples")
    xc = x - x.mean(dim=dim, keepdim=True)
    yc = y - y.mean(dim=dim, keepdim=True)
    sxx = (xc * xc).sum(dim=dim)
    syy = (yc * yc).sum(dim=dim)
    sxy = (xc * yc).sum(dim=dim)
    denom2 = sxx * syy
    degenerate = denom2 <= 0
    # keep sqrt away from 0 so the gradient of the masked branch stays finite
    safe = torch.where(degenerate, torch.ones_like(denom2), denom2)
    r = sxy / torch.sqrt(safe)
    r = torch.where(degenerate, torch.zeros_like(r), r)
    return r.clamp(-1.0, 1.0)


def pearson(x, y) -> float:
    x = torch.as_tensor(np.asarray(x, dtype=np.float64))
    y = torch.as_tensor(np.asarray(y, dtype=np.float64))
    if x.ndim != 1 or y.ndim != 1:
        raise ValueError("pearson expects 1-D sequences")
    return float(pearson_along(x, y, dim=0))


class ParamStore:
    """Named view over a module's parameters, iterated in lexicographic order.

    Values and gradients live on the underlying ``nn.Parameter`` objects, so
    the store never copies; ``snapshot``/``load`` move plain tensors in and out.
    """

    def __init__(self, module: nn.Module):
        self.module = module
        self._params = dict(sorted(module.named_parameters()))

    def __len__(self) -> int:
        return len(self._params)

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __getitem__(self, name: str) -> nn.Parameter:
        return self._params[name]

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def grad(self, name: str) -> torch.Tensor:
        p = self._params[name]
        return p.grad if p.grad is not None else torch.zeros_like(p)

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    def numel(self) -> int:
        return sum(p.numel() for p in self._params.values())

    def snapshot(self) -> dict[str, torch.Tensor]:
        return {k: p.detach().clone() for k, p in self._params.items()}

    def load(self, values: dict[str, torch.Tensor]) -> None:
        missing = set(self._params) ^ set(values)
        if missing:
            raise KeyError(f"parameter names differ: {sorted(missing)}")
        with torch.no_grad():
            for k, p in self._params.items():
                if tuple(values[k].shape) != tuple(p.shape):
                    raise ValueError(f"{k}: shape {tuple(values[k].shape)} != {tuple(p.shape)}")
                p.copy_(values[k])


def grad_check(
    f: Callable[[ParamStore], torch.Tensor],
    params: ParamStore,
    eps: float = 1e-5,
    per_entry: dict[str, float] | None = None,
) -> float:
    """Compare autograd gradients of scalar ``f`` against central differences.

    The error for one named entry is ``|g_a - g_n| / max(1e-8, |g_n|)`` with
    ``|.|`` the Euclidean norm over that entry's elements; the maximum over
    entries is returned. Pass a dict as ``per_entry`` to collect the
    individual errors.
    """
    params.zero_grad()
    value = f(params)
    if not torch.isfinite(value):
        raise NumericError("f(theta) is not finite")
    value.backward()
    analytic = {k: params.grad(k).detach().clone() for k in params}

    worst = 0.0
    with torch.no_grad():
        for name, p in params.items():
            flat = p.view(-1)
            numeric = torch.empty_like(flat)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                fp = f(params).item()
                flat[i] = orig - eps
                fm = f(params).item()
                flat[i] = orig
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    raise NumericError(f"f not finite while perturbing {name}[{i}]")
                numeric[i] = (fp - fm) / (2 * eps)
            a = analytic[name].reshape(-1)
            err = float((a - numeric).norm() / max(1e-8, float(numeric.norm())))
            if per_entry is not None:
                per_entry[name] = err
            worst = max(worst, err)
    params.zero_grad()
    return worst
