"""Optimiser, learning-rate schedule, checkpoints, the training loop and
held-out evaluation."""

from __future__ import annotations

import json
import logging
import math
from collections.abc import Callable
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .baselines import band_pearson
from .config import ModelConfig, TrainConfig, config_to_dict, parse_config
from .data import CROP_LEN, Dataset, contiguous_crops, crop_batch, read_tensor, stitch_crops, write_tensor
from .losses import ScoreReport, total_loss
from .model import DMF2Mel
from .numerics import NumericError, ParamStore, make_rng

log = logging.getLogger(__name__)

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


def lr_at(epoch: int, base: float = 5e-4, decay: float = 0.9, every: int = 50) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return base * decay ** (epoch // every)


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)


def adam_step(params: ParamStore, state: AdamState, lr: float) -> AdamState:
    """Bias-corrected Adam update using the gradients stored on ``params``."""
    b1, b2 = ADAM_BETAS
    for name in params:
        g = params.grad(name)
        if not torch.isfinite(g).all():
            raise NumericError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    c1 = 1 - b1**state.step
    c2 = 1 - b2**state.step
    with torch.no_grad():
        for name, p in params.items():
            g = params.grad(name)
            m = state.m.get(name)
            if m is None:
                m = state.m[name] = torch.zeros_like(p)
                state.v[name] = torch.zeros_like(p)
            v = state.v[name]
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            p.sub_(lr * (m / c1) / (torch.sqrt(v / c2) + ADAM_EPS))
    return state


def clip_grad_norm(params: ParamStore, max_norm: float) -> float:
    total = math.sqrt(sum(float((params.grad(k).double() ** 2).sum()) for k in params))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for k in params:
            if params[k].grad is not None:
                params[k].grad.mul_(scale)
    return total


# ---------------------------------------------------------------- checkpoints


def _encode_state(x):
    """Bit-generator state -> JSON-safe form (arrays keep their dtype)."""
    if isinstance(x, np.ndarray):
        return {"__ndarray__": x.dtype.str, "data": x.tolist()}
    if isinstance(x, dict):
        return {k: _encode_state(v) for k, v in x.items()}
    return x


def _decode_state(x):
    if isinstance(x, dict):
        if "__ndarray__" in x:
            return np.array(x["data"], dtype=np.dtype(x["__ndarray__"]))
        return {k: _decode_state(v) for k, v in x.items()}
    return x



@dataclass
class Checkpoint:
    model_cfg: ModelConfig
    train_cfg: TrainConfig
    params: dict[str, torch.Tensor]
    adam: AdamState
    step: int
    epoch: int
    rng_state: dict
    kind: str = "model"

    def save(self, path) -> Path:
        path = Path(path)
        for sub in ("params", "adam_m", "adam_v"):
            (path / sub).mkdir(parents=True, exist_ok=True)
        for name, t in self.params.items():
            write_tensor(path / "params" / f"{name}.dmf2", t.detach().cpu().numpy())
        for name, t in self.adam.m.items():
            write_tensor(path / "adam_m" / f"{name}.dmf2", t.cpu().numpy())
            write_tensor(path / "adam_v" / f"{name}.dmf2", self.adam.v[name].cpu().numpy())
        meta = {
            "kind": self.kind,
            "config": config_to_dict(self.model_cfg, self.train_cfg),
            "config_digest": self.model_cfg.digest(),
            "step": self.step,
            "epoch": self.epoch,
            "adam_step": self.adam.step,
            "rng_state": _encode_state(self.rng_state),
            "param_names": sorted(self.params),
        }
        (path / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "Checkpoint":
        path = Path(path)
        meta = json.loads((path / "meta.json").read_text())
        model_cfg, train_cfg = parse_config(meta["config"])
        if model_cfg.digest() != meta["config_digest"]:
            raise ValueError(f"{path}: config digest mismatch")
        params, adam = {}, AdamState(step=meta.get("adam_step", 0))
        for name in meta.get("param_names", []):
            params[name] = torch.from_numpy(read_tensor(path / "params" / f"{name}.dmf2"))
            mp = path / "adam_m" / f"{name}.dmf2"
            if mp.exists():
                adam.m[name] = torch.from_numpy(read_tensor(mp))
                adam.v[name] = torch.from_numpy(read_tensor(path / "adam_v" / f"{name}.dmf2"))
        return cls(model_cfg, train_cfg, params, adam, meta["step"], meta["epoch"], _decode_state(meta["rng_state"]), meta["kind"])

    def build_model(self) -> DMF2Mel:
        model = DMF2Mel(self.model_cfg, seed=self.train_cfg.seed)
        ParamStore(model).load(self.params)
        return model


def oracle_checkpoint(path, model_cfg: ModelConfig | None = None) -> Path:
    """A checkpoint whose predictor returns the ground-truth mel (pipeline checks)."""
    ck = Checkpoint(model_cfg or ModelConfig(), TrainConfig(), {}, AdamState(), 0, 0, {}, kind="oracle")
    return ck.save(path)


# ---------------------------------------------------------------- prediction / evaluation

Predictor = Callable[[Dataset, int], np.ndarray]


def model_predict(model: DMF2Mel, eeg: np.ndarray, subject: int, allow_unknown: bool = True, T: int = CROP_LEN) -> np.ndarray:
    """Run ``model`` on consecutive T-sample windows of ``eeg`` and stitch the outputs."""
    crops = contiguous_crops(eeg, T)
    x = torch.from_numpy(np.stack(crops)).to(next(model.parameters()).dtype)
    model.eval()
    with torch.no_grad():
        y = model(x, [subject] * len(crops), allow_unknown=allow_unknown).numpy()
    return stitch_crops(list(y), eeg.shape[0], T)


def model_predictor(model: DMF2Mel) -> Predictor:
    def predict(data: Dataset, i: int) -> np.ndarray:
        rec = data.manifest.recordings[i]
        return model_predict(model, data.eeg[i], rec.subject, allow_unknown=True, T=model.cfg.T)

    return predict


def oracle_predictor(data: Dataset, i: int) -> np.ndarray:
    return data.mel[i].copy()


def windowed_pearson(pred: np.ndarray, target: np.ndarray, T: int = CROP_LEN) -> float:
    T = min(T, pred.shape[0])
    pw, tw = contiguous_crops(pred, T), contiguous_crops(target, T)
    return float(np.mean([band_pearson(p, t) for p, t in zip(pw, tw)]))


def evaluate(predict: Predictor, data: Dataset, T: int = CROP_LEN, label: str = "") -> ScoreReport:
    per = {}
    for split in ("heldout_stories", "heldout_subjects"):
        idx = data.indices(split)
        if not idx:
            raise ValueError(f"dataset has no {split!r} recordings")
        win: dict[int, list[float]] = {}
        full: dict[int, list[float]] = {}
        for i in idx:
            subj = data.manifest.recordings[i].subject
            pred = predict(data, i)
            win.setdefault(subj, []).append(windowed_pearson(pred, data.mel[i], T))
            full.setdefault(subj, []).append(band_pearson(pred, data.mel[i]))
        per[split] = ({s: float(np.mean(v)) for s, v in win.items()}, {s: float(np.mean(v)) for s, v in full.items()})
    return ScoreReport(
        stories=per["heldout_stories"][0],
        subjects=per["heldout_subjects"][0],
        stories_full=per["heldout_stories"][1],
        subjects_full=per["heldout_subjects"][1],
        label=label,
    )


def load_predictor(path) -> tuple[Predictor, Checkpoint]:
    ck = Checkpoint.load(path)
    if ck.kind == "oracle":
        return oracle_predictor, ck
    return model_predictor(ck.build_model()), ck


def validation_pearson(model: DMF2Mel, data: Dataset, val_fraction: float) -> float:
    """Windowed Pearson on the last ``val_fraction`` of each training recording."""
    if val_fraction <= 0:
        return float("nan")
    rs = []
    for i in data.indices("train"):
        n = data.eeg[i].shape[0]
        start = n - int(round(val_fraction * n))
        eeg, mel = data.eeg[i][start:], data.mel[i][start:]
        T = min(model.cfg.T, eeg.shape[0])
        pred = model_predict(model, eeg, data.manifest.recordings[i].subject, allow_unknown=False, T=T)
        rs.append(windowed_pearson(pred, mel, T))
    model.train()
    return float(np.mean(rs))


# ---------------------------------------------------------------- training loop


def epoch_steps(data: Dataset, batch: int, T: int = CROP_LEN, val_fraction: float = 0.1) -> int:
    """Optimiser steps whose crops add up to one pass over the training region."""
    n = sum(int(len(data.eeg[i]) * (1 - val_fraction)) for i in data.indices("train"))
    return max(1, math.ceil(n / (batch * T)))


@dataclass
class TrainResult:
    model: DMF2Mel
    checkpoint: Checkpoint
    metrics: list[dict]


def _snapshot(model, model_cfg, train_cfg, adam, step, rng, kind="model") -> Checkpoint:
    params = {k: v.detach().clone() for k, v in ParamStore(model).items()}
    adam_copy = AdamState(adam.step, {k: v.clone() for k, v in adam.m.items()}, {k: v.clone() for k, v in adam.v.items()})
    return Checkpoint(model_cfg, train_cfg, params, adam_copy, step, step // train_cfg.steps_per_epoch, rng.bit_generator.state, kind)


def train(
    data: Dataset,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    out_dir=None,
    resume=None,
    max_steps: int | None = None,
    validate: bool = True,
) -> TrainResult:
    """Train from scratch (or from the checkpoint at ``resume``).

    Every optimiser step draws a fresh batch of random crops from the first
    ``1 - val_fraction`` of each training recording. One metrics record is
    emitted per completed epoch; checkpoints go to ``out_dir/step_XXXXXX``
    every ``checkpoint_every`` steps and to ``out_dir/last`` at the end.
    """
    model_cfg.validate()
    train_cfg.validate()
    if data.C != model_cfg.C or data.M != model_cfg.M:
        raise ValueError(f"dataset (C={data.C}, M={data.M}) does not match model (C={model_cfg.C}, M={model_cfg.M})")
    torch.set_num_threads(train_cfg.threads)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    model = DMF2Mel(model_cfg, seed=train_cfg.seed)
    params = ParamStore(model)
    rng = make_rng(train_cfg.seed)
    adam = AdamState()
    step = 0
    if resume is not None:
        ck = resume if isinstance(resume, Checkpoint) else Checkpoint.load(resume)
        if ck.model_cfg.digest() != model_cfg.digest():
            raise ValueError("checkpoint was produced by a different model config")
        params.load(ck.params)
        adam = AdamState(ck.adam.step, {k: v.clone() for k, v in ck.adam.m.items()}, {k: v.clone() for k, v in ck.adam.v.items()})
        rng.bit_generator.state = ck.rng_state
        step = ck.step

    total_steps = train_cfg.epochs * train_cfg.steps_per_epoch
    if max_steps is not None:
        total_steps = min(total_steps, max_steps)
    weights = train_cfg.loss_weights()
    metrics: list[dict] = []
    metrics_fh = open(out / "metrics.jsonl", "a") if out is not None else None
    last_good = _snapshot(model, model_cfg, train_cfg, adam, step, rng)
    epoch_losses: list[dict] = []
    model.train()
    try:
        while step < total_steps:
            epoch = step // train_cfg.steps_per_epoch
            lr = lr_at(epoch, train_cfg.lr, train_cfg.lr_decay, train_cfg.decay_every)
            eeg, mel, subjects = crop_batch(
                data, "train", train_cfg.batch, rng, model_cfg.T, (0.0, 1.0 - train_cfg.val_fraction)
            )
            pred = model(torch.from_numpy(eeg), subjects)
            loss = total_loss(pred, torch.from_numpy(mel), weights)
            if not torch.isfinite(loss.total):
                if out is not None:
                    last_good.save(out / "last_good")
                raise NumericError(f"non-finite loss at step {step}; last good checkpoint retained")
            params.zero_grad()
            loss.total.backward()
            clip_grad_norm(params, train_cfg.clip_norm)
            adam_step(params, adam, lr)
            step += 1
            epoch_losses.append(loss.as_floats())
            if step % train_cfg.checkpoint_every == 0:
                last_good = _snapshot(model, model_cfg, train_cfg, adam, step, rng)
                if out is not None:
                    last_good.save(out / f"step_{step:06d}")
            if step % train_cfg.steps_per_epoch == 0 or step == total_steps:
                rec = {"epoch": epoch, "lr": lr}
                for k in ("l_pearson", "l_one", "l_infonce", "total"):
                    rec[k] = float(np.mean([e[k] for e in epoch_losses]))
                rec["val_pearson"] = validation_pearson(model, data, train_cfg.val_fraction) if validate else None
                epoch_losses = []
                metrics.append(rec)
                log.info("epoch %d lr %.2e loss %.4f val_r %s", epoch, lr, rec["total"], rec["val_pearson"])
                if metrics_fh is not None:
                    metrics_fh.write(json.dumps(rec) + "\n")
                    metrics_fh.flush()
    finally:
        if metrics_fh is not None:
            metrics_fh.close()
    final = _snapshot(model, model_cfg, train_cfg, adam, step, rng)
    if out is not None:
        final.save(out / "last")
    return TrainResult(model, final, metrics)
