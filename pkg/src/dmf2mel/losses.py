"""Training objective (Pearson + L1 + symmetric InfoNCE) and the
held-out score."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .numerics import pearson_along

INFONCE_POOLING = ("flatten", "time_mean")


@dataclass
class LossWeights:
    lam: float = 0.5
    beta: float = 0.1
    tau: float = 0.07
    pooling: str = "flatten"

    def validate(self) -> None:
        if self.lam < 0 or self.beta < 0:
            raise ValueError("loss weights must be non-negative")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.pooling not in INFONCE_POOLING:
            raise ValueError(f"pooling must be one of {INFONCE_POOLING}")


@dataclass
class LossBreakdown:
    l_pearson: torch.Tensor
    l_one: torch.Tensor
    l_infonce: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> dict[str, float]:
        return {k: float(getattr(self, k).detach()) for k in ("l_pearson", "l_one", "l_infonce", "total")}


def pearson_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """1 - r per (sample, band) over time, averaged. pred/target are (B, T, M)."""
    return (1.0 - pearson_along(pred, target, dim=1)).mean()


def l1_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    return (pred - target).abs().mean()


def _represent(x: torch.Tensor, pooling: str) -> torch.Tensor:
    return x.reshape(x.shape[0], -1) if pooling == "flatten" else x.mean(dim=1)


def cosine_matrix(a: torch.Tensor, b: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    an = a / (a.norm(dim=1, keepdim=True) + eps)
    bn = b / (b.norm(dim=1, keepdim=True) + eps)
    return an @ bn.t()


def infonce_loss(pred: torch.Tensor, target: torch.Tensor, tau: float = 0.07, pooling: str = "flatten") -> torch.Tensor:
    """Symmetric InfoNCE with in-batch negatives and cosine similarity."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    s = cosine_matrix(_represent(pred, pooling), _represent(target, pooling)) / tau
    labels = torch.arange(s.shape[0], device=s.device)
    forward = F.cross_entropy(s, labels)
    backward = F.cross_entropy(s.t(), labels)
    return 0.5 * (forward + backward)


def total_loss(pred, target, w: LossWeights | None = None) -> LossBreakdown:
    w = w or LossWeights()
    lp = pearson_loss(pred, target)
    l1 = l1_loss(pred, target)
    nce = infonce_loss(pred, target, w.tau, w.pooling)
    return LossBreakdown(lp, l1, nce, lp + w.lam * l1 + w.beta * nce)


def challenge_score(r_s1, r_s2) -> float:
    """(2/3) mean(S1) + (1/3) mean(S2); S1 held-out stories, S2 held-out subjects."""
    r_s1, r_s2 = list(r_s1), list(r_s2)
    if not r_s1 or not r_s2:
        raise ValueError("both subject lists must be non-empty")
    return (2.0 / 3.0) * (sum(r_s1) / len(r_s1)) + (1.0 / 3.0) * (sum(r_s2) / len(r_s2))


@dataclass
class ScoreReport:
    stories: dict[int, float]
    subjects: dict[int, float]
    score: float = field(init=False)
    stories_full: dict[int, float] = field(default_factory=dict)
    subjects_full: dict[int, float] = field(default_factory=dict)
    label: str = ""

    def __post_init__(self):
        self.score = challenge_score(self.stories.values(), self.subjects.values())

    def rows(self) -> list[tuple[int, str, float]]:
        out = [(s, "heldout_stories", r) for s, r in sorted(self.stories.items())]
        out += [(s, "heldout_subjects", r) for s, r in sorted(self.subjects.items())]
        return out

    def to_json(self) -> str:
        d = {
            "label": self.label,
            "score": self.score,
            "heldout_stories": {str(k): v for k, v in sorted(self.stories.items())},
            "heldout_subjects": {str(k): v for k, v in sorted(self.subjects.items())},
            "heldout_stories_full": {str(k): v for k, v in sorted(self.stories_full.items())},
            "heldout_subjects_full": {str(k): v for k, v in sorted(self.subjects_full.items())},
        }
        return json.dumps(d, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "ScoreReport":
        d = json.loads(text)
        rep = cls(
            stories={int(k): float(v) for k, v in d["heldout_stories"].items()},
            subjects={int(k): float(v) for k, v in d["heldout_subjects"].items()},
            stories_full={int(k): float(v) for k, v in d.get("heldout_stories_full", {}).items()},
            subjects_full={int(k): float(v) for k, v in d.get("heldout_subjects_full", {}).items()},
            label=d.get("label", ""),
        )
        if abs(rep.score - d["score"]) > 1e-12:
            raise ValueError("stored score does not match per-subject values")
        return rep

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["subject_id", "split", "pearson_r"])
        for s, split, r in self.rows():
            w.writerow([s, split, repr(r)])
        return buf.getvalue()
