"""Model and training configuration with strict JSON (de)serialisation."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, fields

from .convmamba import ConvMambaConfig
from .dcfam import DcfamConfig
from .esm import ConfigError, EsmConfig
from .hamsnet import HamsConfig
from .losses import INFONCE_POOLING, LossWeights
from .splinemap import SCHEDULES, AgkanConfig, SplineConfig

SCHEMA_VERSION = 1
TOGGLES = ("esm", "dcfam", "adaf", "hams", "splinemap_fusion", "convmamba")


@dataclass
class ModelConfig:
    C: int = 64
    M: int = 10
    T: int = 320
    d_model: int = 64
    n_subjects_table: int = 8
    # module toggles
    esm: bool = True
    dcfam: bool = True
    adaf: bool = True
    hams: bool = True
    splinemap_fusion: bool = True
    convmamba: bool = True
    # module counts
    n_convmamba: int = 2
    n_dcfam: int = 4
    n_hams: int = 6
    n_fusion: int = 6
    hams_count_mode: str = "n_adaf"
    # sub-module details
    n_heads: int = 4
    d_ff: int = 256
    window: int = 9
    shuffle_groups: int = 4
    hams_levels: int = 3
    hams_max_channels: int = 256
    hams_feedback: bool = True
    rank: int = 32
    gate_hidden: int = 16
    grid_size: int = 8
    spline_order: int = 3
    grid_range: float = 3.0
    fusion_schedule: str = "alternate"
    d_state: int = 16
    tie_directions: bool = True
    scan_chunk: int = 64

    def validate(self) -> None:
        for name in ("C", "M", "T", "d_model", "n_subjects_table", "n_heads", "d_ff", "shuffle_groups", "d_state"):
            if getattr(self, name) < 1:
                raise ConfigError(f"model.{name}: must be >= 1")
        for name in ("n_convmamba", "n_dcfam", "n_hams", "n_fusion"):
            if getattr(self, name) < 1:
                raise ConfigError(f"model.{name}: must be >= 1")
        if self.hams_count_mode not in ("n_adaf", "n_unets"):
            raise ConfigError("model.hams_count_mode: must be 'n_adaf' or 'n_unets'")
        if self.fusion_schedule not in SCHEDULES:
            raise ConfigError(f"model.fusion_schedule: must be one of {SCHEDULES}")
        if self.T < 2:
            raise ConfigError("model.T: must be >= 2")
        self.esm_config().validate()
        self.dcfam_config().validate()
        self.hams_config().validate()
        self.agkan_config().validate()
        self.convmamba_config().validate()

    def esm_config(self) -> EsmConfig:
        return EsmConfig(self.d_model, self.n_heads, self.d_ff, self.n_subjects_table)

    def dcfam_config(self) -> DcfamConfig:
        return DcfamConfig(self.d_model, self.window, self.shuffle_groups, self.n_dcfam)

    def hams_config(self) -> HamsConfig:
        n_adaf = self.n_hams if self.hams_count_mode == "n_adaf" else 1
        return HamsConfig(self.d_model, self.hams_levels, n_adaf, self.hams_feedback, self.adaf, self.hams_max_channels)

    def n_unets(self) -> int:
        return self.n_hams if self.hams_count_mode == "n_unets" else 1

    def agkan_config(self) -> AgkanConfig:
        spline = SplineConfig(self.grid_size, self.spline_order, self.grid_range)
        return AgkanConfig(self.d_model, self.rank, self.gate_hidden, self.n_fusion, self.fusion_schedule, spline)

    def convmamba_config(self) -> ConvMambaConfig:
        return ConvMambaConfig(
            self.d_model, self.d_state, self.n_convmamba, 3, None, self.tie_directions, False, self.scan_chunk
        )

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(dataclasses.asdict(self), sort_keys=True).encode()).hexdigest()


@dataclass
class TrainConfig:
    epochs: int = 1000
    steps_per_epoch: int = 10
    lr: float = 5e-4
    lr_decay: float = 0.9
    decay_every: int = 50
    batch: int = 16
    seed: int = 0
    checkpoint_every: int = 500
    clip_norm: float = 1.0
    lam: float = 0.5
    beta: float = 0.1
    tau: float = 0.07
    infonce_pooling: str = "flatten"
    val_fraction: float = 0.1
    threads: int = 1

    def validate(self) -> None:
        if self.lr <= 0:
            raise ConfigError("train.lr: must be > 0")
        if not 0 < self.lr_decay < 1:
            raise ConfigError("train.lr_decay: must be in (0, 1)")
        for name in ("epochs", "steps_per_epoch", "batch", "decay_every", "checkpoint_every", "threads"):
            if getattr(self, name) < 1:
                raise ConfigError(f"train.{name}: must be >= 1")
        if not 0 <= self.val_fraction < 1:
            raise ConfigError("train.val_fraction: must be in [0, 1)")
        if self.infonce_pooling not in INFONCE_POOLING:
            raise ConfigError(f"train.infonce_pooling: must be one of {INFONCE_POOLING}")
        try:
            self.loss_weights().validate()
        except ValueError as e:
            raise ConfigError(f"train: {e}") from None

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lam, self.beta, self.tau, self.infonce_pooling)


def _from_dict(cls, d: dict, path: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{path}: expected an object")
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for k, v in d.items():
        if k not in known:
            raise ConfigError(f"{path}.{k}: unknown key")
        want = known[k].type
        ok = {
            "int": isinstance(v, int) and not isinstance(v, bool),
            "bool": isinstance(v, bool),
            "float": isinstance(v, (int, float)) and not isinstance(v, bool),
            "str": isinstance(v, str),
        }.get(want, True)
        if not ok:
            raise ConfigError(f"{path}.{k}: expected {want}, got {type(v).__name__}")
        kwargs[k] = float(v) if want == "float" else v
    return cls(**kwargs)


def parse_config(d: dict) -> tuple[ModelConfig, TrainConfig]:
    """Parse ``{"schema_version": 1, "model": {...}, "train": {...}}``."""
    if not isinstance(d, dict):
        raise ConfigError("config: expected an object")
    extra = set(d) - {"schema_version", "model", "train"}
    if extra:
        raise ConfigError(f"config.{sorted(extra)[0]}: unknown key")
    if d.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(f"config.schema_version: expected {SCHEMA_VERSION}")
    model = _from_dict(ModelConfig, d.get("model", {}), "model")
    train = _from_dict(TrainConfig, d.get("train", {}), "train")
    model.validate()
    train.validate()
    return model, train


def load_config(path) -> tuple[ModelConfig, TrainConfig]:
    with open(path) as fh:
        try:
            d = json.load(fh)
        except json.JSONDecodeError as e:
            raise ConfigError(f"config: invalid JSON ({e})") from None
    return parse_config(d)


def config_to_dict(model: ModelConfig, train: TrainConfig | None = None) -> dict:
    d = {"schema_version": SCHEMA_VERSION, "model": dataclasses.asdict(model)}
    if train is not None:
        d["train"] = dataclasses.asdict(train)
    return d


def ablation_configs(base: ModelConfig | None = None) -> dict[str, ModelConfig]:
    """The single-module removals ('w/o X') and module-count variants."""
    base = base or ModelConfig()
    out = {}
    for name in TOGGLES:
        label = {"splinemap_fusion": "splinemap", "hams": "hams"}.get(name, name)
        out[f"w/o {label}"] = dataclasses.replace(base, **{name: False})
    counts = {
        "n_convmamba": (1, 2, 4),
        "n_dcfam": (1, 2, 4, 6, 8),
        "n_hams": (1, 2, 4, 6, 8),
        "n_fusion": (1, 2, 4, 6),
    }
    for name, values in counts.items():
        for v in values:
            out[f"{name}={v}"] = dataclasses.replace(base, **{name: v})
    return out
