"""Line-based ``key=value`` experiment configuration."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

from mteeg.backbone import BackboneConfig
from mteeg.model import MODEL_VARIANTS, TaskSpec
from mteeg.synth import PRESETS, SynthTaskConfig, task_configs
from mteeg.trainer import TrainConfig


class ConfigKeyError(KeyError):
    def __init__(self, key: str, reason: str = "unknown config key"):
        super().__init__(key)
        self.key = key
        self.reason = reason

    def __str__(self) -> str:
        return f"{self.reason}: {self.key}"


def _ints(s: str) -> tuple:
    return tuple(int(v) for v in s.replace(" ", "").split(",") if v)


def _floats(s: str) -> tuple:
    return tuple(float(v) for v in s.replace(" ", "").split(",") if v)


@dataclass
class ExperimentConfig:
    variant: str = "dc"
    r: int = 8
    r_sweep: tuple = ()
    locations: str = "both"
    n_experts: int = 0  # 0 means one expert per task
    # backbone
    d: int = 32
    heads: int = 4
    layers: int = 2
    patch_len: int = 200
    pretrain_steps: int = 600
    pretrain_noise: float = 1e-4
    # tasks and data
    preset: str = "suite3"
    subsample: tuple = ()  # per-task fractions, default all 1.0
    noise: float = 1e-4
    n_train: int = 96
    n_val: int = 32
    n_test: int = 64
    data_seed: int = 0
    # optimization
    lr: float = 3e-3
    weight_decay: float = 0.01
    batch_size: int = 16
    epochs: int = 15
    patience: int = 0  # 0 disables early stopping
    seeds: tuple = (1,)
    # diagnostics
    snapshot_step: int = -1  # -1: use the trained checkpoint; k >= 0: k steps from init
    snapshot_batch: int = 16
    hist_bins: int = 28
    # paths
    out_dir: str = "runs"
    data_dir: str = ""

    @property
    def out(self) -> Path:
        return Path(os.environ.get("MTEEG_OUT") or self.out_dir)

    @property
    def data_path(self) -> Path:
        return self.out / (self.data_dir or "data")

    def backbone_config(self) -> BackboneConfig:
        return BackboneConfig(d=self.d, heads=self.heads, layers=self.layers, patch_len=self.patch_len)

    def synth_configs(self) -> list[SynthTaskConfig]:
        return task_configs(self.preset, noise=self.noise, n_train=self.n_train, n_val=self.n_val,
                            n_test=self.n_test, seed=self.data_seed)

    def task_specs(self) -> list[TaskSpec]:
        cfgs = self.synth_configs()
        fracs = self.subsample or (1.0,) * len(cfgs)
        if len(fracs) != len(cfgs):
            raise ConfigKeyError("subsample", f"expected {len(cfgs)} fractions for key")
        return [TaskSpec(c.task_id, c.name, c.n_classes, channels=c.channels, duration_s=c.duration_s,
                         subsample_fraction=f) for c, f in zip(cfgs, fracs)]

    def train_config(self) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size, lr=self.lr, weight_decay=self.weight_decay,
                           patience=self.patience or None)

    def ranks(self) -> tuple:
        return self.r_sweep or (self.r,)


_FIELDS = {f.name: f for f in dataclasses.fields(ExperimentConfig)}


def _convert(key: str, raw: str):
    default = getattr(ExperimentConfig, key, None)
    if key in ("r_sweep", "seeds"):
        return _ints(raw)
    if key == "subsample":
        return _floats(raw)
    if isinstance(default, bool):
        return raw.lower() in ("1", "true", "yes")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def apply(cfg: ExperimentConfig, key: str, raw: str) -> None:
    key = key.strip()
    if key not in _FIELDS or key.startswith("_"):
        raise ConfigKeyError(key)
    try:
        value = _convert(key, raw.strip())
    except ValueError as exc:
        raise ConfigKeyError(key, f"bad value {raw.strip()!r} for key") from exc
    setattr(cfg, key, value)


def validate(cfg: ExperimentConfig) -> ExperimentConfig:
    cfg.variant = cfg.variant.lower()
    if cfg.variant not in MODEL_VARIANTS:
        raise ConfigKeyError("variant", f"variant must be one of {MODEL_VARIANTS}; key")
    if cfg.preset not in PRESETS:
        raise ConfigKeyError("preset", f"preset must be one of {sorted(PRESETS)}; key")
    if cfg.locations.lower() not in ("mhsa", "ffn", "both"):
        raise ConfigKeyError("locations", "locations must be mhsa, ffn or both; key")
    if not cfg.seeds:
        raise ConfigKeyError("seeds", "at least one seed required; key")
    if cfg.patience < 0:
        raise ConfigKeyError("patience", "patience must be >= 0; key")
    if cfg.variant != "hps" and not all(1 <= r <= cfg.d for r in cfg.ranks()):
        raise ConfigKeyError("r_sweep" if cfg.r_sweep else "r", f"ranks must lie in 1..d={cfg.d}; key")
    cfg.task_specs()
    return cfg


def parse(text: str, overrides=()) -> ExperimentConfig:
    """Parse ``key=value`` lines (``#`` comments, blank lines ignored) then overrides."""
    cfg = ExperimentConfig()
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigKeyError(line, "expected key=value, got")
        k, v = line.split("=", 1)
        apply(cfg, k, v)
    for item in overrides:
        if "=" not in item:
            raise ConfigKeyError(item, "expected key=value, got")
        k, v = item.split("=", 1)
        apply(cfg, k, v)
    return validate(cfg)


def load(path, overrides=()) -> ExperimentConfig:
    return parse(Path(path).read_text(), overrides)
