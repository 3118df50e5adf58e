"""Run configuration, stored as JSON.

Every key of :class:`RunConfig` may appear in the file; unknown keys are
rejected. ``"bits": "W2A4"`` is accepted as shorthand for ``weight_bits``
and ``act_bits``. The distillation weight is written as ``lambda``.
"""
from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .diffusion import TrainConfig
from .omq import SELECTIONS
from .trd import DistillConfig


class ConfigError(ValueError):
    pass


_WA = re.compile(r"^W(\d+)A(\d+)$", re.IGNORECASE)


@dataclass
class RunConfig:
    weight_bits: int = 2
    act_bits: int = 4
    group_size: int | str = "auto"
    plus_fraction: float = 0.0
    selection: str = "kurtosis"
    omq: bool = True
    trd: bool = True
    distill_metric: str = "kl"
    smooth_steps: int = 1
    lam: float = 100.0
    temperature: float = 1.0
    seed: int = 0
    eval_seeds: int = 5
    eval_batch: int = 256
    T: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.02
    dataset_size: int = 10_000
    dataset_sigma: float = 0.05
    hidden: int = 64
    temb_dim: int = 16
    fp_steps: int = 4000
    fp_batch: int = 256
    fp_lr: float = 2e-3
    ft_steps: int = 600
    ft_batch: int = 64
    ft_lr: float = 1e-3
    scale_lr: float = 1e-4
    lora_rank: int = 4
    train_trajectories: int = 4
    calib_batch: int = 64
    calib_samples: int = 64
    act_percentile: float = 99.9
    plant_outliers: bool = False
    outlier_fraction: float = 0.1
    outlier_sigma: float = 8.0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not 2 <= self.weight_bits <= 15:
            raise ConfigError("weight_bits must be in [2, 15]")
        if not 1 <= self.act_bits <= 16:
            raise ConfigError("act_bits must be in [1, 16]")
        if self.group_size != "auto" and (not isinstance(self.group_size, int) or self.group_size < 1):
            raise ConfigError("group_size must be 'auto' or a positive integer")
        if not 0.0 <= self.plus_fraction <= 0.5:
            raise ConfigError("plus_fraction must be in [0, 0.5]")
        if self.selection not in SELECTIONS:
            raise ConfigError(f"selection must be one of {SELECTIONS}")
        if self.distill_metric not in ("kl", "l2", "none"):
            raise ConfigError("distill_metric must be kl, l2 or none")
        if self.smooth_steps < 0 or self.smooth_steps >= self.T:
            raise ConfigError("smooth_steps must be in [0, T)")
        if self.lam < 0 or self.temperature <= 0:
            raise ConfigError("lambda must be >= 0 and temperature > 0")
        for name in ("eval_seeds", "eval_batch", "T", "dataset_size", "hidden", "temb_dim",
                     "fp_batch", "ft_batch", "lora_rank", "train_trajectories",
                     "calib_batch", "calib_samples"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.fp_steps < 0 or self.ft_steps < 0:
            raise ConfigError("step counts must be non-negative")
        if self.temb_dim % 2:
            raise ConfigError("temb_dim must be even")

    @property
    def wa(self) -> str:
        return f"W{self.weight_bits}A{self.act_bits}"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        if "bits" in d:
            m = _WA.match(str(d.pop("bits")))
            if not m:
                raise ConfigError("bits must look like 'W2A4'")
            d.setdefault("weight_bits", int(m.group(1)))
            d.setdefault("act_bits", int(m.group(2)))
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def loads(cls, text: str) -> "RunConfig":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON config: {exc}") from None
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(d)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.loads(Path(path).read_text(encoding="utf-8"))

    def save(self, path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    def distill(self) -> DistillConfig:
        return DistillConfig(self.smooth_steps, self.lam, self.temperature)

    def fp_train_config(self) -> TrainConfig:
        return TrainConfig(steps=self.fp_steps, batch_size=self.fp_batch, lr=self.fp_lr, seed=self.seed)

    def finetune_config(self) -> TrainConfig:
        return TrainConfig(
            steps=self.ft_steps,
            lr=self.ft_lr,
            seed=self.seed,
            weight_bits=self.weight_bits,
            act_bits=self.act_bits,
            lora_rank=self.lora_rank,
            distill=self.distill(),
            distill_metric=self.distill_metric if self.trd else "none",
            scale_lr=self.scale_lr,
            finetune_batch=self.ft_batch,
            train_trajectories=self.train_trajectories,
        )
