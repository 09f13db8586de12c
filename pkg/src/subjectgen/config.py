"""Run configuration: one JSON document validated strictly.

Every CLI command reads the same schema; flags override file values. The
defaults here reproduce the standard setup end to end, so `--config` is
optional everywhere.
"""

from __future__ import annotations

import json
from pathlib import Path

from pydantic import BaseModel, ConfigDict, Field

from .data import SyntheticSpec
from .guidance import GuidanceConfig
from .model import ModelConfig
from .schedule import NoiseSchedule, make_linear_schedule
from .training import TrainConfig


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ModelSection(_Strict):
    image_size: int = 32
    in_channels: int = 3
    base_channels: int = 32
    channel_mults: tuple[int, ...] = (1, 2, 3)
    heads: int = 4

    def build(self) -> ModelConfig:
        return ModelConfig(image_size=self.image_size,
                           in_channels=self.in_channels,
                           base_channels=self.base_channels,
                           channel_mults=self.channel_mults,
                           heads=self.heads)


class ScheduleSection(_Strict):
    num_timesteps: int = Field(default=1000, ge=2)
    beta_start: float = Field(default=1e-4, gt=0)
    beta_end: float = Field(default=0.02, gt=0)

    def build(self) -> NoiseSchedule:
        return make_linear_schedule(self.num_timesteps, self.beta_start,
                                    self.beta_end)


class TrainSection(_Strict):
    learning_rate: float = Field(default=2e-5, gt=0)
    steps: int = Field(default=100, ge=0)
    batch_size: int = Field(default=6, ge=1)
    p_t: float = Field(default=0.2, ge=0.0, le=1.0)
    partition_mode: str = "decoder_only"
    seed: int = 0

    def build(self) -> TrainConfig:
        return TrainConfig(learning_rate=self.learning_rate, steps=self.steps,
                           batch_size=self.batch_size, p_t=self.p_t,
                           partition_mode=self.partition_mode, seed=self.seed)


class PretrainSection(_Strict):
    learning_rate: float = Field(default=1e-3, gt=0)
    steps: int = Field(default=3000, ge=0)
    batch_size: int = Field(default=8, ge=1)
    seed: int = 0

    def build(self) -> TrainConfig:
        return TrainConfig(learning_rate=self.learning_rate, steps=self.steps,
                           batch_size=self.batch_size, partition_mode="full",
                           seed=self.seed)


class GuidanceSection(_Strict):
    tau: int = 30
    n_steps: int = Field(default=50, ge=1)
    scale: float = Field(default=7.5, ge=0.0)
    inner_steps: int = Field(default=10, ge=1)
    tol: float = Field(default=1e-5, gt=0)

    def build(self) -> GuidanceConfig:
        return GuidanceConfig(tau=self.tau, n_steps=self.n_steps,
                              scale=self.scale)


class ProviderSection(_Strict):
    kind: str = "toy"                  # file | toy | remote
    path: str | None = None            # file provider
    url: str | None = None             # remote provider
    timeout: float = Field(default=30.0, gt=0)
    retries: int = Field(default=2, ge=0)


class VLMSection(_Strict):
    stub: bool = True
    url: str | None = None
    model: str = "default"
    timeout: float = Field(default=60.0, gt=0)
    retries: int = Field(default=2, ge=0)


class DatasetSection(_Strict):
    shapes: tuple[str, ...] | None = None
    colors: tuple[str, ...] | None = None
    textures: tuple[str, ...] | None = None
    backgrounds: tuple[str, ...] | None = None
    image_size: int = 32
    count: int = Field(default=256, ge=1)
    verbosity: str = "detailed"
    placeholder_rate: float = Field(default=0.25, ge=0.0, le=1.0)

    def build(self) -> SyntheticSpec:
        kwargs = {"image_size": self.image_size, "count": self.count,
                  "verbosity": self.verbosity,
                  "placeholder_rate": self.placeholder_rate}
        for name in ("shapes", "colors", "textures", "backgrounds"):
            value = getattr(self, name)
            if value is not None:
                kwargs[name] = value
        return SyntheticSpec(**kwargs)


class RunConfig(_Strict):
    seed: int = 0
    model: ModelSection = ModelSection()
    schedule: ScheduleSection = ScheduleSection()
    train: TrainSection = TrainSection()
    pretrain: PretrainSection = PretrainSection()
    guidance: GuidanceSection = GuidanceSection()
    provider: ProviderSection = ProviderSection()
    vlm: VLMSection = VLMSection()
    dataset: DatasetSection = DatasetSection()


def load_config(path=None) -> RunConfig:
    """Config from a JSON file; defaults when no path is given."""
    if path is None:
        return RunConfig()
    doc = json.loads(Path(path).read_text())
    return RunConfig.model_validate(doc)


def apply_overrides(cfg: RunConfig, **flags) -> RunConfig:
    """Non-None flag values override the corresponding config fields."""
    updates: dict[str, dict] = {}

    def put(section: str, field: str, value):
        if value is not None:
            updates.setdefault(section, {})[field] = value

    put("train", "steps", flags.get("steps"))
    put("train", "p_t", flags.get("p_t"))
    put("train", "partition_mode", flags.get("partition"))
    put("guidance", "tau", flags.get("tau"))
    put("guidance", "scale", flags.get("scale"))
    put("provider", "kind", flags.get("provider"))
    put("provider", "path", flags.get("provider_path"))
    put("provider", "url", flags.get("provider_url"))
    if flags.get("stub_vlm") is not None:
        put("vlm", "stub", flags.get("stub_vlm"))
    doc = cfg.model_dump()
    if flags.get("seed") is not None:
        doc["seed"] = flags["seed"]
    for section, fields in updates.items():
        doc[section].update(fields)
    return RunConfig.model_validate(doc)
