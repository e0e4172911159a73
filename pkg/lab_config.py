#!/usr/bin/env python3
"""
lab_config.py - Experiment Configuration for PaCo Lab

Typed, validated configuration models for every stage of the pipeline.
One ExperimentConfig document (JSON, explicit version field) drives a run;
environment variables from .env can redirect output and worker count.

Version: 1.0.0
"""

import json
import logging
import os
from pathlib import Path
from typing import Dict, List, Literal, Optional, Union

from dotenv import find_dotenv, load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from numcore import ConfigError
from toyworld import WorldConstants

logger = logging.getLogger(__name__)

CONFIG_VERSION = "1.0"
CHANNEL_NAMES = ("consistency", "alignment")

# ============================================================================
# SECTIONS
# ============================================================================

class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class WorldConfig(_Section):
    k_id: int = Field(4, ge=1)
    k_st: int = Field(2, ge=0)
    k_ct: int = Field(4, ge=1)
    tau_c: float = Field(0.5, gt=0)
    tau_a: float = Field(0.5, gt=0)

    def constants(self) -> WorldConstants:
        return WorldConstants(**self.model_dump())


class DatasetConfig(_Section):
    """Grid synthesis, pairing and split (defaults reproduce the full-size counts)"""
    prompts: int = Field(708, ge=1)
    grids_per_prompt: int = Field(4, ge=2)
    rows: int = Field(2, ge=1)
    cols: int = Field(2, ge=1)
    set_size: int = Field(4, ge=1)
    resolution: int = Field(64, ge=8)
    noise_scale: float = Field(0.02, ge=0)
    identity_jitter: float = Field(0.1, ge=0)
    cell_drift: float = Field(0.0, ge=0)
    holdout: int = Field(3136, ge=0)
    pair_policy: Literal["extremes", "all"] = "extremes"
    rationale: bool = True
    injected_pairs: int = Field(0, ge=0)

    @model_validator(mode="after")
    def _grid_has_two_cells(self):
        if self.rows * self.cols < 2:
            raise ValueError("a grid needs at least 2 subfigures (rows * cols >= 2)")
        return self

    @property
    def instance_count(self) -> int:
        """prompts * g * m * n * (g - 1)"""
        g = self.grids_per_prompt
        return self.prompts * g * self.rows * self.cols * (g - 1)

    @model_validator(mode="after")
    def _holdout_leaves_training_instances(self):
        if self.rows * self.cols == 4 and self.holdout >= self.instance_count:
            raise ValueError(f"holdout {self.holdout} must be below the instance count {self.instance_count} "
                             f"(prompts * grids_per_prompt * rows * cols * (grids_per_prompt - 1))")
        return self


class ScorerConfig(_Section):
    alpha: float = Field(0.1, ge=0, le=1)
    lr: float = Field(2e-4, gt=0)
    epochs: int = Field(10, ge=0)
    batch_size: int = Field(64, ge=1)
    hidden: int = Field(32, ge=1)
    fast: bool = False


class PolicyConfig(_Section):
    hidden: List[int] = Field(default_factory=lambda: [64, 64])
    prompts: int = Field(64, ge=1)
    lr: float = Field(2e-3, gt=0)
    steps: int = Field(1500, ge=0)
    batch_size: int = Field(32, ge=1)
    identity_jitter: float = Field(0.25, ge=0)
    resolutions: List[int] = Field(default_factory=lambda: [32, 64, 128])

    @field_validator("resolutions")
    @classmethod
    def _resolutions_valid(cls, value: List[int]) -> List[int]:
        if not value or any(d < 8 for d in value):
            raise ValueError("pretraining resolutions must be non-empty and each >= 8")
        return value


class GrpoConfig(_Section):
    group_size: int = Field(16, ge=2)
    conditions_per_epoch: int = Field(6, ge=1)
    clip_eps: float = Field(1e-4, gt=0)
    kl_beta: float = Field(0.0, ge=0)
    noise_a: float = Field(0.7, ge=0)
    sampling_steps: int = Field(10, ge=2)
    sde_steps: List[int] = Field(default_factory=lambda: [1])
    train_resolution: int = Field(64, ge=8)
    eval_resolution: int = Field(128, ge=8)
    taming: bool = True
    taming_threshold: Union[float, Literal["dynamic-mean"]] = 0.2
    lr: float = Field(3e-4, gt=0)
    epochs: int = Field(60, ge=0)
    eval_conditions: int = Field(16, ge=1)
    dominance_eps: float = Field(1e-3, gt=0)
    workers: int = Field(1, ge=1)
    record_wall_clock: bool = False

    @model_validator(mode="after")
    def _sde_steps_in_range(self):
        bad = [k for k in self.sde_steps if not 0 <= k < self.sampling_steps]
        if bad:
            raise ValueError(f"sde_steps {bad} outside 0..{self.sampling_steps - 1}")
        return self


class ChannelConfig(_Section):
    name: Literal["consistency", "alignment"]
    weight: float = 1.0
    backend: Literal["analytic", "scorer"] = "analytic"


def _default_channels() -> List[ChannelConfig]:
    return [ChannelConfig(name="consistency"), ChannelConfig(name="alignment")]


class ExperimentConfig(_Section):
    version: str = CONFIG_VERSION
    seed: int = Field(..., ge=0, lt=2 ** 64)
    out_dir: str = "runs/default"
    world: WorldConfig = Field(default_factory=WorldConfig)
    dataset: DatasetConfig = Field(default_factory=DatasetConfig)
    scorer: ScorerConfig = Field(default_factory=ScorerConfig)
    policy: PolicyConfig = Field(default_factory=PolicyConfig)
    grpo: GrpoConfig = Field(default_factory=GrpoConfig)
    channels: List[ChannelConfig] = Field(default_factory=_default_channels)

    @field_validator("version")
    @classmethod
    def _known_version(cls, value: str) -> str:
        if value != CONFIG_VERSION:
            raise ValueError(f"unsupported config version {value!r} (expected {CONFIG_VERSION!r})")
        return value

    @model_validator(mode="after")
    def _channels_unique(self):
        names = [c.name for c in self.channels]
        if not names:
            raise ValueError("at least one reward channel is required")
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate reward channels: {names}")
        return self

    def channel(self, name: str) -> Optional[ChannelConfig]:
        return next((c for c in self.channels if c.name == name), None)


# ============================================================================
# LOAD / SAVE
# ============================================================================

def load_config(path: Union[str, Path]) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from None
    return parse_config(data, source=str(path))


def parse_config(data: Dict, source: str = "<config>") -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        problems = "; ".join(f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}" for err in e.errors())
        raise ConfigError(f"{source}: {problems}") from None


def dump_config(config: ExperimentConfig) -> str:
    return json.dumps(config.model_dump(mode="json"), indent=2, sort_keys=True) + "\n"


def save_config(config: ExperimentConfig, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dump_config(config))
    return path


def with_overrides(config: ExperimentConfig, seed: Optional[int] = None,
                   out_dir: Optional[str] = None, channels: Optional[List[str]] = None) -> ExperimentConfig:
    """Apply CLI overrides, re-validating the result"""
    data = config.model_dump(mode="json")
    if seed is not None:
        data["seed"] = seed
    if out_dir is not None:
        data["out_dir"] = out_dir
    if channels is not None:
        existing = {c["name"]: c for c in data["channels"]}
        data["channels"] = [existing.get(name, {"name": name}) for name in channels]
    return parse_config(data, source="overrides")


# ============================================================================
# ENVIRONMENT
# ============================================================================

def load_environment() -> Dict[str, str]:
    """Read .env once; returns the PACO_LAB_* settings that are set"""
    load_dotenv(find_dotenv(usecwd=True))
    keys = ("PACO_LAB_OUT", "PACO_LAB_WORKERS", "PACO_LAB_LOG_LEVEL")
    return {k: os.environ[k] for k in keys if os.environ.get(k)}


def apply_environment(config: ExperimentConfig, env: Dict[str, str]) -> ExperimentConfig:
    data = config.model_dump(mode="json")
    if "PACO_LAB_OUT" in env:
        data["out_dir"] = env["PACO_LAB_OUT"]
    if "PACO_LAB_WORKERS" in env:
        try:
            data["grpo"]["workers"] = int(env["PACO_LAB_WORKERS"])
        except ValueError:
            raise ConfigError(f"PACO_LAB_WORKERS must be an integer, got {env['PACO_LAB_WORKERS']!r}") from None
    return parse_config(data, source="environment")
