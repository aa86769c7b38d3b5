"""Experiment configuration (strict JSON schema)."""
from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator

from .earlybird import EBConfig
from .taeb import build_region_plan


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DatasetSection(_Strict):
    name: Literal["gauss8", "two_moons", "swiss_roll", "checkerboard"] = "gauss8"
    n_train: int = Field(8000, ge=1)
    n_eval: int = Field(2000, ge=1, le=10_000)
    seed: int = 0


class ModelSection(_Strict):
    hidden_dims: list[int] = Field(default_factory=lambda: [128, 128, 128], min_length=1)
    time_embed_dim: int = Field(32, ge=2)

    @model_validator(mode="after")
    def _check(self):
        if self.time_embed_dim % 2:
            raise ValueError("time_embed_dim must be even")
        if any(h < 1 for h in self.hidden_dims):
            raise ValueError("hidden widths must be positive")
        return self


class ScheduleSection(_Strict):
    T: int = Field(1000, ge=2)
    beta_min: float = Field(1e-4, gt=0)
    beta_max: float = Field(0.02, lt=1)


class EBSection(_Strict):
    epsilon: float = Field(0.1, ge=0)
    queue_len: int = Field(5, ge=2)
    granularity: Literal["epoch", "pseudo_epoch", "iteration"] = "pseudo_epoch"
    pseudo_epoch_iters: int = Field(200, ge=1)
    criterion: Literal["magnitude", "taylor", "random"] = "magnitude"
    rate: float = Field(0.5, ge=0, lt=1)
    max_intervals: int = Field(100, ge=1)
    record_extra: Optional[int] = Field(None, ge=0)


class TAEBSection(_Strict):
    boundaries: list[int] = Field(default_factory=lambda: [240, 440])
    rates: list[float] = Field(default_factory=lambda: [0.3, 0.6, 0.8])
    overlap_frac: float = Field(0.02, ge=0, lt=1)
    # None: every region trains for training.iterations
    budgets: Optional[list[int]] = None


class TrainingSection(_Strict):
    batch_size: int = Field(128, ge=1)
    learning_rate: float = Field(1e-3, gt=0)
    iterations: int = Field(20_000, ge=0)


class SamplingSection(_Strict):
    ddim_steps: int = Field(100, ge=1)
    n_samples: int = Field(2000, ge=1, le=10_000)
    n_projections: int = Field(128, ge=1)


class ExperimentConfig(_Strict):
    version: Literal[1] = 1
    dataset: DatasetSection = Field(default_factory=DatasetSection)
    model: ModelSection = Field(default_factory=ModelSection)
    schedule: ScheduleSection = Field(default_factory=ScheduleSection)
    eb: EBSection = Field(default_factory=EBSection)
    taeb: TAEBSection = Field(default_factory=TAEBSection)
    training: TrainingSection = Field(default_factory=TrainingSection)
    sampling: SamplingSection = Field(default_factory=SamplingSection)
    global_seed: int = 0

    @model_validator(mode="after")
    def _check(self):
        if self.schedule.beta_min > self.schedule.beta_max:
            raise ValueError("beta_min must not exceed beta_max")
        if self.sampling.ddim_steps > self.schedule.T:
            raise ValueError("ddim_steps cannot exceed T")
        self.region_plan()  # raises on bad boundaries/rates/budgets
        return self

    def canonical_json(self):
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))

    def config_hash(self):
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()

    def eb_config(self):
        return EBConfig(**self.eb.model_dump())

    def model_kwargs(self):
        return {"input_dim": 2, "time_embed_dim": self.model.time_embed_dim,
                "hidden_dims": tuple(self.model.hidden_dims)}

    def region_plan(self):
        budgets = self.taeb.budgets
        if budgets is None:
            budgets = self.training.iterations
        return build_region_plan(self.schedule.T, self.taeb.boundaries, self.taeb.rates,
                                 self.taeb.overlap_frac, budgets)

    def eb_plan(self):
        """The single-region plan that plain EB training amounts to."""
        return build_region_plan(self.schedule.T, [], [self.eb.rate], 0.0,
                                 self.training.iterations)


def load_config(path):
    text = Path(path).read_text(encoding="utf-8")
    return ExperimentConfig.model_validate_json(text)


def save_config(cfg, path):
    Path(path).write_text(
        json.dumps(cfg.model_dump(mode="json"), indent=2, sort_keys=True) + "\n",
        encoding="utf-8")
