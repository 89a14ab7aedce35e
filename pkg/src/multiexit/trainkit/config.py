from __future__ import annotations

from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

Strategy = Literal["standard", "joint", "combined_output", "gated_recursive", "layerwise",
                   "separate", "freezeout", "cost_regularized", "local_feedback"]


class ConfigError(ValueError):
    pass


class TrainingConfig(BaseModel):
    """Hyper-parameters for every training strategy.

    Per-exit lists (``exit_weights``) follow the network's early exits in
    order.  ``combine_weights`` and ``cost_weights`` cover the early exits
    followed by the final exit.
    """

    model_config = ConfigDict(extra="forbid")

    strategy: Strategy = "joint"
    epochs: int = Field(20, ge=1)
    batch_size: int = Field(32, ge=1)
    lr: float = Field(0.05, ge=0)
    stage_lrs: list[float] | None = None
    exit_weights: list[float] | None = None
    weight_scheme: Literal["uniform", "linear"] = "uniform"
    base_exit_weight: float = Field(0.3, ge=0)
    combine_mode: Literal["fixed", "trainable", "softmax"] = "softmax"
    combine_weights: list[float] | None = None
    require_convex: bool = False
    freeze_points: list[int] | None = None
    cost_weights: list[float] | None = None
    cost_strength: float = Field(0.0, ge=0)
    feedback_tied: bool = False
    seed: int = 0

    @field_validator("exit_weights")
    @classmethod
    def _nonnegative(cls, v):
        if v is not None and any(a < 0 for a in v):
            raise ValueError("exit weights must be >= 0")
        return v

    @field_validator("stage_lrs")
    @classmethod
    def _rates(cls, v):
        if v is not None and any(a < 0 for a in v):
            raise ValueError("learning rates must be >= 0")
        return v

    @field_validator("cost_weights")
    @classmethod
    def _positive_costs(cls, v):
        if v is not None and any(e <= 0 for e in v):
            raise ValueError("cost weights must be positive")
        return v

    @model_validator(mode="after")
    def _freeze_points(self):
        pts = self.freeze_points
        if pts is not None:
            if any(p <= 0 for p in pts):
                raise ValueError("freeze points must be positive")
            if any(b < a for a, b in zip(pts, pts[1:])):
                raise ValueError("freeze points must be nondecreasing")
        return self

    def alphas(self, num_exits: int) -> list[float]:
        if self.exit_weights is not None:
            if len(self.exit_weights) != num_exits:
                raise ConfigError(f"{len(self.exit_weights)} exit weights for {num_exits} exits")
            return list(self.exit_weights)
        if self.weight_scheme == "linear":
            return [self.base_exit_weight * (k + 1) / num_exits for k in range(num_exits)]
        return [self.base_exit_weight] * num_exits

    def stage_rate(self, i: int) -> float:
        """Initial rate of stage ``i`` (1-based)."""
        if self.stage_lrs is None:
            return self.lr
        return self.stage_lrs[i - 1]
