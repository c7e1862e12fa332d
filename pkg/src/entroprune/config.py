"""Solver configuration."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

from .errors import ValidationError


@dataclass(frozen=True)
class SparsifyConfig:
    """Hyperparameters and stopping rules for one layer sparsification.

    `eps_w` must be strictly negative: the entropy term then penalizes
    spread-out channel weights and drives the solution sparse. `eps_l2`
    is the ridge weight on the regression coefficients; 0 is accepted
    (pure least squares) but then the design matrix must be nonsingular.
    """

    eps_w: float = -0.01
    eps_l2: float = 0.01
    outer_tol: float = 1e-8
    max_outer_iters: int = 200
    w_step_tol: float = 1e-9
    max_w_iters: int = 500
    prune_threshold: float = 1e-6
    max_points: int = 50_000
    seed: int = 0

    def __post_init__(self):
        if not (math.isfinite(self.eps_w) and self.eps_w < 0):
            raise ValidationError(f"eps_w must be < 0, got {self.eps_w}")
        if not (math.isfinite(self.eps_l2) and self.eps_l2 >= 0):
            raise ValidationError(f"eps_l2 must be >= 0, got {self.eps_l2}")
        if self.outer_tol <= 0 or self.w_step_tol <= 0:
            raise ValidationError("tolerances must be positive")
        if self.max_outer_iters < 1 or self.max_w_iters < 1:
            raise ValidationError("iteration limits must be positive")
        if self.prune_threshold <= 0:
            raise ValidationError("prune_threshold must be positive")
        if self.max_points < 1:
            raise ValidationError("max_points must be positive")
        if not (0 <= int(self.seed) < 2**64):
            raise ValidationError("seed must fit in an unsigned 64-bit integer")

    def to_dict(self) -> dict:
        return asdict(self)
