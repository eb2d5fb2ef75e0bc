"""Contrastive latent regularization for long-tailed diffusion at desk scale."""

from coral.schedules import (
    ContrastiveWeightConfig,
    NoiseSchedule,
    contrastive_weight,
    make_linear_schedule,
)

__all__ = [
    "ContrastiveWeightConfig",
    "NoiseSchedule",
    "contrastive_weight",
    "make_linear_schedule",
]
