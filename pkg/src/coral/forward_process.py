"""Closed-form marginal q(x_t | x_0) used to build training inputs."""

from dataclasses import dataclass

import numpy as np

from coral.schedules import NoiseSchedule


@dataclass
class NoisedBatch:
    x_t: np.ndarray
    t: np.ndarray
    eps: np.ndarray


def q_sample(x0, t, eps, schedule: NoiseSchedule) -> np.ndarray:
    """sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps.

    Works for one vector with a scalar ``t`` or a batch ``[B, dim]`` with ``t`` of shape ``[B]``.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    ab = np.asarray(schedule.abar(t), dtype=np.float64)
    if ab.ndim == 1:
        ab = ab[:, None]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def sample_timesteps(batch: int, T: int, rng: np.random.Generator) -> np.ndarray:
    return rng.integers(1, T + 1, size=batch)


def noise_batch(x0: np.ndarray, schedule: NoiseSchedule, rng: np.random.Generator) -> NoisedBatch:
    """Draw t and eps per row of ``x0`` and form x_t."""
    t = sample_timesteps(x0.shape[0], schedule.T, rng)
    eps = rng.standard_normal(x0.shape)
    return NoisedBatch(x_t=q_sample(x0, t, eps, schedule), t=t, eps=eps)
