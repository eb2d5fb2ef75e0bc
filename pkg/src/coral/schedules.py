"""Linear beta schedule and the time-dependent contrastive weight."""

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class NoiseSchedule:
    """Variance schedule for ``T`` diffusion steps.

    ``beta[t - 1]`` is beta_t for t = 1..T. ``alpha_bar`` follows the same
    indexing; use :meth:`abar` for the padded lookup where index 0 is 1.
    """

    T: int
    beta: np.ndarray
    alpha: np.ndarray = field(init=False)
    alpha_bar: np.ndarray = field(init=False)

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=np.float64)
        if beta.ndim != 1 or beta.shape[0] != self.T:
            raise ValueError(f"beta must have length T={self.T}")
        if not np.all((beta > 0) & (beta < 1)):
            raise ValueError("every beta_t must lie in (0, 1)")
        alpha = 1.0 - beta
        alpha_bar = np.cumprod(alpha)
        for name, arr in (("beta", beta), ("alpha", alpha), ("alpha_bar", alpha_bar)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def abar(self, t):
        """alpha_bar at integer step(s) ``t`` in 0..T, with alpha_bar_0 = 1."""
        t = np.asarray(t)
        if np.any(t < 0) or np.any(t > self.T):
            raise ValueError(f"timestep outside 0..{self.T}")
        padded = np.concatenate(([1.0], self.alpha_bar))
        return padded[t]

    def posterior_variance(self) -> np.ndarray:
        """beta_tilde_t = (1 - abar_{t-1}) / (1 - abar_t) * beta_t, t = 1..T."""
        prev = np.concatenate(([1.0], self.alpha_bar[:-1]))
        return (1.0 - prev) / (1.0 - self.alpha_bar) * self.beta


def make_linear_schedule(T: int = 100, beta_min: float = 1e-4, beta_max: float = 0.02) -> NoiseSchedule:
    if T < 1:
        raise ValueError("T must be a positive integer")
    if not (0.0 < beta_min <= beta_max < 1.0):
        raise ValueError("need 0 < beta_min <= beta_max < 1")
    return NoiseSchedule(T=int(T), beta=np.linspace(beta_min, beta_max, int(T)))


@dataclass(frozen=True)
class ContrastiveWeightConfig:
    w: float = 0.01
    tau_r: float = 0.8

    def __post_init__(self):
        if self.tau_r <= 0:
            raise ValueError("tau_r must be positive")
        if self.w < 0:
            raise ValueError("w must be nonnegative")


def contrastive_weight(cfg: ContrastiveWeightConfig, t, T: int):
    """lambda(t) = w * exp((1 - t/T) / tau_r); largest at t = 0, equal to w at t = T.

    Accepts a scalar or an array of timesteps.
    """
    if cfg.tau_r <= 0:
        raise ValueError("tau_r must be positive")
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr < 0) or np.any(t_arr > T):
        raise ValueError(f"timestep outside 0..{T}")
    out = cfg.w * np.exp((1.0 - t_arr / T) / cfg.tau_r)
    return float(out) if out.ndim == 0 else out
