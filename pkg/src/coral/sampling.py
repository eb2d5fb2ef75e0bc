"""Ancestral DDPM sampling with classifier-free guidance."""

from dataclasses import dataclass

import numpy as np

from coral import rng as rngs
from coral.denoiser import NULL_LABEL, DenoiserModel, NonFiniteError, forward_batch
from coral.longtail_data import LabeledDataset
from coral.schedules import NoiseSchedule


@dataclass(frozen=True)
class SampleConfig:
    omega: float = 0.6
    n_per_class: int = 100
    # "beta": sigma_t^2 = beta_t; "posterior": sigma_t^2 = beta_tilde_t
    sigma_rule: str = "beta"
    seed: int = 0

    def __post_init__(self):
        if self.omega < 0:
            raise ValueError("omega must be >= 0")
        if self.n_per_class < 0:
            raise ValueError("n_per_class must be >= 0")
        if self.sigma_rule not in ("beta", "posterior"):
            raise ValueError(f"unknown sigma_rule {self.sigma_rule!r}")


def cfg_epsilon(eps_cond, eps_uncond, omega: float):
    """(1 + omega) * eps_cond - omega * eps_uncond."""
    return (1.0 + omega) * np.asarray(eps_cond) - omega * np.asarray(eps_uncond)


def ddpm_sample(model: DenoiserModel, schedule: NoiseSchedule, y: int, n: int,
                cfg: SampleConfig, rng: np.random.Generator) -> np.ndarray:
    """Run ``n`` independent reverse chains for class ``y`` and return x_0 as ``[n, dim]``."""
    if not (0 <= y < model.arch.num_classes):
        raise ValueError(f"class {y} outside 0..{model.arch.num_classes - 1}")
    dim = model.arch.dim
    if n == 0:
        return np.zeros((0, dim))
    sigma2 = schedule.beta if cfg.sigma_rule == "beta" else schedule.posterior_variance()
    x = rng.standard_normal((n, dim))
    cond = np.full(n, y)
    null = np.full(n, NULL_LABEL)
    for t in range(schedule.T, 0, -1):
        ts = np.full(n, t)
        eps = forward_batch(model, x, ts, cond).eps_hat
        if cfg.omega != 0.0:
            eps = cfg_epsilon(eps, forward_batch(model, x, ts, null).eps_hat, cfg.omega)
        beta = schedule.beta[t - 1]
        alpha = 1.0 - beta
        mean = (x - beta / np.sqrt(1.0 - schedule.alpha_bar[t - 1]) * eps) / np.sqrt(alpha)
        noise = rng.standard_normal((n, dim)) if t > 1 else 0.0
        x = mean + np.sqrt(sigma2[t - 1]) * noise
        if not np.all(np.isfinite(x)):
            raise NonFiniteError("sampler state", f"t={t}")
    return x


def sample_per_class(model: DenoiserModel, schedule: NoiseSchedule, cfg: SampleConfig) -> LabeledDataset:
    """``cfg.n_per_class`` samples for every class; each class chain uses its own seeded stream."""
    C = model.arch.num_classes
    xs, ys = [], []
    for c in range(C):
        x = ddpm_sample(model, schedule, c, cfg.n_per_class, cfg, rngs.stream(cfg.seed, "sample", c))
        xs.append(x)
        ys.append(np.full(x.shape[0], c))
    return LabeledDataset(np.concatenate(xs).reshape(-1, model.arch.dim), np.concatenate(ys), C)
