"""CORAL training loop: noised batches, label dropout, SupCon on bottleneck projections, Adam."""

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from coral import rng as rngs
from coral.denoiser import (
    NULL_LABEL,
    ArchConfig,
    DenoiserModel,
    NonFiniteError,
    backward,
    forward_batch,
    init_model,
    zeros_like_params,
)
from coral.forward_process import q_sample, sample_timesteps
from coral.longtail_data import LabeledDataset
from coral.losses import diffusion_loss, diffusion_loss_grad, supcon_loss
from coral.schedules import ContrastiveWeightConfig, contrastive_weight, make_linear_schedule


@dataclass
class TrainConfig:
    steps: int = 5000
    batch_size: int = 128
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    p_uncond: float = 0.1
    contrastive: ContrastiveWeightConfig = field(default_factory=ContrastiveWeightConfig)
    tau_sc: float = 0.12
    T: int = 100
    beta_min: float = 1e-4
    beta_max: float = 0.02
    seed: int = 0
    reduction: str = "mean"
    # "batch_mean": scale by mean of lambda(t_i); "shared_t": one t per batch
    lambda_mode: str = "batch_mean"
    # False drops the contrastive forward/backward entirely (plain conditional DDPM)
    contrastive_branch: bool = True

    def __post_init__(self):
        if not (0.0 <= self.p_uncond < 1.0):
            raise ValueError("p_uncond must lie in [0, 1)")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.lambda_mode not in ("batch_mean", "shared_t"):
            raise ValueError(f"unknown lambda_mode {self.lambda_mode!r}")
        if self.reduction not in ("mean", "sum"):
            raise ValueError(f"unknown reduction {self.reduction!r}")

    def schedule(self):
        return make_linear_schedule(self.T, self.beta_min, self.beta_max)


@dataclass
class StepRecord:
    step: int
    l_diff: float
    l_con: float
    lambda_bar: float
    total: float
    grad_norm: float
    wall_time: float


@dataclass
class TrainLog:
    records: list[StepRecord] = field(default_factory=list)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "l_diff", "l_con", "lambda_bar", "grad_norm"])
            for r in self.records:
                w.writerow([r.step, repr(r.l_diff), repr(r.l_con), repr(r.lambda_bar), repr(r.grad_norm)])


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0


def init_adam(model: DenoiserModel) -> AdamState:
    return AdamState(zeros_like_params(model), zeros_like_params(model), 0)


def adam_update(params: dict, grads: dict, state: AdamState, lr: float,
                betas=(0.9, 0.999), eps: float = 1e-8) -> tuple[dict, AdamState]:
    """Bias-corrected Adam on a dict of arrays. Inputs are left untouched."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"gradient of {name}", f"optimizer step {state.step + 1}")
    b1, b2 = betas
    step = state.step + 1
    c1 = 1.0 - b1**step
    c2 = 1.0 - b2**step
    new_params, m_new, v_new = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * g * g
        new_params[name] = p - lr * (m / c1) / (np.sqrt(v / c2) + eps)
        m_new[name], v_new[name] = m, v
    return new_params, AdamState(m_new, v_new, step)


def adam_step(model: DenoiserModel, grads, state: AdamState, lr: float,
              betas=(0.9, 0.999), eps: float = 1e-8) -> tuple[DenoiserModel, AdamState]:
    params, state = adam_update(model.params, grads, state, lr, betas, eps)
    new_model = DenoiserModel(model.arch, params)
    new_model.check_shapes()
    return new_model, state


def label_dropout(labels, p_uncond: float, rng: np.random.Generator) -> np.ndarray:
    """Replace each label by NULL_LABEL with probability ``p_uncond``."""
    if not (0.0 <= p_uncond < 1.0):
        raise ValueError("p_uncond must lie in [0, 1)")
    labels = np.asarray(labels, dtype=np.int64)
    drop = rng.random(labels.shape) < p_uncond
    return np.where(drop, NULL_LABEL, labels)


def train_step(model, state, config: TrainConfig, data: LabeledDataset, schedule, step: int):
    """One optimizer step. Randomness is keyed by (seed, step) so runs can be split and resumed."""
    rng = rngs.stream(config.seed, "train", step)
    B = config.batch_size
    idx = rng.integers(0, data.n_total, size=B)
    x0 = data.samples[idx].astype(np.float64)
    y = data.labels[idx]
    if config.lambda_mode == "shared_t":
        t = np.full(B, sample_timesteps(1, schedule.T, rng)[0])
    else:
        t = sample_timesteps(B, schedule.T, rng)
    eps = rng.standard_normal(x0.shape)
    x_t = q_sample(x0, t, eps, schedule)
    y_in = label_dropout(y, config.p_uncond, rng)

    trace = forward_batch(model, x_t, t, y_in)
    l_diff = diffusion_loss(eps, trace.eps_hat)
    d_eps = diffusion_loss_grad(eps, trace.eps_hat)
    d_z = None
    l_con = 0.0
    lam_bar = 0.0
    if config.contrastive_branch:
        lam_bar = float(np.mean(contrastive_weight(config.contrastive, t, schedule.T)))
        # contrastive loss always sees the unmasked labels
        res = supcon_loss(trace.z, y, config.tau_sc, config.reduction)
        l_con = res.loss
        d_z = lam_bar * res.grad
    total = l_diff + lam_bar * l_con
    if not np.isfinite(total):
        raise NonFiniteError("loss", f"optimizer step {step}")
    grads = backward(model, trace, d_eps, d_z)
    gnorm = float(np.sqrt(sum(np.sum(g * g) for g in grads.values())))
    model, state = adam_step(model, grads, state, config.lr, (config.beta1, config.beta2), config.adam_eps)
    return model, state, (l_diff, l_con, lam_bar, total, gnorm)


def train(config: TrainConfig, data: LabeledDataset, arch: ArchConfig,
          model: DenoiserModel | None = None, state: AdamState | None = None,
          until: int | None = None, progress=None) -> tuple[DenoiserModel, TrainLog, AdamState]:
    """Run optimizer steps ``state.step + 1 .. until`` (default ``config.steps``).

    Passing a model and Adam state resumes a previous run; the result is identical to
    an uninterrupted run of the same total length.
    """
    if data.n_total == 0:
        raise ValueError("training dataset is empty")
    if config.batch_size > data.n_total:
        raise ValueError("batch_size exceeds dataset size")
    if arch.dim != data.dim or arch.num_classes != data.num_classes:
        raise ValueError("architecture does not match dataset dim/classes")
    schedule = config.schedule()
    if model is None:
        model = init_model(arch, rngs.stream(config.seed, "init"))
        state = init_adam(model)
    elif state is None:
        state = init_adam(model)
    last = config.steps if until is None else until
    log = TrainLog()
    t_start = time.perf_counter()
    for step in range(state.step + 1, last + 1):
        model, state, (l_diff, l_con, lam, total, gnorm) = train_step(model, state, config, data, schedule, step)
        log.records.append(StepRecord(step, l_diff, l_con, lam, total, gnorm, time.perf_counter() - t_start))
        if progress is not None:
            progress(log.records[-1])
    return model, log, state


def save_train_state(model: DenoiserModel, state: AdamState, path) -> None:
    """Full-precision parameters and optimizer moments for resuming."""
    arrays = {f"p/{k}": v for k, v in model.params.items()}
    arrays.update({f"m/{k}": v for k, v in state.m.items()})
    arrays.update({f"v/{k}": v for k, v in state.v.items()})
    with open(path, "wb") as fh:
        np.savez(fh, step=np.int64(state.step), **arrays)


def load_train_state(path, arch: ArchConfig) -> tuple[DenoiserModel, AdamState]:
    with np.load(Path(path)) as f:
        names = arch.shapes()
        params = {k: f[f"p/{k}"].copy() for k in names}
        m = {k: f[f"m/{k}"].copy() for k in names}
        v = {k: f[f"v/{k}"].copy() for k in names}
        step = int(f["step"])
    model = DenoiserModel(arch, params)
    model.check_shapes()
    return model, AdamState(m, v, step)
