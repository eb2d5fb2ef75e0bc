"""Seeded CORAL-vs-baseline comparison on the long-tailed ring of Gaussians."""

import math
from dataclasses import dataclass, replace

from coral import rng as rngs
from coral.denoiser import ArchConfig
from coral.evaluation import extract_latents, latent_separation, per_class_precision_recall
from coral.longtail_data import class_counts, make_ring_gaussians
from coral.sampling import SampleConfig, sample_per_class
from coral.schedules import ContrastiveWeightConfig
from coral.training import TrainConfig, train


@dataclass(frozen=True)
class DirectionalSetup:
    classes: int = 8
    head_count: int = 2000
    rho: float = 0.01
    radius: float = 3.0
    sigma: float = 0.5
    dim: int = 2
    hidden: int = 64
    bottleneck: int = 16
    proj_dim: int = 8
    T: int = 100
    steps: int = 5000
    batch_size: int = 128
    lr: float = 1e-3
    w: float = 0.01
    tau_sc: float = 0.12
    tau_r: float = 0.8
    omega: float = 0.6
    reduction: str = "mean"
    n_per_class: int = 200
    latent_k: int = 10
    knn_k: int = 3
    latent_condition: str = "label"


@dataclass
class ArmResult:
    tail_purity: float
    tail_precision: float
    tail_recall: float
    silhouette: float | None
    final_l_diff: float


def run_arm(setup: DirectionalSetup, seed: int, w: float) -> ArmResult:
    counts = class_counts(setup.head_count, setup.rho, setup.classes)
    data = make_ring_gaussians(setup.classes, counts, setup.radius, setup.sigma, setup.dim,
                               rngs.stream(seed, "data"))
    arch = ArchConfig(dim=setup.dim, num_classes=setup.classes, hidden=setup.hidden,
                      bottleneck=setup.bottleneck, proj_dim=setup.proj_dim)
    cfg = TrainConfig(steps=setup.steps, batch_size=setup.batch_size, lr=setup.lr, T=setup.T, seed=seed,
                      contrastive=ContrastiveWeightConfig(w, setup.tau_r), tau_sc=setup.tau_sc,
                      reduction=setup.reduction)
    model, log, _ = train(cfg, data, arch)
    schedule = cfg.schedule()
    t_latent = int(math.floor(0.05 * setup.T))
    latents = extract_latents(model, data, t_latent, schedule, rngs.stream(seed, "latents"),
                              setup.latent_condition)
    purity, sil = latent_separation(latents, setup.latent_k, setup.classes)
    gen = sample_per_class(model, schedule, SampleConfig(omega=setup.omega, n_per_class=setup.n_per_class,
                                                         seed=seed))
    tail = per_class_precision_recall(data, gen, setup.knn_k)[-1]
    return ArmResult(purity[-1], tail[0], tail[1], sil, log.records[-1].l_diff)


def compare(setup: DirectionalSetup, seeds=(0, 1, 2)) -> list[tuple[int, ArmResult, ArmResult]]:
    """(seed, coral, baseline) per seed; the baseline is the same setup with w = 0."""
    return [(s, run_arm(setup, s, setup.w), run_arm(replace(setup, w=0.0), s, 0.0)) for s in seeds]
