"""Noise-prediction loss, supervised contrastive loss and their CORAL combination."""

from dataclasses import dataclass

import numpy as np


def diffusion_loss(eps: np.ndarray, eps_hat: np.ndarray) -> float:
    """Batch mean of ||eps - eps_hat||^2."""
    eps = np.atleast_2d(eps)
    eps_hat = np.atleast_2d(eps_hat)
    if eps.shape != eps_hat.shape:
        raise ValueError(f"shape mismatch {eps.shape} vs {eps_hat.shape}")
    diff = eps_hat - eps
    return float(np.sum(diff * diff) / eps.shape[0])


def diffusion_loss_grad(eps: np.ndarray, eps_hat: np.ndarray) -> np.ndarray:
    """Gradient of :func:`diffusion_loss` with respect to ``eps_hat``."""
    return 2.0 * (eps_hat - eps) / eps.shape[0]


@dataclass
class SupConResult:
    loss: float
    grad: np.ndarray
    no_positive_pairs: bool
    n_anchors: int


def supcon_loss(z: np.ndarray, labels, tau_sc: float, reduction: str = "mean") -> SupConResult:
    """Supervised contrastive loss over unit-norm rows of ``z``.

    Anchors without a same-class partner in the batch are skipped. ``reduction``
    is ``"mean"`` (average over contributing anchors) or ``"sum"``.
    """
    z = np.asarray(z, dtype=np.float64)
    labels = np.asarray(labels)
    B = z.shape[0]
    if B < 2:
        raise ValueError("supcon_loss needs at least two embeddings")
    if tau_sc <= 0:
        raise ValueError("tau_sc must be positive")
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")

    off_diag = ~np.eye(B, dtype=bool)
    pos = (labels[:, None] == labels[None, :]) & off_diag
    n_pos = pos.sum(axis=1)
    anchors = n_pos > 0
    n_anchors = int(anchors.sum())
    if n_anchors == 0:
        return SupConResult(0.0, np.zeros_like(z), True, 0)

    logits = (z @ z.T) / tau_sc
    logits = np.where(off_diag, logits, -np.inf)
    row_max = logits.max(axis=1, keepdims=True)
    shifted = logits - row_max
    exp = np.exp(shifted)
    denom = exp.sum(axis=1, keepdims=True)
    log_prob = shifted - np.log(denom)
    softmax = exp / denom

    safe_pos = np.maximum(n_pos, 1)
    per_anchor = -np.where(pos, log_prob, 0.0).sum(axis=1) / safe_pos
    scale = 1.0 / n_anchors if reduction == "mean" else 1.0
    weight = np.where(anchors, scale, 0.0)
    loss = float(np.sum(per_anchor * weight))

    # d loss / d logits_ij for anchor row i
    g = (softmax - pos / safe_pos[:, None]) * weight[:, None]
    grad = (g + g.T) @ z / tau_sc
    return SupConResult(loss, grad, False, n_anchors)


def coral_loss(diff: float, con: float, lambda_t: float) -> float:
    if lambda_t < 0:
        raise ValueError("lambda_t must be nonnegative")
    return diff + lambda_t * con
