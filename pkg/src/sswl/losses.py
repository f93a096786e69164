"""Hybrid training objective: MSE + beta * perceptual + alpha * KL."""
from __future__ import annotations

from dataclasses import dataclass

import torch

from .model import FeatureExtractor, LatentSample


@dataclass(frozen=True)
class LossWeights:
    beta: float = 0.6  # perceptual weight
    alpha: float = 1.0  # KL weight

    def __post_init__(self) -> None:
        for name, value in (("beta", self.beta), ("alpha", self.alpha)):
            if not (value >= 0 and value == value and value != float("inf")):
                raise ValueError(f"{name} must be finite and >= 0, got {value}")


@dataclass
class LossBreakdown:
    """Components kept as 0-dim tensors; total stays differentiable."""

    total: torch.Tensor
    mse_term: torch.Tensor
    perceptual_term: torch.Tensor
    kl_term: torch.Tensor


def mse_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: pred {tuple(pred.shape)} vs target {tuple(target.shape)}")
    return torch.mean((pred - target) ** 2)


def perceptual_loss(
    pred: torch.Tensor, target: torch.Tensor, extractor: FeatureExtractor
) -> torch.Tensor:
    """Per image: squared L2 feature distance summed over the extractor's declared
    layers, each normalized by its feature-element count; then averaged over the
    batch."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: pred {tuple(pred.shape)} vs target {tuple(target.shape)}")
    pred_feats = extractor(pred)
    target_feats = extractor(target)
    per_image = None
    for fp, ft in zip(pred_feats, target_feats):
        numel = fp[0].numel()
        layer = ((fp - ft) ** 2).flatten(1).sum(dim=1) / numel
        per_image = layer if per_image is None else per_image + layer
    assert per_image is not None
    return per_image.mean()


def kl_loss(mu: torch.Tensor, log_var: torch.Tensor) -> torch.Tensor:
    """Batch mean of -1/2 * sum_j (1 + log_var_j - mu_j^2 - exp(log_var_j))."""
    if mu.shape != log_var.shape:
        raise ValueError(f"shape mismatch: mu {tuple(mu.shape)} vs log_var {tuple(log_var.shape)}")
    if not (torch.isfinite(mu).all() and torch.isfinite(log_var).all()):
        raise ValueError("kl_loss requires finite mu and log_var")
    per_sample = -0.5 * (1.0 + log_var - mu**2 - torch.exp(log_var)).sum(dim=-1)
    return per_sample.mean()


def hybrid_loss(
    pred: torch.Tensor,
    target: torch.Tensor,
    latent: LatentSample | None,
    extractor: FeatureExtractor | None,
    weights: LossWeights,
) -> LossBreakdown:
    """Assemble the weighted objective; the extractor is not invoked when beta = 0,
    and the KL term is 0 when there is no latent (bottleneck-off mode)."""
    mse_term = mse_loss(pred, target)
    zero = pred.new_zeros(())
    if weights.beta != 0.0:
        if extractor is None:
            raise ValueError("beta > 0 requires a feature extractor")
        perceptual_term = perceptual_loss(pred, target, extractor)
    else:
        perceptual_term = zero
    kl_term = kl_loss(latent.mu, latent.log_var) if latent is not None else zero
    total = mse_term + weights.beta * perceptual_term + weights.alpha * kl_term
    return LossBreakdown(
        total=total, mse_term=mse_term, perceptual_term=perceptual_term, kl_term=kl_term
    )
