"""
Training objectives of one stage: pixel-wise Euclidean loss, adversarial losses
and their weighted sum
"""

from dataclasses import dataclass
from typing import Union

import torch

from src.utils.errors import ConfigError

PROBABILITY_EPS = 1e-7
EUCLIDEAN_FORMS = ("mse", "norm")

Scalar = Union[torch.Tensor, float]


@dataclass(frozen=True)
class LossWeights:
    """lambda_adv and lambda_euc of L_total, plus the Euclidean form"""

    lambda_adv: float = 1e-3
    lambda_euc: float = 1.0
    euclidean_form: str = "mse"

    def __post_init__(self):
        if self.lambda_adv < 0 or self.lambda_euc < 0:
            raise ConfigError(f"Loss weights must be non-negative, got {self.lambda_adv}, {self.lambda_euc}")
        if self.lambda_adv == 0 and self.lambda_euc == 0:
            raise ConfigError("lambda_adv and lambda_euc cannot both be zero")
        if self.euclidean_form not in EUCLIDEAN_FORMS:
            raise ConfigError(f"loss.euclidean_form must be one of {EUCLIDEAN_FORMS}, got {self.euclidean_form!r}")


def euclidean_loss(x_h: torch.Tensor, x_g: torch.Tensor, form: str = "mse") -> torch.Tensor:
    """
    Reconstruction loss between generated and ground-truth images

    Args:
        x_h: Generated images, (B, C, H, W) or (C, H, W)
        x_g: Ground truth of the same shape
        form: "mse" = mean over the batch of per-image mean squared error;
              "norm" = mean over the batch of per-image l2 norms

    Returns:
        Non-negative scalar tensor
    """
    if x_h.shape != x_g.shape:
        raise ConfigError(f"Shape mismatch: {tuple(x_h.shape)} vs {tuple(x_g.shape)}")
    if x_h.dim() == 3:
        x_h, x_g = x_h.unsqueeze(0), x_g.unsqueeze(0)

    diff = (x_h - x_g).flatten(1)
    if form == "mse":
        return diff.pow(2).mean(dim=1).mean()
    if form == "norm":
        return diff.norm(dim=1).mean()
    raise ConfigError(f"Unknown Euclidean form {form!r}")


def _clamp(p: torch.Tensor) -> torch.Tensor:
    return p.clamp(PROBABILITY_EPS, 1.0 - PROBABILITY_EPS)


def discriminator_loss(d_real: torch.Tensor, d_fake: torch.Tensor) -> torch.Tensor:
    """-mean(log D(real)) - mean(log(1 - D(fake))), probabilities clamped to [eps, 1 - eps]"""
    return -torch.log(_clamp(d_real)).mean() - torch.log(1.0 - _clamp(d_fake)).mean()


def generator_adv_loss(d_fake: torch.Tensor) -> torch.Tensor:
    """Non-saturating adversarial loss of the generator: -mean(log D(G))"""
    return -torch.log(_clamp(d_fake)).mean()


def total_loss(euc: Scalar, adv: Scalar, weights: LossWeights) -> Scalar:
    """lambda_adv * adv + lambda_euc * euc"""
    return weights.lambda_adv * adv + weights.lambda_euc * euc
