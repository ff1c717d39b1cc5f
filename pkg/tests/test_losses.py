#!/usr/bin/env python3
"""
Tests for the Euclidean, adversarial and combined stage losses
"""

import math

import pytest
import torch

from src.models.losses import (
    PROBABILITY_EPS,
    LossWeights,
    discriminator_loss,
    euclidean_loss,
    generator_adv_loss,
    total_loss,
)
from src.utils.errors import ConfigError


def test_euclidean_loss_is_zero_on_identical_images():
    x = torch.rand(3, 1, 8, 8)
    assert euclidean_loss(x, x).item() == 0.0
    assert euclidean_loss(x, x, form="norm").item() == 0.0


def test_euclidean_loss_forms():
    x = torch.zeros(2, 1, 2, 2)
    y = torch.ones(2, 1, 2, 2)
    y[1] *= 2
    assert euclidean_loss(x, y).item() == pytest.approx((1 + 4) / 2)
    assert euclidean_loss(x, y, form="norm").item() == pytest.approx((2 + 4) / 2)
    assert euclidean_loss(x[0], y[0]).item() == pytest.approx(1.0)

    with pytest.raises(ConfigError):
        euclidean_loss(x, y[:1])
    with pytest.raises(ConfigError):
        euclidean_loss(x, y, form="l1")


def test_discriminator_loss_at_chance():
    half = torch.full((4,), 0.5)
    assert discriminator_loss(half, half).item() == pytest.approx(2 * math.log(2))


def test_adversarial_losses_are_finite_at_saturation():
    ones, zeros = torch.ones(3), torch.zeros(3)
    assert math.isfinite(discriminator_loss(zeros, ones).item())
    assert generator_adv_loss(zeros).item() == pytest.approx(-math.log(PROBABILITY_EPS), rel=1e-4)
    assert generator_adv_loss(ones).item() == pytest.approx(0.0, abs=1e-6)


def test_total_loss_without_adversarial_term_is_euclidean():
    euc = euclidean_loss(torch.rand(2, 1, 4, 4), torch.rand(2, 1, 4, 4))
    adv = generator_adv_loss(torch.rand(2))
    weights = LossWeights(lambda_adv=0.0, lambda_euc=1.0)
    assert torch.equal(total_loss(euc, adv, weights), euc)

    mixed = total_loss(euc, adv, LossWeights(lambda_adv=0.5, lambda_euc=2.0))
    assert mixed.item() == pytest.approx(0.5 * adv.item() + 2.0 * euc.item())


def test_loss_weight_validation():
    with pytest.raises(ConfigError):
        LossWeights(lambda_adv=-1.0)
    with pytest.raises(ConfigError):
        LossWeights(lambda_adv=0.0, lambda_euc=0.0)
    with pytest.raises(ConfigError):
        LossWeights(euclidean_form="huber")
