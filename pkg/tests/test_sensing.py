#!/usr/bin/env python3
"""
Tests for the multi-rate encoder: budget math, nested matrices and encoding
"""

import math
import random
from fractions import Fraction

import pytest
import torch

from src.data.pyramid_data import ImageTensor
from src.sensing import (
    RIP_CONSTANT,
    MeasurementSet,
    SensingConfig,
    base_dim_for_cr,
    beta_upper_bound,
    build_matrices,
    derive_stage_dims,
    encode,
    encode_batch,
    parse_beta,
    rip_lower_bound,
    slice_measurements,
)
from src.utils.errors import ConfigError


def random_image(config: SensingConfig, generator: torch.Generator) -> torch.Tensor:
    side = config.side
    return torch.rand((config.channels, side, side), generator=generator) * 2 - 1


def test_stage_dims_double_with_beta_two():
    """beta = 2 gives [m, 2m, 4m, 8m]"""
    for m in (1, 7, 64, 128):
        assert derive_stage_dims(m, 2, 4) == [m, 2 * m, 4 * m, 8 * m]


def test_stage_dims_single_stage_and_beta_four():
    assert derive_stage_dims(17, "3/2", 1) == [17]
    assert derive_stage_dims(3, 4, 3) == [3, 12, 48]


def test_stage_dims_exact_fraction_floor():
    """floor is taken on the exact rational beta^(i-1) * m"""
    assert derive_stage_dims(10, 1.5, 3) == [10, 15, 22]
    assert derive_stage_dims(10, "3/2", 3) == [10, 15, 22]
    assert parse_beta(1.1) == Fraction(11, 10)


def test_stage_dims_rejects_invalid_budgets():
    with pytest.raises(ConfigError):
        derive_stage_dims(10, 5, 3)
    with pytest.raises(ConfigError):
        derive_stage_dims(10, 1, 3)
    with pytest.raises(ConfigError):
        derive_stage_dims(1, "11/10", 3)  # [1, 1, 1] is not strictly increasing
    with pytest.raises(ConfigError):
        derive_stage_dims(128, 2, 4, signal_dim=512)


def test_stage_dims_monotone_in_beta():
    """A larger beta never yields fewer measurements at any stage"""
    for m in (16, 40, 100):
        low = derive_stage_dims(m, "3/2", 4)
        high = derive_stage_dims(m, 2, 4)
        assert all(h >= l for h, l in zip(high, low))


def test_beta_upper_bound_is_four():
    assert beta_upper_bound() == 4
    assert isinstance(beta_upper_bound(), Fraction)
    with pytest.raises(ConfigError):
        beta_upper_bound(sparsity_ratio_constant=False)


def test_sensing_config_rejects_beta_five():
    with pytest.raises(ConfigError):
        SensingConfig(base_dim=8, beta=5, stages=2, signal_dim=256)


def test_rip_lower_bound():
    assert RIP_CONSTANT == 0.28
    assert rip_lower_bound(100, 4096) == 104
    assert rip_lower_bound(100, 100 * math.e) == 28
    with pytest.raises(ConfigError):
        rip_lower_bound(100, 100)
    with pytest.raises(ConfigError):
        rip_lower_bound(0, 100)


def test_base_dim_for_cr():
    """CR 4 on a 64x64 image with beta 2 and 4 stages puts m at 128"""
    assert base_dim_for_cr(4, 2, 4, 4096) == 128
    config = SensingConfig(base_dim_for_cr(5, 2, 4, 4096), 2, 4, 4096)
    assert abs(float(config.compression_ratios()[-1]) - 5) < 0.1


def test_matrices_are_deterministic_and_nested():
    config = SensingConfig(base_dim=6, beta=2, stages=3, signal_dim=64, seed=11)
    first, second = build_matrices(config), build_matrices(config)
    assert torch.equal(first.full_matrix, second.full_matrix)
    assert first.full_matrix.shape == (24, 64)
    for stage, rows in enumerate(config.stage_dims, start=1):
        phi = first.phi(stage)
        assert phi.shape == (rows, 64)
        assert torch.equal(phi, first.full_matrix[:rows])

    other = build_matrices(SensingConfig(base_dim=6, beta=2, stages=3, signal_dim=64, seed=12))
    assert not torch.equal(first.full_matrix, other.full_matrix)


def test_matrix_variance_matches_final_rows():
    config = SensingConfig(base_dim=64, beta=2, stages=2, signal_dim=1024, seed=3)
    matrix = build_matrices(config).full_matrix
    assert abs(matrix.var().item() * 128 - 1.0) < 0.05


def test_zero_image_gives_zero_measurements():
    config = SensingConfig(base_dim=4, beta=2, stages=2, signal_dim=64)
    measurements = encode(torch.zeros(1, 8, 8), build_matrices(config))
    assert torch.count_nonzero(measurements.final) == 0


def test_encode_property_trials():
    """Prefix nesting, linearity and agreement with an explicit matrix multiply"""
    rng = random.Random(0)
    generator = torch.Generator().manual_seed(0)
    trials, seed = 0, 0
    while trials < 1000:
        seed += 1
        k = rng.randint(1, 3)
        side = 8 * 2 ** rng.randint(0, 1)
        channels = rng.choice((1, 3))
        beta = rng.choice(("3/2", "2", "4"))
        m = rng.randint(2, 5)
        try:
            config = SensingConfig(m, beta, k, side * side, channels, seed=seed)
        except ConfigError:
            continue
        trials += 1
        matrices = build_matrices(config)
        x1, x2 = random_image(config, generator), random_image(config, generator)
        y1 = encode(x1, matrices)

        vectors = y1.vectors
        for i in range(len(vectors)):
            for j in range(i, len(vectors)):
                assert torch.equal(vectors[i], vectors[j][..., : config.stage_dims[i]])

        explicit = (x1.reshape(channels, -1).double() @ matrices.full_matrix.double().t()).float()
        assert torch.allclose(y1.final, explicit, rtol=1e-5, atol=1e-5)

        a, b = rng.uniform(-1, 1), rng.uniform(-1, 1)
        combined = encode(a * x1 + b * x2, matrices).final
        expected = a * y1.final + b * encode(x2, matrices).final
        assert torch.allclose(combined, expected, rtol=1e-5, atol=1e-4)


def test_encode_batch_matches_single_encode():
    config = SensingConfig(base_dim=5, beta=2, stages=2, signal_dim=256, channels=3, seed=2)
    matrices = build_matrices(config)
    batch = torch.rand(4, 3, 16, 16) * 2 - 1
    y = encode_batch(batch, matrices)
    assert y.shape == (4, 3, 10)
    for n in range(4):
        assert torch.allclose(y[n], encode(ImageTensor(batch[n]), matrices).final)


def test_encode_rejects_shape_mismatch():
    config = SensingConfig(base_dim=4, beta=2, stages=2, signal_dim=64)
    with pytest.raises(ConfigError):
        encode(torch.zeros(1, 16, 16), build_matrices(config))
    with pytest.raises(ConfigError):
        encode_batch(torch.zeros(1, 3, 8, 8), build_matrices(config))


def test_slice_measurements():
    config = SensingConfig(base_dim=4, beta=2, stages=3, signal_dim=256)
    measurements = encode(torch.rand(1, 16, 16) * 2 - 1, build_matrices(config))
    assert torch.equal(slice_measurements(measurements, 3), measurements.final)
    assert slice_measurements(measurements, 2).shape[-1] == 8

    twice = slice_measurements(slice_measurements(measurements, 3), 1, config.stage_dims)
    assert torch.equal(twice, slice_measurements(measurements, 1))
    with pytest.raises(ConfigError):
        slice_measurements(measurements.final, 2)
    with pytest.raises(ConfigError):
        slice_measurements(measurements, 4)


def test_truncated_measurement_set_keeps_complete_stages():
    config = SensingConfig(base_dim=4, beta=2, stages=3, signal_dim=256)
    measurements = encode(torch.rand(1, 16, 16) * 2 - 1, build_matrices(config))
    truncated = measurements.truncated(10)
    assert isinstance(truncated, MeasurementSet)
    assert truncated.available_length == 10
    assert [v.shape[-1] for v in truncated.vectors] == [4, 8]
    with pytest.raises(ConfigError):
        slice_measurements(truncated, 3)
