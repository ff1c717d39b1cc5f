#!/usr/bin/env python3
"""
Tests for stage training, checkpoints, the pyramid driver and the fusion ablation

Set LAPRAN_SLOW_TESTS=1 to also run the desk-scale runs on MNIST and CIFAR10
(they read the dataset cache under LAPRAN_DATA_DIR).
"""

import math
import os
from dataclasses import replace

import pandas as pd
import pytest
import torch

from src.data.dataset_sources import load_cifar10, load_mnist
from src.data.pyramid_data import pyramid_levels, stack_patches
from src.metrics import evaluate
from src.models.losses import LossWeights
from src.models.ran import ModelConfig, stage_model_specs
from src.models.stage_weights import StageWeights, transfer_weights
from src.reconstructor import CascadeBundle
from src.sensing import SensingConfig, base_dim_for_cr, build_matrices
from src.trainer import (
    TrainConfig,
    ablate_fusion,
    build_optimizer,
    load_checkpoint,
    save_checkpoint,
    stage_seed,
    train_pyramid,
    train_stage,
)
from src.utils.errors import ConfigError, DataError, NumericError

TINY_MODEL = ModelConfig(feature_channels=4, encoder_filters=4, disc_filters=4)

slow = pytest.mark.skipif(not os.getenv("LAPRAN_SLOW_TESTS"), reason="set LAPRAN_SLOW_TESTS=1 to run")


@pytest.fixture
def setup():
    sensing = SensingConfig(base_dim=4, beta=2, stages=2, signal_dim=256, channels=1, seed=3)
    matrices = build_matrices(sensing)
    specs = stage_model_specs(sensing.stage_dims, sensing.channels, TINY_MODEL)
    generator = torch.Generator().manual_seed(0)
    images = torch.rand((8, 1, 16, 16), generator=generator) * 2 - 1
    val = torch.rand((4, 1, 16, 16), generator=generator) * 2 - 1
    return matrices, specs, images, val


def tiny_cfg(**overrides) -> TrainConfig:
    values = dict(batch_size=4, max_epochs=2, learning_rate=1e-3, device="cpu", seed=5)
    values.update(overrides)
    return TrainConfig(**values)


def parameter_names(module_state):
    return [k for k in module_state if not k.endswith(("running_mean", "running_var", "num_batches_tracked"))]


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)
    with pytest.raises(ConfigError):
        TrainConfig(adam_beta1=1.0)
    with pytest.raises(ConfigError):
        TrainConfig(device="tpu")
    with pytest.raises(ConfigError):
        TrainConfig(stages=(0, 1))
    assert TrainConfig(stages=[2, 3]).stages == (2, 3)


def test_stage_seed_is_stable():
    assert stage_seed(0, 1) == 1
    assert stage_seed(1, 2) == 1011
    assert 0 <= stage_seed(2 ** 62, 4) < 2 ** 63


def test_adam_steps_match_hand_computation():
    cfg = TrainConfig(learning_rate=0.1, device="cpu")
    theta = torch.nn.Parameter(torch.tensor([1.0], dtype=torch.float64))
    optimizer = build_optimizer([theta], cfg)
    b1, b2, eps, lr = cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, cfg.learning_rate

    expected, m, v = 1.0, 0.0, 0.0
    for step in (1, 2):
        optimizer.zero_grad()
        (theta ** 2).sum().backward()
        optimizer.step()

        g = 2 * expected
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        expected -= lr * (m / (1 - b1 ** step)) / (math.sqrt(v / (1 - b2 ** step)) + eps)
        assert theta.item() == pytest.approx(expected, rel=1e-10)
        if step == 1:
            # bias-corrected first step moves by exactly lr
            assert theta.item() == pytest.approx(0.9, abs=1e-8)
    assert theta.item() == pytest.approx(0.80041, abs=1e-5)


def test_single_adam_step_is_bounded_by_learning_rate(setup):
    """Inside train_stage, the first Adam update moves every parameter by at most lr"""
    matrices, specs, images, val = setup
    cfg = tiny_cfg(batch_size=8, max_epochs=1)
    init = StageWeights.fresh(specs[0], seed=1)
    checkpoint = train_stage(1, images, val, matrices, init, cfg)

    bound = cfg.learning_rate * 1.01 + 1e-6
    changed = 0
    for part in ("generator", "discriminator"):
        before, after = getattr(init, part), getattr(checkpoint.last_weights, part)
        for name in parameter_names(before):
            delta = (after[name] - before[name]).abs().max().item()
            assert delta <= bound, f"{part}.{name} moved by {delta}"
            changed += delta > 0
    assert changed > 0


def test_training_is_deterministic(setup):
    matrices, specs, images, val = setup
    cfg = tiny_cfg()
    runs = [train_stage(1, images, val, matrices, StageWeights.fresh(specs[0], seed=1), cfg) for _ in range(2)]
    for name, tensor in runs[0].last_weights.named_tensors().items():
        assert torch.allclose(tensor.float(), runs[1].last_weights.named_tensors()[name].float(), atol=1e-6), name
    assert runs[0].history["val_mse"].tolist() == pytest.approx(runs[1].history["val_mse"].tolist())


def test_best_epoch_and_early_stopping(setup):
    matrices, specs, images, val = setup
    cfg = tiny_cfg(max_epochs=6, early_stop_patience=2)
    checkpoint = train_stage(1, images, val, matrices, StageWeights.fresh(specs[0], seed=1), cfg)

    history = checkpoint.history
    assert history["epoch"].tolist() == list(range(1, len(history) + 1))
    assert checkpoint.best_val_mse == pytest.approx(history["val_mse"].min())
    assert checkpoint.best_epoch == int(history["val_mse"].idxmin()) + 1
    if checkpoint.stopped_early:
        assert len(history) == checkpoint.best_epoch + cfg.early_stop_patience
    else:
        assert len(history) == cfg.max_epochs
    assert checkpoint.finished


def test_empty_validation_falls_back_to_training_mse(setup):
    matrices, specs, images, _ = setup
    empty = torch.empty(0, 1, 16, 16)
    checkpoint = train_stage(1, images, empty, matrices, StageWeights.fresh(specs[0], seed=1), tiny_cfg())
    assert checkpoint.history["val_mse"].tolist() == checkpoint.history["train_mse"].tolist()


def test_non_finite_input_raises_numeric_error(setup):
    matrices, specs, images, val = setup
    broken = images.clone()
    broken[0, 0, 0, 0] = float("nan")
    with pytest.raises(NumericError):
        train_stage(1, broken, val, matrices, StageWeights.fresh(specs[0], seed=1), tiny_cfg())


def test_stage_requires_frozen_prerequisites(setup):
    matrices, specs, images, val = setup
    with pytest.raises(DataError):
        train_stage(2, images, val, matrices, StageWeights.fresh(specs[1], seed=1), tiny_cfg())
    with pytest.raises(DataError):
        train_pyramid(images, val, matrices, tiny_cfg(stages=(2,)), TINY_MODEL)
    with pytest.raises(DataError):
        train_stage(1, torch.empty(0, 1, 16, 16), val, matrices, StageWeights.fresh(specs[0]), tiny_cfg())


def test_checkpoint_round_trip(setup, tmp_path):
    matrices, specs, images, val = setup
    stage_dir = str(tmp_path / "stage1")
    checkpoint = train_stage(1, images, val, matrices, StageWeights.fresh(specs[0], seed=1), tiny_cfg(),
                             stage_dir=stage_dir, config_hash="0123456789ab")

    loaded = load_checkpoint(stage_dir)
    assert (loaded.stage, loaded.epoch, loaded.best_epoch) == (1, checkpoint.epoch, checkpoint.best_epoch)
    assert loaded.best_val_mse == checkpoint.best_val_mse
    assert loaded.config == checkpoint.config
    pd.testing.assert_frame_equal(loaded.history, checkpoint.history, check_dtype=False)
    for name, tensor in checkpoint.weights.named_tensors().items():
        assert torch.equal(loaded.weights.named_tensors()[name], tensor)
    for name, tensor in checkpoint.last_weights.named_tensors().items():
        assert torch.equal(loaded.last_weights.named_tensors()[name], tensor)

    metrics = (tmp_path / "stage1" / "metrics.csv").read_text().splitlines()
    assert metrics[0] == "# config_hash=0123456789ab"
    assert metrics[1].startswith("epoch,train_mse,val_mse")


def test_resume_matches_uninterrupted_training(setup, tmp_path):
    matrices, specs, images, val = setup
    init = StageWeights.fresh(specs[0], seed=1)
    full = train_stage(1, images, val, matrices, init, tiny_cfg(max_epochs=4))

    stage_dir = str(tmp_path / "stage1")
    train_stage(1, images, val, matrices, init, tiny_cfg(max_epochs=2), stage_dir=stage_dir)
    resumed = train_stage(1, images, val, matrices, init, tiny_cfg(max_epochs=4),
                          resume=load_checkpoint(stage_dir), stage_dir=stage_dir)

    assert resumed.epoch == 4
    assert resumed.history["epoch"].tolist() == [1, 2, 3, 4]
    assert resumed.history["val_mse"].tolist() == pytest.approx(full.history["val_mse"].tolist(), rel=1e-5)
    for name, tensor in full.last_weights.named_tensors().items():
        assert torch.allclose(resumed.last_weights.named_tensors()[name].float(), tensor.float(), atol=1e-5), name

    again = train_stage(1, images, val, matrices, init, tiny_cfg(max_epochs=4), resume=resumed)
    assert again is resumed


def test_pyramid_transfers_weights_and_freezes_earlier_stages(setup, tmp_path):
    matrices, specs, images, val = setup
    first = train_pyramid(images, val, matrices, tiny_cfg(stages=(1,)), TINY_MODEL, run_dir=str(tmp_path))
    stage1 = {k: v.clone() for k, v in first.checkpoints[1].weights.named_tensors().items()}

    result = train_pyramid(images, val, matrices, tiny_cfg(stages=(2,)), TINY_MODEL,
                           existing=first.checkpoints, run_dir=str(tmp_path))
    assert sorted(result.checkpoints) == [1, 2]
    report = result.transfer_reports[2]
    assert report.copied and report.source_stage == 1
    assert result.checkpoints[2].weights.provenance == "transferred-from-stage-1"
    for name, tensor in result.checkpoints[1].weights.named_tensors().items():
        assert torch.equal(tensor, stage1[name]), name

    assert (tmp_path / "stage2" / "weights.pt").exists()
    assert list(result.history["stage"].unique()) == [1, 2]


def test_pyramid_without_transfer_starts_fresh(setup):
    matrices, specs, images, val = setup
    result = train_pyramid(images, val, matrices, tiny_cfg(max_epochs=1, weight_transfer=False), TINY_MODEL)
    assert result.transfer_reports == {}
    assert result.checkpoints[2].weights.provenance == "fresh"


def test_pyramid_rejects_unknown_stage(setup):
    matrices, _, images, val = setup
    with pytest.raises(ConfigError):
        train_pyramid(images, val, matrices, tiny_cfg(stages=(3,)), TINY_MODEL)


def test_fusion_ablation_shares_first_stage(setup, tmp_path):
    matrices, _, images, val = setup
    frame = ablate_fusion(images, val, val, matrices, tiny_cfg(max_epochs=1), TINY_MODEL,
                          seeds=(0, 1), run_dir=str(tmp_path), config_hash="feedbeef0000")

    assert len(frame) == 2 * 2 * 2
    assert set(frame["variant"]) == {"fusion", "no_fusion"}
    first = frame[frame["stage"] == 1].pivot(index="seed", columns="variant", values="test_mse")
    assert (first["fusion"] == first["no_fusion"]).all()

    csv_lines = (tmp_path / "ablation" / "ablation.csv").read_text().splitlines()
    assert csv_lines[0] == "# config_hash=feedbeef0000"
    assert sum(line.startswith("mean,") for line in csv_lines) == 4
    assert (tmp_path / "ablation" / "ablation.json").exists()
    assert (tmp_path / "ablation" / "seed1" / "no_fusion" / "stage2" / "weights.pt").exists()


def dataset_images(loader, count: int, split: str = "train", side: int = 64) -> torch.Tensor:
    """Normalized (count, 1, side, side) images from the local dataset cache"""
    try:
        images = loader(os.getenv("LAPRAN_DATA_DIR", "data"), split, limit=count, channels=1)
    except DataError as e:
        pytest.skip(f"dataset unavailable: {e}")
    batch = stack_patches(images)
    return pyramid_levels(batch, 4)[[8, 16, 32, 64].index(side)]


def sensing_for_cr(cr: float, stages: int, signal_dim: int) -> SensingConfig:
    return SensingConfig(base_dim=base_dim_for_cr(cr, 2, stages, signal_dim), beta=2, stages=stages,
                         signal_dim=signal_dim, channels=1, seed=1)


DESK_MODEL = ModelConfig(feature_channels=32, encoder_filters=32, disc_filters=32)


@slow
def test_first_stage_overfits_small_mnist_subset():
    images = dataset_images(load_mnist, 10)
    matrices = build_matrices(sensing_for_cr(5, 4, 4096))
    spec = stage_model_specs(matrices.config.stage_dims, 1, DESK_MODEL)[0]
    cfg = TrainConfig(batch_size=10, max_epochs=200, early_stop_patience=200, learning_rate=1e-3,
                      device="cpu", seed=1, loss=LossWeights(lambda_adv=0.0))
    checkpoint = train_stage(1, images, torch.empty(0, 1, 64, 64), matrices, StageWeights.fresh(spec, seed=1), cfg)

    mse = checkpoint.history["train_mse"]
    assert mse.min() <= mse.iloc[0] / 10


@slow
def test_fusion_keeps_improving_after_first_stage_on_cifar10():
    images = dataset_images(load_cifar10, 2000, side=16)
    train, val, test = images[:1600], images[1600:1800], images[1800:]
    matrices = build_matrices(sensing_for_cr(10, 2, 256))
    cfg = TrainConfig(batch_size=64, max_epochs=20, early_stop_patience=5, learning_rate=5e-4, device="auto")

    frame = ablate_fusion(train, val, test, matrices, cfg, DESK_MODEL, seeds=(0, 1, 2))
    mean = frame.groupby(["variant", "stage"])["test_mse"].mean()
    assert mean[("fusion", 2)] <= 0.9 * mean[("fusion", 1)]
    assert mean[("fusion", 2)] < mean[("no_fusion", 2)]


@slow
def test_four_stage_mnist_pyramid_reaches_quality_floor():
    images = dataset_images(load_mnist, 5000)
    test = dataset_images(load_mnist, 200, split="test")
    sensing = sensing_for_cr(5, 4, 4096)
    cfg = TrainConfig(batch_size=64, max_epochs=30, early_stop_patience=5, learning_rate=5e-4, device="auto")

    result = train_pyramid(images[:4500], images[4500:], build_matrices(sensing), cfg, DESK_MODEL)
    report = evaluate(CascadeBundle(sensing, result.stage_weights), test, [5], "mnist")[0]
    assert report.depth == 4
    assert report.final["psnr"] >= 20.0


def epochs_to_reach(history: pd.DataFrame, target: float) -> int:
    reached = history.index[history["val_mse"] <= target]
    return int(history["epoch"][reached[0]]) if len(reached) else len(history) + 1


@slow
def test_transferred_stage_converges_faster_than_fresh():
    images = dataset_images(load_mnist, 1200, side=16)
    train, val = images[:1000], images[1000:]
    matrices = build_matrices(sensing_for_cr(5, 2, 256))
    specs = stage_model_specs(matrices.config.stage_dims, 1, DESK_MODEL)

    transferred, fresh = [], []
    for seed in (0, 1, 2):
        cfg = TrainConfig(batch_size=64, max_epochs=5, early_stop_patience=5, learning_rate=5e-4,
                          device="auto", seed=seed)
        first = train_pyramid(train, val, matrices, replace(cfg, stages=(1,)), DESK_MODEL).checkpoints[1]
        frozen = [first.weights]

        init, _ = transfer_weights(first.weights, specs[1], stage_seed(seed, 2))
        baseline = train_stage(2, train, val, matrices, StageWeights.fresh(specs[1], stage_seed(seed, 2)), cfg, frozen)
        warm = train_stage(2, train, val, matrices, init, cfg, frozen)

        target = float(baseline.history["val_mse"].iloc[4])
        transferred.append(epochs_to_reach(warm.history, target))
        fresh.append(epochs_to_reach(baseline.history, target))

    assert sum(transferred) / 3 < sum(fresh) / 3
