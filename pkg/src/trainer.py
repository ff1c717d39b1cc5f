"""
Stage-by-stage pyramid training
Each stage trains on the frozen outputs of the stages before it: one discriminator
step then one generator step per batch, validation MSE tracked per epoch with
early stopping, best-epoch weights kept.
"""

import copy
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import pandas as pd
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.utils.data import DataLoader, TensorDataset

from src.data.pyramid_data import pyramid_levels
from src.metrics import per_stage_mse, write_ablation
from src.models.losses import (
    LossWeights,
    discriminator_loss,
    euclidean_loss,
    generator_adv_loss,
    total_loss,
)
from src.models.ran import ModelConfig, stage_model_specs
from src.models.stage_weights import (
    StageWeights,
    TransferReport,
    load_stage_weights,
    save_stage_weights,
    transfer_weights,
)
from src.reconstructor import run_cascade
from src.sensing import MultiRateSensingMatrix, encode_batch
from src.utils.errors import ConfigError, DataError, NumericError

logger = logging.getLogger(__name__)

OPTIMIZER_FILE = "optimizer.pt"
METRICS_FILE = "metrics.csv"
HISTORY_COLUMNS = ["epoch", "train_mse", "val_mse", "d_loss", "g_adv_loss", "wall_seconds"]
DEVICES = ("auto", "cpu", "cuda")


@dataclass(frozen=True)
class TrainConfig:
    """[train] section plus the loss weights"""

    batch_size: int = 128
    max_epochs: int = 100
    learning_rate: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    early_stop_patience: int = 10
    seed: int = 0
    stages: Tuple[int, ...] = ()
    weight_transfer: bool = True
    device: str = "auto"
    num_workers: int = 0
    loss: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"train.batch_size must be >= 1, got {self.batch_size}")
        if self.max_epochs < 1:
            raise ConfigError(f"train.max_epochs must be >= 1, got {self.max_epochs}")
        if not self.learning_rate > 0:
            raise ConfigError(f"train.learning_rate must be > 0, got {self.learning_rate}")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1) or not self.adam_eps > 0:
            raise ConfigError("Adam moments must lie in [0, 1) and adam_eps must be > 0")
        if self.early_stop_patience < 1:
            raise ConfigError(f"train.early_stop_patience must be >= 1, got {self.early_stop_patience}")
        if self.device not in DEVICES:
            raise ConfigError(f"train.device must be one of {DEVICES}, got {self.device!r}")
        if self.num_workers < 0:
            raise ConfigError("train.num_workers must be >= 0")
        stages = tuple(int(s) for s in self.stages)
        if any(s < 1 for s in stages):
            raise ConfigError(f"Stage indices are 1-based, got {list(stages)}")
        object.__setattr__(self, "stages", stages)

    def snapshot(self) -> dict:
        payload = asdict(self)
        payload["stages"] = list(self.stages)
        return payload


def resolve_device(device: str) -> str:
    if device == "auto":
        return "cuda" if torch.cuda.is_available() else "cpu"
    if device == "cuda" and not torch.cuda.is_available():
        raise ConfigError("train.device = 'cuda' but CUDA is not available")
    return device


def stage_seed(seed: int, stage: int) -> int:
    """Per-stage seed for initialization and shuffling"""
    return (seed * 1009 + stage) % 2 ** 63


def build_optimizer(parameters, cfg: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(parameters, lr=cfg.learning_rate, betas=(cfg.adam_beta1, cfg.adam_beta2), eps=cfg.adam_eps)


@dataclass
class Checkpoint:
    """Best-epoch weights of a stage plus everything needed to resume it"""

    stage: int
    weights: StageWeights
    epoch: int
    best_epoch: int
    best_val_mse: float
    history: pd.DataFrame
    config: dict
    optimizer_state: Dict[str, dict] = field(repr=False, default_factory=dict)
    rng_state: Optional[torch.Tensor] = field(repr=False, default=None)
    last_weights: Optional[StageWeights] = field(repr=False, default=None)
    epochs_since_best: int = 0
    stopped_early: bool = False

    @property
    def finished(self) -> bool:
        return self.stopped_early or self.epoch >= self.config.get("max_epochs", self.epoch)


def _finite_or_none(value: float) -> Optional[float]:
    return value if math.isfinite(value) else None


def save_checkpoint(checkpoint: Checkpoint, stage_dir: str, config_hash: str = "") -> None:
    """Write weights.pt, manifest.json, optimizer.pt and metrics.csv"""
    save_stage_weights(checkpoint.weights, stage_dir, extra={
        "config_hash": config_hash,
        "epoch": checkpoint.epoch,
        "best_epoch": checkpoint.best_epoch,
        "best_val_mse": _finite_or_none(checkpoint.best_val_mse),
        "stopped_early": checkpoint.stopped_early,
        "train_config": checkpoint.config,
    })
    last = checkpoint.last_weights or checkpoint.weights
    torch.save(
        {
            "optimizer": checkpoint.optimizer_state,
            "rng_state": checkpoint.rng_state,
            "generator": last.generator,
            "discriminator": last.discriminator,
            "epoch": checkpoint.epoch,
            "best_epoch": checkpoint.best_epoch,
            "best_val_mse": checkpoint.best_val_mse,
            "epochs_since_best": checkpoint.epochs_since_best,
            "stopped_early": checkpoint.stopped_early,
            "config": checkpoint.config,
        },
        os.path.join(stage_dir, OPTIMIZER_FILE),
    )
    with open(os.path.join(stage_dir, METRICS_FILE), "w", newline="") as f:
        f.write(f"# config_hash={config_hash}\n")
        checkpoint.history.to_csv(f, index=False)


def load_checkpoint(stage_dir: str) -> Checkpoint:
    """Read the Checkpoint written by save_checkpoint"""
    weights = load_stage_weights(stage_dir)
    state_path = os.path.join(stage_dir, OPTIMIZER_FILE)
    if not os.path.exists(state_path):
        raise DataError(f"No resume state at {state_path}")
    state = torch.load(state_path, map_location="cpu", weights_only=False)

    metrics_path = os.path.join(stage_dir, METRICS_FILE)
    history = pd.read_csv(metrics_path, comment="#") if os.path.exists(metrics_path) \
        else pd.DataFrame(columns=HISTORY_COLUMNS)
    last = StageWeights(weights.spec, state["generator"], state["discriminator"],
                        weights.provenance, weights.transfer)
    return Checkpoint(
        stage=weights.spec.stage,
        weights=weights,
        epoch=state["epoch"],
        best_epoch=state["best_epoch"],
        best_val_mse=state["best_val_mse"],
        history=history,
        config=state["config"],
        optimizer_state=state["optimizer"],
        rng_state=state["rng_state"],
        last_weights=last,
        epochs_since_best=state["epochs_since_best"],
        stopped_early=state["stopped_early"],
    )


def _stage_tensors(images: torch.Tensor, stage: int, matrices: MultiRateSensingMatrix,
                   frozen: Sequence[nn.Module], batch_size: int, device: str) -> Optional[List[torch.Tensor]]:
    """
    Network inputs and targets of a stage for a whole split

    Returns [y_i, target] for stage 1 and [y_i, i_prev, target] later, or None for an empty split.
    """
    if images.dim() != 4 or images.shape[0] == 0:
        return None

    dims = matrices.stage_dims
    ys, prevs, targets = [], [], []
    with torch.no_grad():
        for batch in images.split(batch_size):
            batch = batch.to(device)
            y = encode_batch(batch, matrices)
            if frozen:
                prevs.append(run_cascade(frozen, y, dims, stage - 1)[-1].cpu())
            ys.append(y[..., :dims[stage - 1]].cpu())
            targets.append(pyramid_levels(batch, matrices.config.stages)[stage - 1].cpu())

    tensors = [torch.cat(ys)]
    if frozen:
        tensors.append(torch.cat(prevs))
    tensors.append(torch.cat(targets))
    return tensors


def _generate(generator: nn.Module, inputs: Sequence[torch.Tensor]) -> torch.Tensor:
    if len(inputs) == 1:
        return generator(inputs[0])
    y, i_prev = inputs
    output, _, _ = generator(i_prev, y)
    return output


def _check_finite(value: torch.Tensor, what: str, stage: int, epoch: int, batch: int) -> None:
    if not torch.isfinite(value).all():
        raise NumericError(f"Non-finite {what} at stage {stage}, epoch {epoch}, batch {batch}: {value.item()}")


def _validation_mse(generator: nn.Module, tensors: List[torch.Tensor], batch_size: int, device: str) -> float:
    generator.eval()
    total, count = 0.0, 0
    with torch.no_grad():
        for start in range(0, tensors[0].shape[0], batch_size):
            batch = [t[start:start + batch_size].to(device) for t in tensors]
            output = _generate(generator, batch[:-1])
            per_image = (output - batch[-1]).pow(2).flatten(1).mean(dim=1)
            total += float(per_image.double().sum())
            count += per_image.shape[0]
    return total / count


def train_stage(stage: int, train_images: torch.Tensor, val_images: torch.Tensor,
                matrices: MultiRateSensingMatrix, init: StageWeights, cfg: TrainConfig,
                frozen: Sequence[StageWeights] = (), resume: Optional[Checkpoint] = None,
                stage_dir: Optional[str] = None, config_hash: str = "") -> Checkpoint:
    """
    Train one stage against its pyramid level

    Args:
        stage: 1-based stage index
        train_images: (N, C, S, S) normalized training patches
        val_images: Validation patches (may be empty; training MSE then drives early stopping)
        matrices: Sensing matrices
        init: Initial weights (fresh or transferred)
        cfg: Training configuration
        frozen: Trained weights of stages 1..stage-1
        resume: Checkpoint of an interrupted run of this stage
        stage_dir: Where to write the checkpoint after every epoch
        config_hash: Hash embedded in written artifacts

    Returns:
        Checkpoint holding the best-epoch weights
    """
    if init.spec.stage != stage:
        raise ConfigError(f"Initial weights belong to stage {init.spec.stage}, not {stage}")
    if len(frozen) != stage - 1 or any(w.spec.stage != j for j, w in enumerate(frozen, start=1)):
        raise DataError(f"Stage {stage} needs trained checkpoints for stages 1..{stage - 1}, "
                        f"got {[w.spec.stage for w in frozen]}")
    if resume is not None and (resume.stopped_early or resume.epoch >= cfg.max_epochs):
        logger.info("Stage %d already finished at epoch %d", stage, resume.epoch)
        return resume

    device = resolve_device(cfg.device)
    matrices = matrices.to(device)
    frozen_generators = []
    for w in frozen:
        generator, _ = w.build(device)
        frozen_generators.append(generator.eval())

    train = _stage_tensors(train_images, stage, matrices, frozen_generators, cfg.batch_size, device)
    if train is None:
        raise DataError("Cannot train on an empty training split")
    val = _stage_tensors(val_images, stage, matrices, frozen_generators, cfg.batch_size, device)
    if val is None:
        logger.warning("Empty validation split; early stopping follows the training MSE")

    start_weights = resume.last_weights if resume is not None else init
    generator, discriminator = start_weights.build(device)
    g_opt = build_optimizer(generator.parameters(), cfg)
    d_opt = build_optimizer(discriminator.parameters(), cfg)

    shuffle = torch.Generator()
    shuffle.manual_seed(stage_seed(cfg.seed, stage))
    loader = DataLoader(TensorDataset(*train), batch_size=cfg.batch_size, shuffle=True,
                        generator=shuffle, num_workers=cfg.num_workers)

    best_weights, best_val, best_epoch, since_best = init, math.inf, 0, 0
    rows: List[dict] = []
    start_epoch = 1
    if resume is not None:
        g_opt.load_state_dict(resume.optimizer_state["generator"])
        d_opt.load_state_dict(resume.optimizer_state["discriminator"])
        shuffle.set_state(resume.rng_state)
        best_weights, best_val, best_epoch = resume.weights, resume.best_val_mse, resume.best_epoch
        since_best = resume.epochs_since_best
        rows = resume.history.to_dict("records")
        start_epoch = resume.epoch + 1
        logger.info("Resuming stage %d at epoch %d", stage, start_epoch)

    checkpoint = resume
    for epoch in range(start_epoch, cfg.max_epochs + 1):
        start = time.perf_counter()
        generator.train()
        discriminator.train()
        sums = {"train_mse": 0.0, "d_loss": 0.0, "g_adv_loss": 0.0}
        seen = 0

        for batch_index, batch in enumerate(loader, start=1):
            batch = [t.to(device) for t in batch]
            target = batch[-1]
            fake = _generate(generator, batch[:-1])

            d_opt.zero_grad()
            d_loss = discriminator_loss(discriminator(target), discriminator(fake.detach()))
            _check_finite(d_loss, "discriminator loss", stage, epoch, batch_index)
            d_loss.backward()
            d_opt.step()

            g_opt.zero_grad()
            adv = generator_adv_loss(discriminator(fake))
            loss = total_loss(euclidean_loss(fake, target, cfg.loss.euclidean_form), adv, cfg.loss)
            _check_finite(loss, "generator loss", stage, epoch, batch_index)
            loss.backward()
            g_opt.step()

            n = target.shape[0]
            sums["train_mse"] += F.mse_loss(fake.detach(), target).item() * n
            sums["d_loss"] += d_loss.item() * n
            sums["g_adv_loss"] += adv.item() * n
            seen += n

        train_mse = sums["train_mse"] / seen
        val_mse = _validation_mse(generator, val, cfg.batch_size, device) if val is not None else train_mse
        if not math.isfinite(val_mse):
            raise NumericError(f"Non-finite validation MSE at stage {stage}, epoch {epoch}")

        if val_mse < best_val:
            best_val, best_epoch, since_best = val_mse, epoch, 0
            best_weights = StageWeights.from_networks(init.spec, generator, discriminator,
                                                      init.provenance, init.transfer)
        else:
            since_best += 1

        rows.append({
            "epoch": epoch,
            "train_mse": train_mse,
            "val_mse": val_mse,
            "d_loss": sums["d_loss"] / seen,
            "g_adv_loss": sums["g_adv_loss"] / seen,
            "wall_seconds": time.perf_counter() - start,
        })
        logger.info("Stage %d epoch %d/%d: train_mse=%.5f val_mse=%.5f d=%.4f g_adv=%.4f (%.1fs)",
                    stage, epoch, cfg.max_epochs, train_mse, val_mse, rows[-1]["d_loss"],
                    rows[-1]["g_adv_loss"], rows[-1]["wall_seconds"])

        stopped = since_best >= cfg.early_stop_patience
        checkpoint = Checkpoint(
            stage=stage,
            weights=best_weights,
            epoch=epoch,
            best_epoch=best_epoch,
            best_val_mse=best_val,
            history=pd.DataFrame(rows, columns=HISTORY_COLUMNS),
            config=cfg.snapshot(),
            optimizer_state=copy.deepcopy({"generator": g_opt.state_dict(), "discriminator": d_opt.state_dict()}),
            rng_state=shuffle.get_state(),
            last_weights=StageWeights.from_networks(init.spec, generator, discriminator,
                                                    init.provenance, init.transfer),
            epochs_since_best=since_best,
            stopped_early=stopped,
        )
        if stage_dir:
            save_checkpoint(checkpoint, stage_dir, config_hash)
        if stopped:
            logger.info("Stage %d stopped early at epoch %d (best epoch %d, val_mse=%.5f)",
                        stage, epoch, best_epoch, best_val)
            break

    return checkpoint


@dataclass
class PyramidResult:
    """Checkpoints of the trained stages and their transfer reports"""

    checkpoints: Dict[int, Checkpoint]
    transfer_reports: Dict[int, TransferReport] = field(default_factory=dict)

    @property
    def stage_weights(self) -> List[StageWeights]:
        return [self.checkpoints[s].weights for s in sorted(self.checkpoints)]

    @property
    def history(self) -> pd.DataFrame:
        frames = [c.history.assign(stage=s) for s, c in sorted(self.checkpoints.items())]
        if not frames:
            return pd.DataFrame(columns=["stage"] + HISTORY_COLUMNS)
        return pd.concat(frames, ignore_index=True)[["stage"] + HISTORY_COLUMNS]


def train_pyramid(train_images: torch.Tensor, val_images: torch.Tensor, matrices: MultiRateSensingMatrix,
                  cfg: TrainConfig, model_config: Optional[ModelConfig] = None,
                  existing: Optional[Dict[int, Checkpoint]] = None, run_dir: Optional[str] = None,
                  config_hash: str = "", resume: bool = False) -> PyramidResult:
    """
    Train the selected stages in index order

    Args:
        train_images, val_images: Normalized patch tensors
        matrices: Sensing matrices
        cfg: Training configuration (cfg.stages empty means all stages)
        model_config: Layer hyperparameters
        existing: Checkpoints of stages trained earlier, keyed by stage
        run_dir: Run directory receiving stage<i>/ folders
        config_hash: Hash embedded in written artifacts
        resume: Continue an unfinished stage found in `existing` instead of retraining it

    Returns:
        PyramidResult with the existing and newly trained checkpoints
    """
    sensing = matrices.config
    specs = stage_model_specs(sensing.stage_dims, sensing.channels, model_config)
    stages = sorted(set(cfg.stages)) or list(range(1, sensing.stages + 1))
    if stages[-1] > sensing.stages:
        raise ConfigError(f"Stage {stages[-1]} requested but the pyramid has {sensing.stages} stages")

    checkpoints = dict(existing or {})
    reports: Dict[int, TransferReport] = {}
    for stage in stages:
        missing = [j for j in range(1, stage) if j not in checkpoints]
        if missing:
            raise DataError(f"missing prerequisite checkpoints for stages {missing} (train them first)")
        spec = specs[stage - 1]
        frozen = [checkpoints[j].weights for j in range(1, stage)]
        stage_dir = os.path.join(run_dir, f"stage{stage}") if run_dir else None
        previous = checkpoints.get(stage) if resume else None

        if previous is not None:
            init = previous.weights
        elif stage == 1 or not cfg.weight_transfer:
            init = StageWeights.fresh(spec, stage_seed(cfg.seed, stage))
        else:
            init, reports[stage] = transfer_weights(checkpoints[stage - 1].weights, spec, stage_seed(cfg.seed, stage))

        logger.info("Training stage %d (%dx%d, %d measurements per channel, init: %s)",
                    stage, spec.output_side, spec.output_side, spec.measurement_dim, init.provenance)
        checkpoints[stage] = train_stage(stage, train_images, val_images, matrices, init, cfg, frozen,
                                         previous, stage_dir, config_hash)
    return PyramidResult(checkpoints, reports)


def ablate_fusion(train_images: torch.Tensor, val_images: torch.Tensor, test_images: torch.Tensor,
                  matrices: MultiRateSensingMatrix, cfg: TrainConfig, model_config: Optional[ModelConfig] = None,
                  seeds: Sequence[int] = (0,), run_dir: Optional[str] = None, config_hash: str = "") -> pd.DataFrame:
    """
    Measurement-fusion ablation: standard pyramid vs a variant whose stages >= 2 see zeroed measurements

    Both variants of a seed share the stage-1 checkpoint.

    Args:
        train_images, val_images, test_images: Normalized patch tensors
        matrices: Sensing matrices
        cfg: Training configuration; cfg.stages (if set) bounds the depth
        model_config: Layer hyperparameters
        seeds: Training seeds
        run_dir: Run directory; results go to <run_dir>/ablation
        config_hash: Hash embedded in written artifacts

    Returns:
        DataFrame with columns seed, variant, stage, test_mse
    """
    model_config = model_config or ModelConfig()
    depth = max(cfg.stages) if cfg.stages else matrices.config.stages
    if depth < 2:
        raise ConfigError("The fusion ablation needs at least two stages")
    device = resolve_device(cfg.device)
    out_dir = os.path.join(run_dir, "ablation") if run_dir else None

    rows = []
    for seed in seeds:
        seed_cfg = replace(cfg, seed=seed, stages=tuple(range(1, depth + 1)))
        seed_dir = os.path.join(out_dir, f"seed{seed}") if out_dir else None

        fused = train_pyramid(train_images, val_images, matrices, seed_cfg, replace(model_config, fusion=True),
                              run_dir=seed_dir and os.path.join(seed_dir, "fusion"), config_hash=config_hash)
        plain = train_pyramid(train_images, val_images, matrices, replace(seed_cfg, stages=tuple(range(2, depth + 1))),
                              replace(model_config, fusion=False), existing={1: fused.checkpoints[1]},
                              run_dir=seed_dir and os.path.join(seed_dir, "no_fusion"), config_hash=config_hash)

        for variant, result in (("fusion", fused), ("no_fusion", plain)):
            generators = [w.build(device)[0] for w in result.stage_weights]
            for stage, value in enumerate(per_stage_mse(generators, test_images, matrices.to(device),
                                                        cfg.batch_size, device), start=1):
                rows.append({"seed": seed, "variant": variant, "stage": stage, "test_mse": value})
        logger.info("Seed %d: fusion %s | no fusion %s", seed,
                    [round(r["test_mse"], 5) for r in rows if r["seed"] == seed and r["variant"] == "fusion"],
                    [round(r["test_mse"], 5) for r in rows if r["seed"] == seed and r["variant"] == "no_fusion"])

    frame = pd.DataFrame(rows, columns=["seed", "variant", "stage", "test_mse"])
    if out_dir:
        write_ablation(frame, out_dir, config_hash)
    return frame
