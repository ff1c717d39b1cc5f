"""
Reconstructive adversarial networks (one generator / discriminator pair per pyramid stage)

Stage 1 maps measurements straight to an 8 x 8 thumbnail. Every later stage has two
branches: an upper branch that upscales the previous output (u) and a lower branch
that encodes the previous output into a contextual latent vector, fuses it with the
stage measurements and synthesizes a residual (r). The stage output is u + r.
"""

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch
import torch.nn as nn

from src.data.pyramid_data import BASE_SIDE
from src.utils.errors import ConfigError

NUM_RESIDUAL_BLOCKS = 3
DECONV_KERNEL = 4
LEAKY_SLOPE = 0.2


@dataclass(frozen=True)
class ModelConfig:
    """[model] section of the experiment config"""

    feature_channels: int = 64
    encoder_filters: int = 64
    disc_filters: int = 64
    kernel_size: int = 3
    fusion: bool = True
    thresholds: Dict[int, float] = field(default_factory=dict)

    def __post_init__(self):
        for name in ("feature_channels", "encoder_filters", "disc_filters"):
            if getattr(self, name) < 1:
                raise ConfigError(f"model.{name} must be positive")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError(f"model.kernel_size must be odd, got {self.kernel_size}")
        object.__setattr__(self, "thresholds", {int(k): float(v) for k, v in dict(self.thresholds).items()})


@dataclass(frozen=True)
class StageModelSpec:
    """Layer hyperparameters of one stage"""

    stage: int
    measurement_dim: int
    channels: int = 1
    feature_channels: int = 64
    encoder_filters: int = 64
    disc_filters: int = 64
    kernel_size: int = 3
    fusion: bool = True

    def __post_init__(self):
        if self.stage < 1:
            raise ConfigError(f"Stage index must be >= 1, got {self.stage}")
        if self.measurement_dim < 1:
            raise ConfigError(f"Measurement dimension must be positive, got {self.measurement_dim}")
        if self.channels not in (1, 3):
            raise ConfigError(f"channels must be 1 or 3, got {self.channels}")

    @property
    def output_side(self) -> int:
        return BASE_SIDE * 2 ** (self.stage - 1)

    @property
    def input_side(self) -> Optional[int]:
        return None if self.stage == 1 else self.output_side // 2

    @property
    def latent_dim(self) -> int:
        """Length of the flattened stage measurements (and of the contextual latent)"""
        return self.channels * self.measurement_dim


def stage_model_specs(stage_dims: List[int], channels: int, config: ModelConfig = None) -> List[StageModelSpec]:
    """One StageModelSpec per stage from the measurement budget"""
    config = config or ModelConfig()
    return [
        StageModelSpec(
            stage=i + 1,
            measurement_dim=dim,
            channels=channels,
            feature_channels=config.feature_channels,
            encoder_filters=config.encoder_filters,
            disc_filters=config.disc_filters,
            kernel_size=config.kernel_size,
            fusion=config.fusion,
        )
        for i, dim in enumerate(stage_dims)
    ]


def conv_block(in_channels: int, out_channels: int, kernel_size: int, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_channels, out_channels, kernel_size, stride, kernel_size // 2),
        nn.BatchNorm2d(out_channels),
        nn.ReLU(inplace=True),
    )


def bilinear_kernel(size: int) -> torch.Tensor:
    """2D bilinear kernel for a transposed-convolution upsampler"""
    factor = (size + 1) // 2
    center = factor - 1 if size % 2 == 1 else factor - 0.5
    og = np.ogrid[:size, :size]
    kernel = (1 - abs(og[0] - center) / factor) * (1 - abs(og[1] - center) / factor)
    return torch.from_numpy(kernel).float()


class ResidualBlock(nn.Module):
    """Two normalized 3x3 convolutions with an identity shortcut"""

    def __init__(self, channels: int, kernel_size: int = 3):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(channels, channels, kernel_size, padding=kernel_size // 2),
            nn.BatchNorm2d(channels),
            nn.ReLU(inplace=True),
            nn.Conv2d(channels, channels, kernel_size, padding=kernel_size // 2),
            nn.BatchNorm2d(channels),
            nn.ReLU(inplace=True),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.body(x)


def _flatten_measurements(y: torch.Tensor, spec: StageModelSpec) -> torch.Tensor:
    y = y.flatten(1)
    if y.shape[1] != spec.latent_dim:
        raise ConfigError(
            f"Stage {spec.stage} expects {spec.latent_dim} measurements per image, got {y.shape[1]}"
        )
    return y


def _check_image(x: torch.Tensor, channels: int, side: int, what: str) -> None:
    if x.dim() != 4 or x.shape[1] != channels or x.shape[2] != side or x.shape[3] != side:
        raise ConfigError(f"{what} expects (B, {channels}, {side}, {side}), got {tuple(x.shape)}")


def fuse(c: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """
    Early fusion: concatenate the contextual latent (first) and the measurements (second)

    Both halves must have the same length so each contributes equally.
    """
    if c.shape != y.shape:
        raise ConfigError(f"Fusion needs equal lengths, got context {tuple(c.shape)} and measurements {tuple(y.shape)}")
    return torch.cat([c, y], dim=-1)


class RecGenFirst(nn.Module):
    """Stage-1 generator: measurements -> 8 x 8 thumbnail"""

    def __init__(self, spec: StageModelSpec):
        super().__init__()
        if spec.stage != 1:
            raise ConfigError(f"RecGenFirst is the stage-1 generator, got stage {spec.stage}")
        self.spec = spec
        features = spec.feature_channels
        side = spec.output_side

        self.fusion_fc = nn.Linear(spec.latent_dim, features * side * side)
        self.fusion_norm = nn.BatchNorm2d(features)
        self.fusion_relu = nn.ReLU(inplace=True)
        self.res_blocks = nn.Sequential(*[ResidualBlock(features, spec.kernel_size) for _ in range(NUM_RESIDUAL_BLOCKS)])
        self.residual_head = nn.Conv2d(features, spec.channels, spec.kernel_size, padding=spec.kernel_size // 2)
        self.output_act = nn.Tanh()

    def forward(self, y: torch.Tensor) -> torch.Tensor:
        spec = self.spec
        y = _flatten_measurements(y, spec)
        x = self.fusion_fc(y).view(-1, spec.feature_channels, spec.output_side, spec.output_side)
        x = self.fusion_relu(self.fusion_norm(x))
        x = self.res_blocks(x)
        return self.output_act(self.residual_head(x))


class RecGenStage(nn.Module):
    """Stage-i generator (i >= 2): (previous output, measurements) -> (o, u, r)"""

    def __init__(self, spec: StageModelSpec):
        super().__init__()
        if spec.stage < 2:
            raise ConfigError("RecGenStage needs a stage index >= 2")
        self.spec = spec
        k = spec.kernel_size
        features, filters = spec.feature_channels, spec.encoder_filters
        in_side = spec.input_side

        # upper branch
        self.upscale = nn.ConvTranspose2d(spec.channels, spec.channels, DECONV_KERNEL, 2, 1, bias=False)

        # lower branch
        self.context_encoder = nn.Sequential(
            conv_block(spec.channels, filters, k),
            conv_block(filters, filters, k, stride=2),
        )
        encoded_side = (in_side - 1) // 2 + 1
        self.context_fc = nn.Linear(filters * encoded_side * encoded_side, spec.latent_dim)
        self.fusion_fc = nn.Linear(2 * spec.latent_dim, features * in_side * in_side)
        self.fusion_norm = nn.BatchNorm2d(features)
        self.fusion_relu = nn.ReLU(inplace=True)
        self.upsample = nn.Sequential(
            nn.ConvTranspose2d(features, features, DECONV_KERNEL, 2, 1),
            nn.BatchNorm2d(features),
            nn.ReLU(inplace=True),
        )
        self.res_blocks = nn.Sequential(*[ResidualBlock(features, k) for _ in range(NUM_RESIDUAL_BLOCKS)])
        self.residual_head = nn.Conv2d(features, spec.channels, k, padding=k // 2)

        self.reset_upscale()

    def reset_upscale(self) -> None:
        """Start the upper branch as an exact per-channel bilinear 2x upsampler"""
        with torch.no_grad():
            self.upscale.weight.zero_()
            kernel = bilinear_kernel(DECONV_KERNEL)
            for c in range(self.spec.channels):
                self.upscale.weight[c, c] = kernel

    def contextual_encode(self, i_prev: torch.Tensor) -> torch.Tensor:
        """Contextual latent vector c of the previous-stage output, length == latent_dim"""
        _check_image(i_prev, self.spec.channels, self.spec.input_side, f"Stage {self.spec.stage} context encoder")
        return self.context_fc(self.context_encoder(i_prev).flatten(1))

    def forward(self, i_prev: torch.Tensor, y: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        spec = self.spec
        y = _flatten_measurements(y, spec)
        if y.shape[0] != i_prev.shape[0]:
            raise ConfigError(f"Batch mismatch: {i_prev.shape[0]} images, {y.shape[0]} measurement vectors")
        if not spec.fusion:
            # measurement-free variant: same graph, no new information
            y = torch.zeros_like(y)

        c = self.contextual_encode(i_prev)
        x = self.fusion_fc(fuse(c, y)).view(-1, spec.feature_channels, spec.input_side, spec.input_side)
        x = self.fusion_relu(self.fusion_norm(x))
        x = self.res_blocks(self.upsample(x))
        r = self.residual_head(x)
        u = self.upscale(i_prev)
        o = torch.clamp(u + r, -1.0, 1.0)
        return o, u, r


class RecDisc(nn.Module):
    """DCGAN-style discriminator: strided convolutions, leaky ReLU, sigmoid probability"""

    def __init__(self, spec: StageModelSpec):
        super().__init__()
        self.spec = spec
        filters = spec.disc_filters
        side = spec.output_side // 2

        layers = [nn.Conv2d(spec.channels, filters, DECONV_KERNEL, 2, 1), nn.LeakyReLU(LEAKY_SLOPE, inplace=True)]
        while side > 4:
            layers += [
                nn.Conv2d(filters, filters * 2, DECONV_KERNEL, 2, 1),
                nn.BatchNorm2d(filters * 2),
                nn.LeakyReLU(LEAKY_SLOPE, inplace=True),
            ]
            filters *= 2
            side //= 2
        self.features = nn.Sequential(*layers)
        self.classifier = nn.Linear(filters * side * side, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _check_image(x, self.spec.channels, self.spec.output_side, f"Stage {self.spec.stage} discriminator")
        return torch.sigmoid(self.classifier(self.features(x).flatten(1))).squeeze(1)


def build_generator(spec: StageModelSpec) -> nn.Module:
    return RecGenFirst(spec) if spec.stage == 1 else RecGenStage(spec)


def build_stage_networks(spec: StageModelSpec, seed: Optional[int] = None) -> Tuple[nn.Module, RecDisc]:
    """
    Freshly initialized generator and discriminator of a stage

    Args:
        spec: Stage hyperparameters
        seed: Initialization seed; the global RNG is left untouched when given

    Returns:
        (generator, discriminator)
    """
    if seed is None:
        return build_generator(spec), RecDisc(spec)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return build_generator(spec), RecDisc(spec)
