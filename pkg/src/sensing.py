"""
Multi-rate CS Encoder
Builds the nested random sensing matrices, computes measurement budgets and
encodes images into measurement sets whose lower stages are prefixes of the last
"""

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import List, Optional, Sequence, Tuple, Union

import torch

from src.data.pyramid_data import ImageTensor
from src.utils.errors import ConfigError

# Constant of the RIP measurement bound m >= C k ln(n / k)
RIP_CONSTANT = 0.28

MAX_SEED = 2 ** 64 - 1


def parse_beta(value: Union[Fraction, int, float, str]) -> Fraction:
    """
    Parse a measurement increment ratio into an exact fraction

    Args:
        value: Fraction, integer, decimal (1.5) or ratio string ("3/2")

    Returns:
        Exact Fraction
    """
    if isinstance(value, Fraction):
        return value
    if isinstance(value, bool):
        raise ConfigError(f"Invalid beta: {value!r}")
    try:
        # str() keeps decimal literals exact: 1.5 -> 3/2, not the binary expansion
        return Fraction(str(value).strip())
    except (ValueError, ZeroDivisionError) as e:
        raise ConfigError(f"Invalid beta: {value!r}") from e


def beta_upper_bound(sparsity_ratio_constant: bool = True) -> Fraction:
    """
    Upper bound of the measurement increment ratio between adjacent stages

    With a constant sparsity ratio k/n, doubling the image side multiplies both the
    sparsity and the pixel count by 4, so the RIP bound 4k ln(4n/4k) / (k ln(n/k))
    reduces to exactly 4.

    Args:
        sparsity_ratio_constant: Whether the sparsity ratio is constant across stages

    Returns:
        Fraction(4)
    """
    if not sparsity_ratio_constant:
        raise ConfigError("The beta bound is only defined for a constant per-stage sparsity ratio")
    return Fraction(4)


def rip_lower_bound(sparsity: int, ambient_dim: float) -> int:
    """
    Minimum number of measurements for RIP: ceil(0.28 * k * ln(n / k))

    The natural log is used; 0.28 = 1 / (2 ln(sqrt(24) + 1)) only holds for base e.

    Args:
        sparsity: Sparsity k of the signal
        ambient_dim: Ambient dimension n

    Returns:
        Lower bound on the measurement count
    """
    if sparsity <= 0:
        raise ConfigError(f"Sparsity must be positive, got {sparsity}")
    if sparsity >= ambient_dim:
        raise ConfigError(f"Sparsity {sparsity} must be smaller than the ambient dimension {ambient_dim}")

    value = RIP_CONSTANT * sparsity * math.log(ambient_dim / sparsity)
    # products that are integers in exact arithmetic must not round up
    return max(0, math.ceil(value - 1e-9))


def derive_stage_dims(base_dim: int, beta: Union[Fraction, float, str], stages: int,
                      signal_dim: Optional[int] = None) -> List[int]:
    """
    Measurement count of every stage: floor(beta^(i-1) * m) for i = 1..k

    Args:
        base_dim: Measurements of stage 1 (m)
        beta: Measurement increment ratio, 1 < beta <= 4
        stages: Number of stages k
        signal_dim: Pixels per channel N; when given the last stage must not exceed it

    Returns:
        Strictly increasing list of k measurement counts
    """
    beta = parse_beta(beta)
    if base_dim < 1:
        raise ConfigError(f"Base dimension m must be >= 1, got {base_dim}")
    if stages < 1:
        raise ConfigError(f"Stage count k must be >= 1, got {stages}")
    if beta <= 1:
        raise ConfigError(f"beta must be > 1, got {beta}")
    if beta > beta_upper_bound():
        raise ConfigError(f"beta={beta} exceeds the upper bound {beta_upper_bound()}")

    dims = [math.floor(beta ** (i - 1) * base_dim) for i in range(1, stages + 1)]

    for previous, current in zip(dims, dims[1:]):
        if current <= previous:
            raise ConfigError(
                f"beta={beta} is too small for m={base_dim}: stage dims {dims} are not strictly increasing"
            )
    if signal_dim is not None and dims[-1] > signal_dim:
        raise ConfigError(f"Final stage needs {dims[-1]} measurements but the signal has only {signal_dim} pixels")
    return dims


def base_dim_for_cr(cr: float, beta: Union[Fraction, float, str], stages: int, signal_dim: int) -> int:
    """
    Stage-1 measurement count m that puts the final stage at the requested CR

    Args:
        cr: Target compression ratio of the final stage (N / stage_dims[k])
        beta: Measurement increment ratio
        stages: Number of stages
        signal_dim: Pixels per channel

    Returns:
        Base dimension m (at least 1)
    """
    if cr <= 0:
        raise ConfigError(f"CR must be positive, got {cr}")
    beta = parse_beta(beta)
    return max(1, round(signal_dim / (float(cr) * float(beta ** (stages - 1)))))


@dataclass(frozen=True)
class SensingConfig:
    """Shape and seed of the multi-rate encoder"""

    base_dim: int
    beta: Fraction
    stages: int
    signal_dim: int
    channels: int = 1
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "beta", parse_beta(self.beta))
        if self.channels not in (1, 3):
            raise ConfigError(f"channels must be 1 or 3, got {self.channels}")
        if self.signal_dim < 1:
            raise ConfigError(f"Signal dimension N must be positive, got {self.signal_dim}")
        if not 0 <= self.seed <= MAX_SEED:
            raise ConfigError(f"Seed must be a 64-bit unsigned integer, got {self.seed}")
        derive_stage_dims(self.base_dim, self.beta, self.stages, self.signal_dim)

    @property
    def stage_dims(self) -> List[int]:
        return derive_stage_dims(self.base_dim, self.beta, self.stages, self.signal_dim)

    @property
    def side(self) -> int:
        """Image side length for square images of N pixels"""
        side = math.isqrt(self.signal_dim)
        if side * side != self.signal_dim:
            raise ConfigError(f"Signal dimension {self.signal_dim} is not a square image")
        return side

    def compression_ratios(self) -> List[Fraction]:
        """CR of every stage, N / stage_dims[i]"""
        return [Fraction(self.signal_dim, d) for d in self.stage_dims]

    def to_dict(self) -> dict:
        return {
            "m": self.base_dim,
            "beta": str(self.beta),
            "k": self.stages,
            "N": self.signal_dim,
            "channels": self.channels,
            "seed": self.seed,
        }


@dataclass(frozen=True)
class MultiRateSensingMatrix:
    """Final-stage sensing matrix; stage i uses its first stage_dims[i] rows"""

    full_matrix: torch.Tensor
    stage_dims: Tuple[int, ...]
    config: SensingConfig = field(compare=False)

    def phi(self, stage: int) -> torch.Tensor:
        """Sensing operator of a 1-based stage (a view, never a copy)"""
        _check_stage(stage, len(self.stage_dims))
        return self.full_matrix[: self.stage_dims[stage - 1]]

    def to(self, device: Union[str, torch.device]) -> "MultiRateSensingMatrix":
        return MultiRateSensingMatrix(self.full_matrix.to(device), self.stage_dims, self.config)


@dataclass
class MeasurementSet:
    """Measurements of one image; lower stages are prefixes of the last vector"""

    final: torch.Tensor  # (channels, available length)
    stage_dims: Tuple[int, ...]
    source_shape: Tuple[int, int, int]
    config: Optional[SensingConfig] = None

    @property
    def available_length(self) -> int:
        return int(self.final.shape[-1])

    @property
    def vectors(self) -> List[torch.Tensor]:
        """Per-stage vectors for every stage whose full prefix is present"""
        return [self.final[..., :d] for d in self.stage_dims if d <= self.available_length]

    def truncated(self, length: int) -> "MeasurementSet":
        """Same measurements cut to the first `length` entries per channel"""
        if not 1 <= length <= self.available_length:
            raise ConfigError(f"Cannot truncate {self.available_length} measurements to {length}")
        return MeasurementSet(self.final[..., :length].clone(), self.stage_dims, self.source_shape, self.config)


def _check_stage(stage: int, stages: int) -> None:
    if not 1 <= stage <= stages:
        raise ConfigError(f"Stage {stage} out of range 1..{stages}")


def build_matrices(config: SensingConfig) -> MultiRateSensingMatrix:
    """
    Generate the multi-rate sensing matrix from the config seed

    Entries are i.i.d. N(0, 1 / stage_dims[k]). Generation runs on a private CPU
    generator so the same (seed, config) always yields the same bits.

    Args:
        config: Sensing configuration

    Returns:
        MultiRateSensingMatrix
    """
    dims = tuple(config.stage_dims)
    rows = dims[-1]

    generator = torch.Generator(device="cpu")
    generator.manual_seed(config.seed)
    matrix = torch.randn((rows, config.signal_dim), generator=generator, dtype=torch.float32)
    matrix.mul_(1.0 / math.sqrt(rows))
    return MultiRateSensingMatrix(matrix, dims, config)


def encode_batch(images: torch.Tensor, matrices: MultiRateSensingMatrix) -> torch.Tensor:
    """
    Encode a batch of normalized images with the final-stage operator

    Args:
        images: (B, C, H, W) tensor in [-1, 1] with H * W == N
        matrices: Sensing matrices

    Returns:
        (B, C, stage_dims[k]) measurements
    """
    config = matrices.config
    if images.dim() != 4:
        raise ConfigError(f"Expected a (B, C, H, W) batch, got shape {tuple(images.shape)}")
    _, channels, height, width = images.shape
    if channels != config.channels or height * width != config.signal_dim or height != width:
        raise ConfigError(
            f"Image shape {tuple(images.shape[1:])} does not match sensing config "
            f"({config.channels}, {config.side}, {config.side})"
        )
    phi = matrices.full_matrix.to(device=images.device, dtype=images.dtype)
    return torch.matmul(images.flatten(2), phi.t())


def encode(image: Union[ImageTensor, torch.Tensor], matrices: MultiRateSensingMatrix) -> MeasurementSet:
    """
    Encode one image into a nested measurement set

    Only the final-stage vector is computed; the stage vectors are its prefixes.

    Args:
        image: ImageTensor (or (C, H, W) tensor) normalized to [-1, 1]
        matrices: Sensing matrices

    Returns:
        MeasurementSet
    """
    data = image.data if isinstance(image, ImageTensor) else image
    if data.dim() != 3:
        raise ConfigError(f"Expected a (C, H, W) image, got shape {tuple(data.shape)}")
    final = encode_batch(data.unsqueeze(0), matrices)[0]
    return MeasurementSet(final, matrices.stage_dims, tuple(data.shape), matrices.config)


def slice_measurements(full: Union[MeasurementSet, torch.Tensor], stage: int,
                       stage_dims: Optional[Sequence[int]] = None) -> torch.Tensor:
    """
    Measurements fed to a stage: the first stage_dims[i] entries per channel

    Args:
        full: MeasurementSet, or a raw (..., L) tensor together with stage_dims
        stage: 1-based stage index
        stage_dims: Required when `full` is a raw tensor

    Returns:
        Prefix tensor of shape (..., stage_dims[i])
    """
    if isinstance(full, MeasurementSet):
        data, dims = full.final, full.stage_dims
    else:
        if stage_dims is None:
            raise ConfigError("stage_dims are required to slice a raw measurement tensor")
        data, dims = full, stage_dims

    _check_stage(stage, len(dims))
    needed = dims[stage - 1]
    if data.shape[-1] < needed:
        raise ConfigError(f"Stage {stage} needs {needed} measurements, only {data.shape[-1]} available")
    return data[..., :needed]
