"""
Patch and Pyramid Preparation
Patch extraction, dihedral augmentation, ground-truth pyramids and dataset splits
"""

import hashlib
import json
import math
import random
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch

from src.utils.errors import ConfigError

PIPELINE_SIDES = (8, 16, 32, 64)
BASE_SIDE = 8

# values produced by float arithmetic may overshoot [-1, 1] by rounding
RANGE_TOLERANCE = 1e-5


def normalize_pixels(pixels: np.ndarray) -> torch.Tensor:
    """Map 8-bit pixels (H, W) or (H, W, C) to a (C, H, W) float tensor in [-1, 1]"""
    array = np.asarray(pixels, dtype=np.float32)
    if array.ndim == 2:
        array = array[None, :, :]
    else:
        array = np.transpose(array, (2, 0, 1))
    return torch.from_numpy(np.ascontiguousarray(array / 127.5 - 1.0))


def denormalize(data: torch.Tensor) -> torch.Tensor:
    """Map [-1, 1] values to 8-bit levels, rounding half to even"""
    scaled = (data.detach().to(torch.float64).clamp(-1.0, 1.0) + 1.0) * 127.5
    return torch.round(scaled).to(torch.uint8)


@dataclass
class ImageTensor:
    """Image data (C, H, W) in [-1, 1] with provenance"""

    data: torch.Tensor
    source: str = ""
    offset: Tuple[int, int] = (0, 0)
    transform: str = "identity"

    def __post_init__(self):
        if self.data.dim() != 3:
            raise ConfigError(f"ImageTensor expects (C, H, W), got shape {tuple(self.data.shape)}")
        if self.data.numel() and (self.data.min() < -1 - RANGE_TOLERANCE or self.data.max() > 1 + RANGE_TOLERANCE):
            raise ConfigError(f"ImageTensor values outside [-1, 1] ({self.source or 'unnamed'})")

    @property
    def channels(self) -> int:
        return int(self.data.shape[0])

    @property
    def height(self) -> int:
        return int(self.data.shape[1])

    @property
    def width(self) -> int:
        return int(self.data.shape[2])

    @property
    def side(self) -> int:
        """Side length of a square image"""
        if self.height != self.width:
            raise ConfigError(f"Image {self.source or 'unnamed'} is not square: {self.height}x{self.width}")
        return self.height

    def check_pipeline(self) -> None:
        """Pipeline tensors are square with a side in 8, 16, 32, 64"""
        if self.side not in PIPELINE_SIDES:
            raise ConfigError(f"Pipeline image side must be one of {PIPELINE_SIDES}, got {self.side}")


@dataclass
class ImagePyramid:
    """Images of one patch at sides 8 * 2^0 ... 8 * 2^(k-1)"""

    levels: List[ImageTensor]

    @property
    def sides(self) -> List[int]:
        return [level.side for level in self.levels]

    @property
    def stages(self) -> int:
        return len(self.levels)


@dataclass
class DatasetManifest:
    """Description of one dataset split"""

    name: str
    split: str
    sources: List[str]
    patch_count: int = 0
    augmentation: Dict[str, bool] = field(default_factory=lambda: {"rotate": False, "flip": False})
    source_checksum: str = ""
    seed: int = 0

    def __post_init__(self):
        if not self.source_checksum:
            self.source_checksum = sources_checksum(self.sources)

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path: str, config_hash: str = "") -> None:
        payload = self.to_dict()
        payload["config_hash"] = config_hash
        with open(path, "w") as f:
            json.dump(payload, f, indent=2)

    @classmethod
    def load(cls, path: str) -> "DatasetManifest":
        with open(path, "r") as f:
            payload = json.load(f)
        payload.pop("config_hash", None)
        return cls(**payload)


def sources_checksum(sources: Sequence[str]) -> str:
    """SHA-256 over the sorted source identifiers"""
    digest = hashlib.sha256()
    for source in sorted(sources):
        digest.update(source.encode("utf-8"))
        digest.update(b"\n")
    return digest.hexdigest()


def extract_patches(images: Sequence[ImageTensor], patch_side: int, stride: int) -> List[ImageTensor]:
    """
    Cut every image into patches in raster order

    Windows that would cross the right or bottom edge are dropped.

    Args:
        images: Source images
        patch_side: Side of the square patch
        stride: Step between window origins

    Returns:
        List of patches with source and crop offset set
    """
    if patch_side < 1 or stride < 1:
        raise ConfigError(f"patch_side and stride must be positive, got {patch_side} and {stride}")

    patches = []
    for image in images:
        if patch_side > min(image.height, image.width):
            raise ConfigError(
                f"Patch side {patch_side} exceeds image {image.source or 'unnamed'} "
                f"of size {image.height}x{image.width}"
            )
        for top in range(0, image.height - patch_side + 1, stride):
            for left in range(0, image.width - patch_side + 1, stride):
                crop = image.data[:, top:top + patch_side, left:left + patch_side].clone()
                patches.append(ImageTensor(crop, image.source, (image.offset[0] + top, image.offset[1] + left)))
    return patches


def augment(patch: ImageTensor, rotate: bool = True, flip: bool = True) -> List[ImageTensor]:
    """
    Dihedral augmentations of a square patch

    Order: for flip in (no, yes), rotations by 0, 90, 180, 270 degrees.

    Args:
        patch: Square patch
        rotate: Include the four rotations
        flip: Include horizontally flipped copies

    Returns:
        1, 2, 4 or 8 patches; the first is always the input itself
    """
    if patch.height != patch.width:
        raise ConfigError(f"Augmentation needs a square patch, got {patch.height}x{patch.width}")

    variants = []
    for flipped in ((False, True) if flip else (False,)):
        base = torch.flip(patch.data, dims=(2,)) if flipped else patch.data
        for quarter in (range(4) if rotate else range(1)):
            data = torch.rot90(base, k=quarter, dims=(1, 2)) if quarter else base
            name = ("flip+" if flipped else "") + f"rot{90 * quarter}"
            variants.append(ImageTensor(data.contiguous(), patch.source, patch.offset, name))
    variants[0] = patch
    return variants


def downsample2x(data: torch.Tensor) -> torch.Tensor:
    """
    2x2 area average of (..., H, W) data

    Rows are averaged first, then columns, each as (a + b) / 2; a constant image
    stays bit-exactly constant.
    """
    if data.shape[-1] % 2 or data.shape[-2] % 2:
        raise ConfigError(f"Cannot halve a {data.shape[-2]}x{data.shape[-1]} image")
    rows = (data[..., 0::2, :] + data[..., 1::2, :]) / 2
    return (rows[..., :, 0::2] + rows[..., :, 1::2]) / 2


def side_for_stages(stages: int) -> int:
    """Patch side needed by a k-stage pyramid: 8 * 2^(k-1)"""
    return BASE_SIDE * 2 ** (stages - 1)


def pyramid_levels(batch: torch.Tensor, stages: int) -> List[torch.Tensor]:
    """
    Ground-truth levels for a (..., S, S) batch, coarsest first

    Args:
        batch: Images with side 8 * 2^(k-1)
        stages: Number of pyramid levels k

    Returns:
        k tensors with sides 8, 16, ..., S; the last is `batch` itself
    """
    side = batch.shape[-1]
    if stages < 1 or side != side_for_stages(stages) or batch.shape[-2] != side:
        raise ConfigError(f"A {stages}-stage pyramid needs side {side_for_stages(max(stages, 1))}, got {tuple(batch.shape[-2:])}")

    levels = [batch]
    for _ in range(stages - 1):
        levels.append(downsample2x(levels[-1]))
    return levels[::-1]


def build_pyramid(patch: ImageTensor, stages: int) -> ImagePyramid:
    """
    Ground-truth pyramid of one patch by repeated 2x area-average downsampling

    Args:
        patch: Patch of side 8 * 2^(k-1)
        stages: Number of stages k

    Returns:
        ImagePyramid with levels[k-1] == patch
    """
    side = patch.side
    if side < BASE_SIDE or side % BASE_SIDE or not math.log2(side // BASE_SIDE).is_integer():
        raise ConfigError(f"Patch side {side} is not a power-of-two multiple of {BASE_SIDE}")

    datas = pyramid_levels(patch.data, stages)
    levels = [ImageTensor(d, patch.source, patch.offset, patch.transform) for d in datas[:-1]]
    levels.append(patch)
    return ImagePyramid(levels)


def split_dataset(sources: Sequence[str], ratios: Sequence[float], seed: int, name: str = "dataset",
                  augmentation: Optional[Dict[str, bool]] = None
                  ) -> Tuple[DatasetManifest, DatasetManifest, DatasetManifest]:
    """
    Split source images into train / val / test with a seeded shuffle

    Splitting happens at source level so patches of one image never land in two splits.

    Args:
        sources: Unique source identifiers
        ratios: (train, val, test) fractions summing to 1
        seed: Shuffle seed
        name: Dataset name recorded in the manifests
        augmentation: Augmentation flags recorded in the manifests

    Returns:
        (train, val, test) manifests
    """
    if len(ratios) != 3:
        raise ConfigError(f"Expected three split ratios, got {list(ratios)}")
    if any(r < 0 for r in ratios):
        raise ConfigError(f"Split ratios must be non-negative, got {list(ratios)}")
    if not math.isclose(sum(ratios), 1.0, abs_tol=1e-6):
        raise ConfigError(f"Split ratios must sum to 1, got {sum(ratios)}")

    unique = sorted(set(sources))
    if len(unique) != len(sources):
        raise ConfigError("Source identifiers must be unique")

    random.Random(seed).shuffle(unique)
    total = len(unique)
    n_train = min(total, round(ratios[0] * total))
    n_val = min(total - n_train, round(ratios[1] * total))

    parts = {
        "train": unique[:n_train],
        "val": unique[n_train:n_train + n_val],
        "test": unique[n_train + n_val:],
    }
    flags = dict(augmentation or {"rotate": False, "flip": False})
    return tuple(
        DatasetManifest(name=name, split=split, sources=list(items), augmentation=dict(flags), seed=seed)
        for split, items in parts.items()
    )


def patches_frame(patches: Sequence[ImageTensor]) -> pd.DataFrame:
    """Provenance table of a patch list (one row per patch)"""
    return pd.DataFrame(
        [
            {"index": i, "source": p.source, "top": p.offset[0], "left": p.offset[1], "transform": p.transform}
            for i, p in enumerate(patches)
        ],
        columns=["index", "source", "top", "left", "transform"],
    )


def stack_patches(patches: Sequence[ImageTensor]) -> torch.Tensor:
    """Stack equally sized patches into an (N, C, S, S) tensor"""
    if not patches:
        return torch.empty(0)
    return torch.stack([p.data for p in patches])
