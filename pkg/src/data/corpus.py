"""
Training corpus assembly
Turns a [data] config section into train / val / test patch tensors plus manifests
"""

import logging
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import torch

from src.data.dataset_sources import fetch_image_archive, load_cifar10, load_image_directory, load_mnist
from src.data.pyramid_data import (
    DatasetManifest,
    ImageTensor,
    augment,
    extract_patches,
    patches_frame,
    split_dataset,
    stack_patches,
)
from src.utils.errors import ConfigError, DataError

logger = logging.getLogger(__name__)

DATASETS = ("mnist", "cifar10", "images")
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class DataConfig:
    """[data] section of the experiment config"""

    dataset: str = "mnist"
    root: str = ""
    image_dir: str = ""
    archive_url: str = ""
    limit: int = 0
    splits: Tuple[float, float, float] = (0.8, 0.1, 0.1)
    patch_side: int = 64
    stride: int = 16
    rotate: bool = False
    flip: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.dataset not in DATASETS:
            raise ConfigError(f"Unknown dataset '{self.dataset}', expected one of {DATASETS}")
        if self.dataset == "images" and not (self.image_dir or self.archive_url):
            raise ConfigError("dataset = 'images' needs data.image_dir or data.archive_url")
        if self.limit < 0:
            raise ConfigError(f"data.limit must be >= 0, got {self.limit}")
        object.__setattr__(self, "splits", tuple(float(r) for r in self.splits))

    @property
    def data_root(self) -> str:
        return self.root or os.getenv("LAPRAN_DATA_DIR", "data")


@dataclass
class Corpus:
    """Patch tensors (N, C, S, S) per split with their manifests and provenance"""

    tensors: Dict[str, torch.Tensor]
    manifests: Dict[str, DatasetManifest]
    patches: Dict[str, List[ImageTensor]] = field(repr=False)

    @property
    def train(self) -> torch.Tensor:
        return self.tensors["train"]

    @property
    def val(self) -> torch.Tensor:
        return self.tensors["val"]

    @property
    def test(self) -> torch.Tensor:
        return self.tensors["test"]

    def save_manifests(self, out_dir: str, config_hash: str = "") -> None:
        """Write <split>_manifest.json and patches_<split>.csv"""
        os.makedirs(out_dir, exist_ok=True)
        for split in SPLITS:
            self.manifests[split].save(os.path.join(out_dir, f"{split}_manifest.json"), config_hash)
            csv_path = os.path.join(out_dir, f"patches_{split}.csv")
            with open(csv_path, "w", newline="") as f:
                f.write(f"# config_hash={config_hash}\n")
                patches_frame(self.patches[split]).to_csv(f, index=False)


def load_sources(config: DataConfig, channels: int) -> List[ImageTensor]:
    """Full-size source images of the configured dataset"""
    limit = config.limit or None
    if config.dataset == "mnist":
        return load_mnist(config.data_root, "train", limit, channels)
    if config.dataset == "cifar10":
        return load_cifar10(config.data_root, "train", limit, channels)

    image_dir = config.image_dir or fetch_image_archive(config.archive_url, config.data_root)
    images = load_image_directory(image_dir, channels)
    return images[:limit] if limit else images


def build_corpus(config: DataConfig, channels: int, patch_side: int,
                 sources: Optional[List[ImageTensor]] = None) -> Corpus:
    """
    Split sources, cut patches and augment the training split

    Args:
        config: Data section
        channels: Image channels
        patch_side: Side required by the pyramid (8 * 2^(k-1))
        sources: Pre-loaded source images; loaded from the config when omitted

    Returns:
        Corpus
    """
    if config.patch_side != patch_side:
        raise ConfigError(f"data.patch_side={config.patch_side} but the pyramid needs {patch_side}")
    if sources is None:
        sources = load_sources(config, channels)
    if not sources:
        raise DataError(f"No source images for dataset '{config.dataset}'")

    by_source = {image.source: image for image in sources}
    flags = {"rotate": config.rotate, "flip": config.flip}
    manifests = dict(zip(SPLITS, split_dataset(list(by_source), config.splits, config.seed, config.dataset, flags)))

    tensors, patches = {}, {}
    for split in SPLITS:
        images = [by_source[s] for s in sorted(manifests[split].sources)]
        usable = [im for im in images if min(im.height, im.width) >= patch_side]
        if len(usable) < len(images):
            logger.warning("Dropped %d %s images smaller than %d pixels", len(images) - len(usable), split, patch_side)

        split_patches = extract_patches(usable, patch_side, config.stride)
        if split == "train" and (config.rotate or config.flip):
            split_patches = [a for p in split_patches for a in augment(p, config.rotate, config.flip)]

        manifests[split].patch_count = len(split_patches)
        patches[split] = split_patches
        tensors[split] = stack_patches(split_patches) if split_patches else torch.empty(0, channels, patch_side, patch_side)
        logger.info("%s split: %d sources, %d patches", split, len(images), len(split_patches))

    return Corpus(tensors, manifests, patches)
