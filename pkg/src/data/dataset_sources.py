"""
Dataset sources for training and evaluation
MNIST and CIFAR10 through torchvision, image-directory corpora (T91, BSD200, Set5, Set14)
from local folders or downloaded zip archives, all cached under a local data root
"""

import glob
import logging
import os
import time
import zipfile
from typing import List, Optional

import numpy as np
import requests
from PIL import Image
from torchvision import datasets

from src.data.pyramid_data import ImageTensor, normalize_pixels
from src.utils.errors import DataError

logger = logging.getLogger(__name__)

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")

# MNIST and CIFAR10 images are resized to the 64 x 64 pipeline size
DATASET_SIDE = 64


def download_file(url: str, local_path: str, max_retries: int = 3, timeout: int = 60) -> str:
    """
    Download a file unless it is already cached

    Args:
        url: Remote location
        local_path: Destination path
        max_retries: Attempts before giving up
        timeout: Per-request timeout in seconds

    Returns:
        Path to the local file
    """
    if os.path.exists(local_path) and os.path.getsize(local_path) > 0:
        return local_path

    os.makedirs(os.path.dirname(local_path) or ".", exist_ok=True)
    logger.info("Downloading %s", url)

    for attempt in range(max_retries):
        try:
            response = requests.get(url, timeout=timeout)
            if response.status_code == 404:
                raise DataError(f"Dataset file not found (404): {url}")
            response.raise_for_status()

            temp_path = local_path + ".part"
            with open(temp_path, "wb") as f:
                f.write(response.content)
            os.replace(temp_path, local_path)
            logger.info("Saved %s (%d bytes)", local_path, os.path.getsize(local_path))
            return local_path

        except requests.RequestException as e:
            logger.warning("Attempt %d/%d failed for %s: %s", attempt + 1, max_retries, url, e)
            if attempt < max_retries - 1:
                time.sleep(2)
            else:
                raise DataError(f"Failed to download {url} after {max_retries} attempts: {e}") from e


def _to_image_tensor(image: Image.Image, channels: int, source: str, resize: Optional[int]) -> ImageTensor:
    image = image.convert("L" if channels == 1 else "RGB")
    if resize and image.size != (resize, resize):
        image = image.resize((resize, resize), Image.BICUBIC)
    return ImageTensor(normalize_pixels(np.asarray(image)), source)


def _torchvision_images(dataset_cls, name: str, root: str, split: str, limit: Optional[int],
                        channels: int) -> List[ImageTensor]:
    if split not in ("train", "test"):
        raise DataError(f"Unknown {name} split: {split}")
    try:
        dataset = dataset_cls(root=root, train=split == "train", download=True)
    except (RuntimeError, OSError) as e:
        raise DataError(f"Failed to load {name} under {root}: {e}") from e

    count = min(limit, len(dataset)) if limit else len(dataset)
    images = [
        _to_image_tensor(dataset[i][0], channels, f"{name}/{split}/{i:05d}", DATASET_SIDE)
        for i in range(count)
    ]
    logger.info("Loaded %d %s %s images", len(images), name, split)
    return images


def load_mnist(root: str, split: str = "train", limit: Optional[int] = None, channels: int = 1) -> List[ImageTensor]:
    """
    MNIST digits resized to 64 x 64 (bicubic)

    Args:
        root: Data cache directory
        split: "train" or "test" (the official files)
        limit: Keep only the first `limit` images
        channels: 1 (gray) or 3 (replicated)

    Returns:
        List of ImageTensors with sources "mnist/<split>/<index>"
    """
    return _torchvision_images(datasets.MNIST, "mnist", root, split, limit, channels)


def load_cifar10(root: str, split: str = "train", limit: Optional[int] = None, channels: int = 3) -> List[ImageTensor]:
    """
    CIFAR10 images resized to 64 x 64 (bicubic)

    Args:
        root: Data cache directory
        split: "train" (data_batch_1..5) or "test" (test_batch)
        limit: Keep only the first `limit` images
        channels: 3 (RGB) or 1 (luma)

    Returns:
        List of ImageTensors with sources "cifar10/<split>/<index>"
    """
    return _torchvision_images(datasets.CIFAR10, "cifar10", root, split, limit, channels)


def fetch_image_archive(url: str, root: str) -> str:
    """
    Download and unpack a zip archive of images

    Args:
        url: Archive location
        root: Data cache directory

    Returns:
        Directory holding the extracted images
    """
    name = os.path.splitext(os.path.basename(url.rstrip("/")))[0] or "images"
    target = os.path.join(root, name)
    if os.path.isdir(target) and os.listdir(target):
        return target

    archive = download_file(url, os.path.join(root, f"{name}.zip"))
    try:
        with zipfile.ZipFile(archive) as zf:
            zf.extractall(target)
    except zipfile.BadZipFile as e:
        raise DataError(f"{archive} is not a zip archive") from e
    return target


def load_image_directory(path: str, channels: int = 1) -> List[ImageTensor]:
    """
    Load every image under a directory (recursively), sorted by path

    Args:
        path: Directory of PNG/JPEG/BMP/TIFF images
        channels: 1 (luma) or 3 (RGB)

    Returns:
        List of full-size ImageTensors, source = path relative to the directory
    """
    if not os.path.isdir(path):
        raise DataError(f"Image directory not found: {path}")

    files = sorted(
        f for f in glob.glob(os.path.join(path, "**", "*"), recursive=True)
        if f.lower().endswith(IMAGE_EXTENSIONS)
    )
    if not files:
        raise DataError(f"No images found in {path}")

    images = []
    for file_path in files:
        try:
            with Image.open(file_path) as image:
                pixels = np.asarray(image.convert("L" if channels == 1 else "RGB"))
        except OSError as e:
            raise DataError(f"Cannot read image {file_path}: {e}") from e
        images.append(ImageTensor(normalize_pixels(pixels), os.path.relpath(file_path, path)))
    logger.info("Loaded %d images from %s", len(images), path)
    return images


def load_image(path: str, channels: int = 1, resize: Optional[int] = None) -> ImageTensor:
    """Load a single image file, optionally bicubic-resized to resize x resize"""
    try:
        with Image.open(path) as image:
            return _to_image_tensor(image, channels, path, resize)
    except OSError as e:
        raise DataError(f"Cannot read image {path}: {e}") from e
