"""
Image quality metrics and experiment reports
PSNR and SSIM are computed on de-normalized 8-bit pixels, MSE in the [-1, 1]
training domain. Reports are written as CSV plus a plot-ready JSON file.
"""

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
import torch
import torch.nn as nn
from skimage.metrics import structural_similarity

from src.data.pyramid_data import ImageTensor, denormalize, pyramid_levels
from src.reconstructor import run_cascade, select_stages
from src.sensing import MultiRateSensingMatrix, build_matrices, encode_batch
from src.utils.errors import ConfigError, DataError

logger = logging.getLogger(__name__)

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_TRUNCATE = 3.5
SSIM_COLOR_MODE = "luma"
LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])

Image = Union[ImageTensor, torch.Tensor, np.ndarray]


def to_pixels(image: Image) -> np.ndarray:
    """
    (C, H, W) float64 array in the 8-bit pixel domain

    ImageTensors and torch tensors are taken as normalized [-1, 1] data and
    de-normalized; numpy arrays are taken as pixel values already.
    """
    if isinstance(image, ImageTensor):
        image = image.data
    if isinstance(image, torch.Tensor):
        image = denormalize(image.detach().cpu()).numpy()
    pixels = np.asarray(image, dtype=np.float64)
    if pixels.ndim == 2:
        pixels = pixels[None]
    if pixels.ndim != 3:
        raise ConfigError(f"Expected a (C, H, W) image, got shape {pixels.shape}")
    return pixels


def psnr(x: Image, y: Image, peak: float = 255.0) -> float:
    """
    Peak signal-to-noise ratio in dB

    Args:
        x, y: Images of the same shape
        peak: Maximum pixel value

    Returns:
        10 log10(peak^2 / MSE) with the MSE averaged over all channels; math.inf for identical images
    """
    a, b = to_pixels(x), to_pixels(y)
    if a.shape != b.shape:
        raise ConfigError(f"Shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak ** 2 / mse)


def _luma(pixels: np.ndarray) -> np.ndarray:
    if pixels.shape[0] == 1:
        return pixels[0]
    if pixels.shape[0] == 3:
        return np.tensordot(LUMA_WEIGHTS, pixels, axes=1)
    raise ConfigError(f"Unsupported channel count {pixels.shape[0]}")


def gaussian_window_side(sigma: float) -> int:
    """Side of the Gaussian window structural_similarity uses (truncated at 3.5 sigma)"""
    return 2 * int(SSIM_TRUNCATE * sigma + 0.5) + 1


def ssim(x: Image, y: Image, window: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA,
         k1: float = 0.01, k2: float = 0.03, peak: float = 255.0) -> float:
    """
    Mean structural similarity over Gaussian-weighted windows

    Color images are compared on their luma. Only windows lying fully inside the
    image contribute, and variances use the population (1/n) form.

    Args:
        x, y: Images of the same shape
        window: Window side; must match the Gaussian support of sigma
        sigma: Gaussian standard deviation
        k1, k2: Stabilizing constants
        peak: Dynamic range of the pixels

    Returns:
        SSIM in [-1, 1]
    """
    a, b = to_pixels(x), to_pixels(y)
    if a.shape != b.shape:
        raise ConfigError(f"Shape mismatch: {a.shape} vs {b.shape}")
    if window < 3 or window % 2 == 0:
        raise ConfigError(f"SSIM window must be odd and at least 3, got {window}")
    if window != gaussian_window_side(sigma):
        raise ConfigError(f"SSIM window {window} does not match sigma={sigma} "
                          f"(Gaussian support {gaussian_window_side(sigma)})")
    if min(a.shape[1:]) < window:
        raise ConfigError(f"Image {a.shape[1]}x{a.shape[2]} is smaller than the {window}x{window} SSIM window")

    return float(structural_similarity(
        _luma(a), _luma(b),
        gaussian_weights=True, sigma=sigma, use_sample_covariance=False,
        K1=k1, K2=k2, data_range=peak,
    ))


def mse(x: torch.Tensor, y: torch.Tensor) -> float:
    """Mean squared error of normalized images"""
    if x.shape != y.shape:
        raise ConfigError(f"Shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")
    return float(torch.mean((x.double() - y.double()) ** 2))


def image_quality(reconstruction: torch.Tensor, truth: torch.Tensor) -> Dict[str, float]:
    """PSNR, SSIM and MSE of one (C, H, W) level; SSIM is NaN below the window size"""
    side = truth.shape[-1]
    return {
        "psnr": psnr(reconstruction, truth),
        "ssim": ssim(reconstruction, truth) if side >= SSIM_WINDOW else math.nan,
        "mse": mse(reconstruction, truth),
    }


@dataclass
class QualityReport:
    """Mean quality of one dataset at one CR, per reconstructed pyramid level"""

    dataset: str
    cr: float
    measurements: int
    samples: int
    levels: List[Dict[str, float]] = field(default_factory=list)
    config_hash: str = ""
    ssim_color_mode: str = SSIM_COLOR_MODE

    @property
    def depth(self) -> int:
        return len(self.levels)

    @property
    def final(self) -> Dict[str, float]:
        return self.levels[-1]

    def rows(self) -> List[dict]:
        return [
            {"dataset": self.dataset, "cr": self.cr, "measurements": self.measurements,
             "samples": self.samples, **level}
            for level in self.levels
        ]


def evaluate(bundle, images: torch.Tensor, cr_list: Sequence[float], dataset: str = "dataset",
             batch_size: int = 64, matrices: Optional[MultiRateSensingMatrix] = None) -> List[QualityReport]:
    """
    Encode every test patch at each CR, reconstruct and compare every level

    Args:
        bundle: Cascade bundle (anything with sensing, stage_dims, thresholds and cascade(y, depth))
        images: (N, C, S, S) normalized test patches
        cr_list: Compression ratios; a CR keeps floor(N / CR) measurements per channel
        dataset: Dataset name for the reports
        batch_size: Inference batch size
        matrices: Sensing matrices; regenerated from bundle.sensing when omitted

    Returns:
        One QualityReport per CR
    """
    if images.dim() != 4 or images.shape[0] == 0:
        raise DataError("Cannot evaluate on an empty dataset")

    sensing = bundle.sensing
    matrices = matrices or build_matrices(sensing)
    final_dim = sensing.stage_dims[-1]
    reports = []

    for cr in cr_list:
        if cr <= 0:
            raise ConfigError(f"CR must be positive, got {cr}")
        length = math.floor(sensing.signal_dim / cr)
        if length > final_dim:
            logger.warning("CR %s asks for %d measurements; the encoder stops at %d", cr, length, final_dim)
            length = final_dim
        depth = select_stages(length, bundle)

        per_level: List[List[Dict[str, float]]] = [[] for _ in range(depth)]
        for batch in images.split(batch_size):
            y = encode_batch(batch, matrices)[..., :length]
            outputs = bundle.cascade(y, depth)
            truths = pyramid_levels(batch, sensing.stages)
            for i, output in enumerate(outputs):
                output = output.detach().cpu()
                for n in range(batch.shape[0]):
                    per_level[i].append(image_quality(output[n], truths[i][n]))

        levels = []
        for i, rows in enumerate(per_level, start=1):
            frame = pd.DataFrame(rows)
            levels.append({
                "stage": i,
                "side": int(truths[i - 1].shape[-1]),
                "psnr": float(frame["psnr"].mean()),
                "ssim": float(frame["ssim"].mean()),
                "mse": float(frame["mse"].mean()),
            })
        report = QualityReport(dataset, float(cr), length, int(images.shape[0]), levels,
                               getattr(bundle, "config_hash", ""))
        logger.info("%s CR=%s: depth %d, PSNR %.2f dB, SSIM %.4f", dataset, cr, depth,
                    report.final["psnr"], report.final["ssim"])
        reports.append(report)
    return reports


def _json_safe(value):
    if isinstance(value, float) and not math.isfinite(value):
        return None if math.isnan(value) else ("inf" if value > 0 else "-inf")
    if isinstance(value, dict):
        return {k: _json_safe(v) for k, v in value.items()}
    if isinstance(value, list):
        return [_json_safe(v) for v in value]
    return value


def write_csv(frame: pd.DataFrame, path: str, config_hash: str, notes: Optional[Dict[str, str]] = None) -> None:
    """CSV with a leading # config_hash line (and optional # key=value notes)"""
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", newline="") as f:
        f.write(f"# config_hash={config_hash}\n")
        for key, value in (notes or {}).items():
            f.write(f"# {key}={value}\n")
        frame.to_csv(f, index=False)


def write_quality_reports(reports: Sequence[QualityReport], out_dir: str, config_hash: str = "") -> Dict[str, str]:
    """Write quality.csv and quality.json"""
    frame = pd.DataFrame([row for r in reports for row in r.rows()])
    csv_path = os.path.join(out_dir, "quality.csv")
    json_path = os.path.join(out_dir, "quality.json")
    write_csv(frame, csv_path, config_hash, {"ssim_color_mode": SSIM_COLOR_MODE, "mse_domain": "normalized"})
    with open(json_path, "w") as f:
        json.dump(_json_safe({"config_hash": config_hash, "ssim_color_mode": SSIM_COLOR_MODE,
                              "reports": [asdict(r) for r in reports]}), f, indent=2)
    return {"csv": csv_path, "json": json_path}


def per_stage_mse(generators: Sequence[nn.Module], images: torch.Tensor, matrices: MultiRateSensingMatrix,
                  batch_size: int = 64, device: str = "cpu") -> List[float]:
    """
    Mean test MSE of every stage output against its pyramid level

    Args:
        generators: Trained stage generators 1..d
        images: (N, C, S, S) normalized patches
        matrices: Sensing matrices
        batch_size: Inference batch size
        device: Inference device

    Returns:
        d per-image-averaged MSE values
    """
    if images.dim() != 4 or images.shape[0] == 0:
        raise DataError("Cannot measure MSE on an empty dataset")
    depth = len(generators)
    for g in generators:
        g.eval()

    totals = np.zeros(depth)
    with torch.no_grad():
        for batch in images.split(batch_size):
            batch = batch.to(device)
            y = encode_batch(batch, matrices)
            truths = pyramid_levels(batch, matrices.config.stages)
            outputs = run_cascade(generators, y, matrices.stage_dims, depth)
            for i, output in enumerate(outputs):
                per_image = ((output.double() - truths[i].double()) ** 2).flatten(1).mean(dim=1)
                totals[i] += float(per_image.sum())
    return (totals / images.shape[0]).tolist()


def summarize_ablation(frame: pd.DataFrame) -> pd.DataFrame:
    """Seed-averaged test MSE per (variant, stage)"""
    summary = frame.groupby(["variant", "stage"])["test_mse"].agg(["mean", "std", "count"]).reset_index()
    return summary.rename(columns={"mean": "test_mse", "std": "test_mse_std", "count": "seeds"})


def write_ablation(frame: pd.DataFrame, out_dir: str, config_hash: str = "") -> Dict[str, str]:
    """Write ablation.csv (per-seed and mean rows) and a plot-ready ablation.json"""
    summary = summarize_ablation(frame)
    combined = pd.concat([
        frame.assign(seed=frame["seed"].astype(str)),
        summary[["variant", "stage", "test_mse"]].assign(seed="mean"),
    ], ignore_index=True)[["seed", "variant", "stage", "test_mse"]]

    csv_path = os.path.join(out_dir, "ablation.csv")
    json_path = os.path.join(out_dir, "ablation.json")
    write_csv(combined, csv_path, config_hash)

    curves = {
        variant: {
            "stage": group["stage"].astype(int).tolist(),
            "test_mse": group["test_mse"].tolist(),
            "test_mse_std": group["test_mse_std"].fillna(0.0).tolist(),
        }
        for variant, group in summary.sort_values("stage").groupby("variant")
    }
    with open(json_path, "w") as f:
        json.dump(_json_safe({"config_hash": config_hash, "seeds": sorted(frame["seed"].unique().tolist()),
                              "curves": curves}), f, indent=2)
    return {"csv": csv_path, "json": json_path}
