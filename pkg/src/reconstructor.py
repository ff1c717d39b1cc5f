"""
Flexible CS reconstruction
Selects the deepest stage the measurement budget supports and runs the frozen
cascade once, returning every intermediate resolution
"""

import json
import logging
import os
import time
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
import torch
import torch.nn as nn
from PIL import Image

from src.data.measurement_io import read_measurements
from src.data.pyramid_data import ImagePyramid, ImageTensor, denormalize
from src.models.ran import ModelConfig, stage_model_specs
from src.models.stage_weights import StageWeights, load_stage_weights
from src.sensing import MeasurementSet, SensingConfig
from src.utils.errors import ConfigError, DataError

logger = logging.getLogger(__name__)

RUN_MANIFEST = "run_manifest.json"


def run_cascade(generators: Sequence[nn.Module], y: torch.Tensor, stage_dims: Sequence[int],
                depth: int) -> List[torch.Tensor]:
    """
    Feed-forward pass through stages 1..depth

    Args:
        generators: Stage generators in order
        y: (B, C, L) measurements with L >= stage_dims[depth - 1]
        stage_dims: Measurement count per stage
        depth: Number of stages to run

    Returns:
        Output of every stage, coarsest first
    """
    if not 1 <= depth <= len(generators):
        raise ConfigError(f"Cascade depth {depth} outside 1..{len(generators)}")
    if y.shape[-1] < stage_dims[depth - 1]:
        raise ConfigError(f"Depth {depth} needs {stage_dims[depth - 1]} measurements, got {y.shape[-1]}")

    output = generators[0](y[..., :stage_dims[0]])
    levels = [output]
    for i in range(1, depth):
        output, _, _ = generators[i](output, y[..., :stage_dims[i]])
        levels.append(output)
    return levels


def default_thresholds(config: SensingConfig) -> List[Fraction]:
    """Architectural CR thresholds N / stage_dims[i]"""
    return config.compression_ratios()


@dataclass
class CascadeBundle:
    """Frozen stage generators with their measurement budget and CR thresholds"""

    sensing: SensingConfig
    weights: List[StageWeights]
    thresholds: List[Fraction] = field(default_factory=list)
    config_hash: str = ""
    device: str = "cpu"
    generators: List[nn.Module] = field(default_factory=list, repr=False)

    def __post_init__(self):
        if not self.weights:
            raise ConfigError("A cascade bundle needs at least one stage")
        for i, w in enumerate(self.weights, start=1):
            if w.spec.stage != i:
                raise ConfigError(f"Bundle stage {i} holds weights of stage {w.spec.stage}")
            if w.spec.measurement_dim != self.sensing.stage_dims[i - 1]:
                raise ConfigError(f"Stage {i} was built for {w.spec.measurement_dim} measurements, "
                                  f"sensing config gives {self.sensing.stage_dims[i - 1]}")

        architectural = default_thresholds(self.sensing)[: len(self.weights)]
        if not self.thresholds:
            self.thresholds = architectural
        self.thresholds = [Fraction(t).limit_denominator(10 ** 6) if not isinstance(t, Fraction) else t
                           for t in self.thresholds][: len(self.weights)]
        for i, (given, bound) in enumerate(zip(self.thresholds, architectural), start=1):
            if given > bound:
                raise ConfigError(f"Stage {i} CR threshold {float(given):.3f} exceeds the architectural "
                                  f"limit {float(bound):.3f}")

        if not self.generators:
            self.generators = []
            for w in self.weights:
                generator, _ = w.build(self.device)
                generator.eval()
                for p in generator.parameters():
                    p.requires_grad_(False)
                self.generators.append(generator)

    @classmethod
    def from_weights(cls, sensing: SensingConfig, weights: List[StageWeights],
                     overrides: Optional[Dict[int, float]] = None, config_hash: str = "",
                     device: str = "cpu") -> "CascadeBundle":
        thresholds = default_thresholds(sensing)[: len(weights)]
        for stage, value in (overrides or {}).items():
            if not 1 <= stage <= len(thresholds):
                raise ConfigError(f"Threshold override for unknown stage {stage}")
            thresholds[stage - 1] = Fraction(value).limit_denominator(10 ** 6)
        return cls(sensing, list(weights), thresholds, config_hash, device)

    @property
    def stage_dims(self) -> List[int]:
        return self.sensing.stage_dims[: len(self.weights)]

    @property
    def stages(self) -> int:
        return len(self.weights)

    def cascade(self, y: torch.Tensor, depth: int) -> List[torch.Tensor]:
        """Batched inference on (B, C, L) measurements"""
        with torch.no_grad():
            return run_cascade(self.generators, y.to(self.device), self.stage_dims, depth)


def select_stages(available_len: int, bundle: CascadeBundle) -> int:
    """
    Deepest stage whose full measurement prefix is present and whose CR threshold admits the input

    Args:
        available_len: Measurements per channel on hand
        bundle: Cascade bundle

    Returns:
        1-based index of the deepest enabled stage
    """
    dims = bundle.stage_dims
    if available_len < dims[0]:
        raise DataError(f"insufficient measurements for any stage: {available_len} < {dims[0]}")

    cr = Fraction(bundle.sensing.signal_dim, available_len)
    depth = 0
    for dim, threshold in zip(dims, bundle.thresholds):
        if dim > available_len or cr > threshold:
            break
        depth += 1
    if depth == 0:
        raise DataError(f"insufficient measurements for any stage: CR {float(cr):.2f} above every threshold")
    return depth


def _as_batch(measurements: Union[MeasurementSet, torch.Tensor], bundle: CascadeBundle) -> torch.Tensor:
    if isinstance(measurements, MeasurementSet):
        if measurements.config is not None and measurements.config != bundle.sensing:
            raise DataError("Measurements were encoded with a different sensing config than the bundle")
        data = measurements.final
    else:
        data = measurements
    if data.dim() == 1:
        data = data.unsqueeze(0)
    if data.dim() != 2 or data.shape[0] != bundle.sensing.channels:
        raise DataError(f"Expected ({bundle.sensing.channels}, L) measurements, got {tuple(data.shape)}")
    return data.unsqueeze(0).to(torch.float32)


def reconstruct(measurements: Union[MeasurementSet, torch.Tensor], bundle: CascadeBundle) -> ImagePyramid:
    """
    Reconstruct an image pyramid up to the deepest enabled stage

    Args:
        measurements: MeasurementSet or a raw (C, L) / (L,) prefix tensor
        bundle: Cascade bundle

    Returns:
        ImagePyramid with one level per enabled stage
    """
    y = _as_batch(measurements, bundle)
    depth = select_stages(y.shape[-1], bundle)
    levels = bundle.cascade(y, depth)
    return ImagePyramid([
        ImageTensor(level[0].cpu(), "reconstruction", transform=f"stage{i}")
        for i, level in enumerate(levels, start=1)
    ])


def save_png(image: Union[ImageTensor, torch.Tensor], path: str) -> None:
    """Write a [-1, 1] (C, H, W) image as an 8-bit PNG"""
    data = image.data if isinstance(image, ImageTensor) else image
    pixels = denormalize(data).cpu().numpy()
    if pixels.shape[0] == 1:
        Image.fromarray(pixels[0]).save(path)
    else:
        Image.fromarray(np.ascontiguousarray(np.transpose(pixels, (1, 2, 0)))).save(path)


def reconstruct_file(path: str, bundle: CascadeBundle, output_dir: str) -> Dict:
    """
    Reconstruct an MRCS file and write one PNG per pyramid level

    Args:
        path: MRCS measurement file
        bundle: Cascade bundle
        output_dir: Destination directory (timing.csv is appended there)

    Returns:
        Dictionary with status, depth, written image paths and timing
    """
    config, measurements = read_measurements(path)
    if config != bundle.sensing:
        raise DataError(f"{path} was encoded with {config.to_dict()}, bundle expects {bundle.sensing.to_dict()}")

    start = time.perf_counter()
    pyramid = reconstruct(measurements, bundle)
    milliseconds = (time.perf_counter() - start) * 1000.0

    os.makedirs(output_dir, exist_ok=True)
    images = []
    for i, level in enumerate(pyramid.levels, start=1):
        image_path = os.path.join(output_dir, f"level{i}_{level.side}x{level.side}.png")
        save_png(level, image_path)
        images.append(image_path)

    timing_path = os.path.join(output_dir, "timing.csv")
    row = pd.DataFrame([{
        "file": os.path.basename(path),
        "measurements": measurements.available_length,
        "stages": pyramid.stages,
        "milliseconds": round(milliseconds, 3),
    }])
    new_file = not os.path.exists(timing_path)
    with open(timing_path, "a", newline="") as f:
        if new_file:
            f.write(f"# config_hash={bundle.config_hash}\n")
        row.to_csv(f, header=new_file, index=False)

    if pyramid.stages < bundle.sensing.stages:
        logger.warning("Measurements enable %d of %d stages; reconstructed at %dx%d",
                       pyramid.stages, bundle.sensing.stages, pyramid.sides[-1], pyramid.sides[-1])

    return {
        "status": "success",
        "path": path,
        "depth": pyramid.stages,
        "sides": pyramid.sides,
        "images": images,
        "milliseconds": milliseconds,
        "pyramid": pyramid,
    }


def load_bundle(run_dir: str, device: str = "cpu", fill_missing: bool = False,
                seed: int = 0) -> CascadeBundle:
    """
    Load the trained stages of a run directory

    Args:
        run_dir: runs/<run-id> directory holding run_manifest.json and stage<i>/ folders
        device: Inference device
        fill_missing: Substitute freshly initialized weights for untrained stages
        seed: Initialization seed for substituted stages

    Returns:
        CascadeBundle over the contiguous trained stages (all stages with fill_missing)
    """
    manifest_path = os.path.join(run_dir, RUN_MANIFEST)
    if not os.path.exists(manifest_path):
        raise DataError(f"Not a run directory (no {RUN_MANIFEST}): {run_dir}")
    with open(manifest_path, "r") as f:
        manifest = json.load(f)

    s = manifest["sensing"]
    sensing = SensingConfig(base_dim=s["m"], beta=s["beta"], stages=s["k"], signal_dim=s["N"],
                            channels=s["channels"], seed=s["seed"])
    model = manifest.get("config", {}).get("model", {})
    model_config = ModelConfig(**{k: v for k, v in model.items() if k != "thresholds"})
    specs = stage_model_specs(sensing.stage_dims, sensing.channels, model_config)

    weights = []
    for spec in specs:
        stage_dir = os.path.join(run_dir, f"stage{spec.stage}")
        if os.path.exists(os.path.join(stage_dir, "weights.pt")):
            weights.append(load_stage_weights(stage_dir))
        elif fill_missing:
            logger.warning("Stage %d is not trained; using freshly initialized weights", spec.stage)
            weights.append(StageWeights.fresh(spec, seed + spec.stage))
        else:
            break

    if not weights:
        raise DataError(f"No trained stages in {run_dir}")
    overrides = {int(k): float(v) for k, v in model.get("thresholds", {}).items() if int(k) <= len(weights)}
    return CascadeBundle.from_weights(sensing, weights, overrides, manifest.get("config_hash", ""), device)
