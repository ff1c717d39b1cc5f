"""
Stage weight containers
Named-tensor storage of one stage's generator and discriminator, weight transfer
between adjacent stages and the weights.pt / manifest.json pair on disk
"""

import copy
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Tuple

import torch
import torch.nn as nn

from src.models.ran import StageModelSpec, build_stage_networks
from src.utils.errors import DataError

logger = logging.getLogger(__name__)

WEIGHTS_FILE = "weights.pt"
MANIFEST_FILE = "manifest.json"


@dataclass
class TransferReport:
    """Which destination tensors were copied from the source stage"""

    source_stage: int
    target_stage: int
    copied: List[str] = field(default_factory=list)
    fresh: List[str] = field(default_factory=list)

    @property
    def copied_fraction(self) -> float:
        total = len(self.copied) + len(self.fresh)
        return len(self.copied) / total if total else 0.0

    def to_dict(self) -> dict:
        payload = asdict(self)
        payload["copied_fraction"] = self.copied_fraction
        return payload


@dataclass
class StageWeights:
    """Parameters and buffers of one stage plus their provenance"""

    spec: StageModelSpec
    generator: Dict[str, torch.Tensor]
    discriminator: Dict[str, torch.Tensor]
    provenance: str = "fresh"
    transfer: Optional[TransferReport] = None

    @classmethod
    def fresh(cls, spec: StageModelSpec, seed: Optional[int] = None) -> "StageWeights":
        generator, discriminator = build_stage_networks(spec, seed)
        return cls.from_networks(spec, generator, discriminator)

    @classmethod
    def from_networks(cls, spec: StageModelSpec, generator: nn.Module, discriminator: nn.Module,
                      provenance: str = "fresh", transfer: Optional[TransferReport] = None) -> "StageWeights":
        return cls(spec, _detached(generator.state_dict()), _detached(discriminator.state_dict()), provenance, transfer)

    def named_tensors(self) -> Dict[str, torch.Tensor]:
        """All tensors keyed "generator.<name>" / "discriminator.<name>" """
        tensors = {f"generator.{k}": v for k, v in self.generator.items()}
        tensors.update({f"discriminator.{k}": v for k, v in self.discriminator.items()})
        return tensors

    def build(self, device: str = "cpu") -> Tuple[nn.Module, nn.Module]:
        """Instantiate networks carrying these weights"""
        generator, discriminator = build_stage_networks(self.spec)
        generator.load_state_dict(self.generator)
        discriminator.load_state_dict(self.discriminator)
        return generator.to(device), discriminator.to(device)

    def is_finite(self) -> bool:
        return all(torch.isfinite(t).all() for t in self.named_tensors().values() if t.is_floating_point())

    def manifest(self) -> dict:
        return {
            "stage": self.spec.stage,
            "spec": asdict(self.spec),
            "provenance": self.provenance,
            "transfer": self.transfer.to_dict() if self.transfer else None,
            "tensors": [
                {"name": name, "shape": list(t.shape), "dtype": str(t.dtype).replace("torch.", "")}
                for name, t in self.named_tensors().items()
            ],
        }


def _detached(state: Dict[str, torch.Tensor]) -> Dict[str, torch.Tensor]:
    return {k: v.detach().cpu().clone() for k, v in state.items()}


def transfer_weights(source: StageWeights, target_spec: StageModelSpec,
                     seed: Optional[int] = None) -> Tuple[StageWeights, TransferReport]:
    """
    Initialize a stage from the previous stage's weights

    Every destination tensor whose name and shape match a source tensor is copied;
    the rest keep their fresh initialization.

    Args:
        source: Trained weights of stage i-1
        target_spec: Spec of stage i
        seed: Seed for the fresh initialization of unmatched tensors

    Returns:
        (StageWeights for stage i, TransferReport)
    """
    fresh = StageWeights.fresh(target_spec, seed)
    report = TransferReport(source.spec.stage, target_spec.stage)
    source_tensors = source.named_tensors()

    merged = {}
    for name, tensor in fresh.named_tensors().items():
        candidate = source_tensors.get(name)
        if candidate is not None and candidate.shape == tensor.shape and candidate.dtype == tensor.dtype:
            merged[name] = candidate.clone()
            report.copied.append(name)
        else:
            merged[name] = tensor
            report.fresh.append(name)

    generator = {k[len("generator."):]: v for k, v in merged.items() if k.startswith("generator.")}
    discriminator = {k[len("discriminator."):]: v for k, v in merged.items() if k.startswith("discriminator.")}
    weights = StageWeights(target_spec, generator, discriminator,
                           provenance=f"transferred-from-stage-{source.spec.stage}", transfer=report)

    logger.info("Stage %d <- stage %d: copied %d tensors, %d fresh (%.0f%%)",
                target_spec.stage, source.spec.stage, len(report.copied), len(report.fresh),
                100 * report.copied_fraction)
    return weights, report


def save_stage_weights(weights: StageWeights, stage_dir: str, extra: Optional[dict] = None) -> None:
    """Write weights.pt and manifest.json into a stage directory"""
    os.makedirs(stage_dir, exist_ok=True)
    torch.save(
        {
            "spec": asdict(weights.spec),
            "generator": weights.generator,
            "discriminator": weights.discriminator,
            "provenance": weights.provenance,
            "transfer": weights.transfer.to_dict() if weights.transfer else None,
        },
        os.path.join(stage_dir, WEIGHTS_FILE),
    )
    manifest = weights.manifest()
    manifest.update(extra or {})
    with open(os.path.join(stage_dir, MANIFEST_FILE), "w") as f:
        json.dump(manifest, f, indent=2)


def load_stage_weights(stage_dir: str) -> StageWeights:
    """Read the StageWeights saved by save_stage_weights"""
    path = os.path.join(stage_dir, WEIGHTS_FILE)
    if not os.path.exists(path):
        raise DataError(f"No stage weights at {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)

    transfer = payload.get("transfer")
    report = None
    if transfer:
        transfer = copy.deepcopy(transfer)
        transfer.pop("copied_fraction", None)
        report = TransferReport(**transfer)
    return StageWeights(StageModelSpec(**payload["spec"]), payload["generator"], payload["discriminator"],
                        payload.get("provenance", "fresh"), report)
