"""
Experiment configuration
TOML file with [sensing], [model], [train], [data] and [loss] sections.
Precedence: built-in defaults < config file < command-line overrides.
"""

import copy
import hashlib
import json
import logging
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import asdict, dataclass, fields, replace
from typing import Any, Dict, Optional

from src.data.corpus import DataConfig
from src.models.losses import LossWeights
from src.models.ran import ModelConfig
from src.sensing import SensingConfig, base_dim_for_cr
from src.trainer import TrainConfig
from src.utils.errors import ConfigError

logger = logging.getLogger(__name__)

DEFAULT_SENSING = {"m": None, "cr": None, "beta": "2", "k": 4, "N": 4096, "channels": 1, "seed": 0}
DEFAULT_BASE_DIM = 128


def _defaults(cls) -> Dict[str, Any]:
    return {f.name: getattr(cls(), f.name) for f in fields(cls)}


SECTION_DEFAULTS = {
    "sensing": DEFAULT_SENSING,
    "model": _defaults(ModelConfig),
    "train": {k: v for k, v in _defaults(TrainConfig).items() if k != "loss"},
    "data": _defaults(DataConfig),
    "loss": _defaults(LossWeights),
}


def _coerce(section: str, key: str, value: Any, default: Any) -> Any:
    where = f"{section}.{key}"
    if default is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be true or false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where} must be an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} must be a number, got {value!r}")
        return float(value)
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where} must be a list, got {value!r}")
        return tuple(value)
    if isinstance(default, dict):
        if not isinstance(value, dict):
            raise ConfigError(f"{where} must be a table, got {value!r}")
        return dict(value)
    if isinstance(default, str) and key != "beta" and not isinstance(value, str):
        raise ConfigError(f"{where} must be a string, got {value!r}")
    return value


def merge_sections(base: Dict[str, Dict], update: Dict[str, Any]) -> Dict[str, Dict]:
    """Overlay a raw config mapping onto `base`, rejecting unknown sections and keys"""
    merged = copy.deepcopy(base)
    for section, values in update.items():
        if section not in SECTION_DEFAULTS:
            raise ConfigError(f"Unknown config section [{section}]")
        if not isinstance(values, dict):
            raise ConfigError(f"[{section}] must be a table")
        for key, value in values.items():
            if key not in SECTION_DEFAULTS[section]:
                raise ConfigError(f"Unknown key '{key}' in [{section}]")
            merged[section][key] = _coerce(section, key, value, SECTION_DEFAULTS[section][key])
    return merged


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated experiment configuration"""

    sensing: SensingConfig
    model: ModelConfig
    train: TrainConfig
    data: DataConfig

    @classmethod
    def from_sections(cls, raw: Dict[str, Dict]) -> "ExperimentConfig":
        s = raw["sensing"]
        if s["m"] is not None and s["cr"] is not None:
            raise ConfigError("[sensing] takes either m or cr, not both")
        if s["cr"] is not None:
            if isinstance(s["cr"], bool) or not isinstance(s["cr"], (int, float)) or not s["cr"] > 0:
                raise ConfigError(f"sensing.cr must be positive, got {s['cr']}")
            base_dim = base_dim_for_cr(s["cr"], s["beta"], s["k"], s["N"])
        else:
            base_dim = DEFAULT_BASE_DIM if s["m"] is None else s["m"]

        sensing = SensingConfig(base_dim=base_dim, beta=s["beta"], stages=s["k"], signal_dim=s["N"],
                                channels=s["channels"], seed=s["seed"])
        loss = LossWeights(**raw["loss"])
        return cls(
            sensing=sensing,
            model=ModelConfig(**raw["model"]),
            train=TrainConfig(**raw["train"], loss=loss),
            data=DataConfig(**raw["data"]),
        )

    def to_dict(self) -> Dict[str, Any]:
        train = self.train.snapshot()
        loss = train.pop("loss")
        model = asdict(self.model)
        model["thresholds"] = {str(k): v for k, v in sorted(self.model.thresholds.items())}
        data = asdict(self.data)
        data["splits"] = list(self.data.splits)
        return {"sensing": self.sensing.to_dict(), "model": model, "train": train, "data": data, "loss": loss}

    @property
    def config_hash(self) -> str:
        """First 12 hex digits of SHA-256 over the canonical JSON, train.stages excluded"""
        payload = self.to_dict()
        payload["train"].pop("stages", None)
        canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:12]

    def with_stages(self, stages) -> "ExperimentConfig":
        return replace(self, train=replace(self.train, stages=tuple(stages)))


def read_toml(path: str) -> Dict[str, Any]:
    try:
        with open(path, "rb") as f:
            return tomllib.load(f)
    except FileNotFoundError as e:
        raise ConfigError(f"Config file not found: {path}") from e
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"Invalid TOML in {path}: {e}") from e


def load_config(path: Optional[str] = None, overrides: Optional[Dict[str, Dict]] = None,
                seed: Optional[int] = None) -> ExperimentConfig:
    """
    Build the experiment config from defaults, an optional TOML file and flag overrides

    Args:
        path: TOML config file
        overrides: Section -> key -> value from command-line flags
        seed: Overrides sensing.seed, train.seed and data.seed

    Returns:
        ExperimentConfig
    """
    raw = copy.deepcopy(SECTION_DEFAULTS)
    if path:
        raw = merge_sections(raw, read_toml(path))
        logger.info("Loaded config %s", path)
    if overrides:
        # an explicit m or cr flag replaces the other one from the file
        flags = overrides.get("sensing", {})
        if "cr" in flags:
            raw["sensing"]["m"] = None
        if "m" in flags:
            raw["sensing"]["cr"] = None
        raw = merge_sections(raw, overrides)
    if seed is not None:
        raw = merge_sections(raw, {"sensing": {"seed": seed}, "train": {"seed": seed}, "data": {"seed": seed}})
    return ExperimentConfig.from_sections(raw)


def config_from_manifest(manifest: Dict[str, Any]) -> ExperimentConfig:
    """Rebuild the config snapshot stored in a run_manifest.json"""
    if "config" not in manifest:
        raise ConfigError("Run manifest has no config snapshot")
    return ExperimentConfig.from_sections(merge_sections(copy.deepcopy(SECTION_DEFAULTS), manifest["config"]))
