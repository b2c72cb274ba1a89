"""Experiment configuration: network sizes, loss weights and training schedule.

Configuration files are flat ``key=value`` text. Dotted keys address nested
sections (``model.sdf_hidden_width=64``), ``#`` starts a comment and
``include other.cfg`` pulls in another file relative to the including one.
Later assignments win.
"""

import hashlib
import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Literal, Mapping, Optional, Type, TypeVar

from pydantic import BaseModel, ConfigDict, Field
from pydantic import ValidationError as PydanticValidationError

from src.models.exceptions import ConfigurationError

logger = logging.getLogger(__name__)

ModelT = TypeVar("ModelT", bound=BaseModel)

LOSS_TERMS = ("mask", "color", "depth", "eikonal", "sdf", "visible")
FREE_SPACE_TERMS = ("mask", "color", "depth", "eikonal")
SURFACE_TERMS = ("sdf", "visible")


class LossWeights(BaseModel):
    """Weights of the six supervision terms."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    mask: float = Field(default=0.1, ge=0.0)
    color: float = Field(default=1.0, ge=0.0)
    depth: float = Field(default=0.5, ge=0.0)
    eikonal: float = Field(default=0.1, ge=0.0)
    sdf: float = Field(default=0.5, ge=0.0)
    visible: float = Field(default=0.1, ge=0.0)

    def as_dict(self) -> Dict[str, float]:
        return {term: float(getattr(self, term)) for term in LOSS_TERMS}

    def for_supervision(self, mode: str) -> "LossWeights":
        """Drop the terms a reduced supervision mode cannot observe."""
        if mode == "rgb":
            return self.model_copy(update={"depth": 0.0, "sdf": 0.0, "visible": 0.0})
        if mode == "depth":
            return self.model_copy(update={"color": 0.0})
        return self


class ModelConfig(BaseModel):
    """Sizes of the deformation, topology, SDF and color networks."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    n_blocks: int = Field(default=3, ge=1)
    block_hidden_layers: int = Field(default=2, ge=0)
    block_hidden_width: int = Field(default=64, ge=1)
    block_bands: int = Field(default=6, ge=0)

    deform_code_width: int = Field(default=64, ge=1)
    appearance_code_width: int = Field(default=256, ge=1)

    topology_dims: int = Field(default=2, ge=0)
    topology_hidden_layers: int = Field(default=7, ge=0)
    topology_hidden_width: int = Field(default=64, ge=1)
    topology_bands: int = Field(default=6, ge=0)

    sdf_hidden_layers: int = Field(default=8, ge=1)
    sdf_hidden_width: int = Field(default=256, ge=1)
    sdf_bands: int = Field(default=6, ge=0)
    feature_width: int = Field(default=256, ge=1)
    softplus_beta: float = Field(default=100.0, gt=0.0)

    color_hidden_layers: int = Field(default=4, ge=0)
    color_hidden_width: int = Field(default=256, ge=1)
    color_bands: int = Field(default=4, ge=0)

    init_radius: float = Field(default=0.5, gt=0.0, lt=1.0)
    s_scale_init: float = Field(default=20.0, gt=0.0)


class TrainConfig(BaseModel):
    """Everything that determines one optimization run."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    iterations: int = Field(default=5000, ge=0)
    rays_per_batch: int = Field(default=2048, ge=1)
    depth_points_per_batch: int = Field(default=2048, ge=1)
    learning_rate: float = Field(default=5e-4, gt=0.0)
    seed: int = 0
    precision: Literal["float32", "float64"] = "float32"

    n_uniform: int = Field(default=64, ge=2)
    n_importance: int = Field(default=16, ge=0)
    importance_rounds: int = Field(default=4, ge=0)
    miss_band: float = Field(default=0.05, gt=0.0)
    alpha_ramp_fraction: float = Field(default=0.5, ge=0.0, le=1.0)

    mask_ray_ratio: float = Field(default=0.5, ge=0.0, le=1.0)
    supervision: Literal["rgbd", "rgb", "depth"] = "rgbd"
    refine_poses: bool = True
    refine_intrinsics: bool = True
    pose_noise_deg: float = Field(default=0.0, ge=0.0)

    checkpoint_every: int = Field(default=1000, ge=0)
    log_every: int = Field(default=100, ge=1)

    weights: LossWeights = Field(default_factory=LossWeights)
    model: ModelConfig = Field(default_factory=ModelConfig)

    @property
    def samples_per_ray(self) -> int:
        return self.n_uniform + self.n_importance * self.importance_rounds

    def effective_weights(self) -> LossWeights:
        return self.weights.for_supervision(self.supervision)


def read_key_values(path: Path, _stack: Optional[List[Path]] = None) -> Dict[str, str]:
    """
    Read a key=value file, following includes.

    Args:
        path: File to read

    Returns:
        Flat mapping of dotted keys to raw string values

    Raises:
        ConfigurationError: On missing files, malformed lines or include cycles
    """
    path = Path(path).resolve()
    stack = list(_stack or [])
    if path in stack:
        chain = " -> ".join(str(p.name) for p in stack + [path])
        raise ConfigurationError(f"Include cycle: {chain}")
    if not path.is_file():
        raise ConfigurationError(f"Configuration file not found: {path}")
    stack.append(path)

    values: Dict[str, str] = {}
    for number, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("include "):
            target = line[len("include ") :].strip()
            values.update(read_key_values(path.parent / target, stack))
            continue
        if "=" not in line:
            raise ConfigurationError(f"{path.name}:{number}: expected key=value, got '{raw}'")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigurationError(f"{path.name}:{number}: empty key")
        values[key] = value
    return values


def _nest(flat: Mapping[str, Any]) -> Dict[str, Any]:
    nested: Dict[str, Any] = {}
    for key, value in flat.items():
        node = nested
        parts = key.split(".")
        for part in parts[:-1]:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigurationError(f"Key '{key}' conflicts with scalar '{part}'")
            node = child
        node[parts[-1]] = value
    return nested


def build_model(model_cls: Type[ModelT], flat: Mapping[str, Any]) -> ModelT:
    """Validate a flat dotted-key mapping into a pydantic model."""
    try:
        return model_cls.model_validate(_nest(flat))
    except PydanticValidationError as e:
        problems = [
            f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}" for err in e.errors()
        ]
        raise ConfigurationError(f"Invalid {model_cls.__name__}: " + "; ".join(problems)) from e


def load_train_config(
    path: Optional[Path] = None, overrides: Optional[Mapping[str, Any]] = None
) -> TrainConfig:
    """
    Load a training configuration, applying command-line overrides last.

    Args:
        path: Optional key=value file
        overrides: Dotted keys that win over file values

    Returns:
        Validated configuration
    """
    flat: Dict[str, Any] = dict(read_key_values(path)) if path is not None else {}
    flat.update({k: v for k, v in (overrides or {}).items() if v is not None})
    config = build_model(TrainConfig, flat)
    logger.debug(f"Loaded training config (hash {config_hash(config)[:12]})")
    return config


def config_hash(config: BaseModel) -> str:
    """SHA-256 of the canonical JSON form of a configuration."""
    canonical = json.dumps(config.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()
