"""
Validated run configurations loaded from YAML.
"""

import hashlib
import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Type, TypeVar, Union

import yaml
from pydantic import BaseModel, Field, ValidationError

from .exceptions import ConfigError
from .network import NetworkSpec, toy_network_spec
from .neuron import LIFParams

logger = logging.getLogger(__name__)

ConfigT = TypeVar("ConfigT", bound=BaseModel)


class TrainConfig(BaseModel):
    """Training run: dataset, network, objective and optimiser."""

    dataset: str
    network: Union[Literal["toy"], NetworkSpec] = "toy"
    lif: LIFParams = Field(default_factory=LIFParams)
    mode: Literal["event", "frame"] = "event"
    T: int = Field(default=10, ge=1)
    loss: Literal["mean", "tet"] = "tet"
    alpha: float = Field(default=0.0, ge=0.0)
    epochs: int = Field(default=30, ge=1)
    batch_size: int = Field(default=32, ge=1)
    lr: float = Field(default=0.1, gt=0.0)
    momentum: float = Field(default=0.9, ge=0.0, lt=1.0)
    weight_decay: float = Field(default=5e-4, ge=0.0)
    seed: int = 0
    correctness_mode: Literal["per_timestep", "per_sample"] = "per_timestep"
    stop_grad_max: bool = True
    dropout: float = Field(default=0.0, ge=0.0, lt=1.0)
    shift_frac: float = Field(default=0.2, ge=0.0, le=0.2)
    stf_epsilon: float = Field(default=1e-8, gt=0.0)
    stf_floor: float = Field(default=1e-3, ge=0.0)
    grad_clip: float = Field(default=5.0, ge=0.0)
    binarize: bool = False
    eval_every: int = Field(default=1, ge=0)

    def network_spec(self, input_shape, classes: int) -> NetworkSpec:
        """The configured network, or the toy preset sized to the dataset."""
        if self.network == "toy":
            return toy_network_spec(tuple(input_shape), classes, self.lif)
        return self.network


class SynthConfig(BaseModel):
    kind: Literal["event", "frame"] = "event"
    classes: int = Field(default=3, ge=2)
    samples_per_class: int = Field(default=100, ge=1)
    height: int = Field(default=16, ge=1)
    width: int = Field(default=16, ge=1)
    channels: int = Field(default=1, ge=1)
    T: int = Field(default=10, ge=1)
    window_us: int = Field(default=100_000, gt=0)
    rate: float = Field(default=2e-4, ge=0.0)
    noise_rate: float = Field(default=5e-6, ge=0.0)
    test_fraction: float = Field(default=0.25, ge=0.0, lt=1.0)
    seed: int = 0
    workers: int = Field(default=1, ge=1)


class EvalConfig(BaseModel):
    checkpoint: Optional[str] = None
    checkpoints: List[str] = Field(default_factory=list)
    dataset: Optional[str] = None
    split: Literal["train", "test"] = "test"
    mode: Literal["fixed", "cutoff", "uncertainty"] = "fixed"
    T: Optional[int] = Field(default=None, ge=1)
    thresholds: str = "0.8:1.0:20"
    confidence: Literal["instantaneous", "cumulative"] = "instantaneous"
    squared_variance: bool = False
    batch_size: int = Field(default=64, ge=1)
    seed: int = 0


def _field_path(error: Dict[str, Any]) -> str:
    return ".".join(str(part) for part in error.get("loc", ())) or "<root>"


def validate_config(model: Type[ConfigT], raw: Dict[str, Any]) -> ConfigT:
    """Validate a mapping, turning the first validation failure into a ConfigError naming its field."""
    try:
        return model.model_validate(raw)
    except ValidationError as e:
        first = e.errors()[0]
        raise ConfigError(_field_path(first), first["msg"]) from e


def load_config(model: Type[ConfigT], path: Optional[Union[str, Path]] = None,
                overrides: Optional[Dict[str, Any]] = None) -> ConfigT:
    """
    Read a YAML config and apply command-line overrides.

    Args:
        model: Config class
        path: YAML file; None uses the defaults
        overrides: Values replacing those in the file; None entries are ignored

    Returns:
        Validated config
    """
    raw: Dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError("config", f"config file {path} not found")
        try:
            with open(path) as f:
                raw = yaml.safe_load(f) or {}
        except yaml.YAMLError as e:
            raise ConfigError("config", f"cannot parse {path}: {e}") from e
        if not isinstance(raw, dict):
            raise ConfigError("config", f"{path} must contain a mapping")
    for key, value in (overrides or {}).items():
        if value is not None:
            raw[key] = value
    config = validate_config(model, raw)
    logger.debug(f"Loaded {model.__name__}: {config.model_dump(mode='json')}")
    return config


def config_hash(config: BaseModel) -> str:
    """sha256 of the canonical JSON form of a config."""
    canonical = json.dumps(config.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()
