"""Environment settings and YAML run/grid configuration files.

Precedence for every run is: built-in defaults < config file < command-line flags.
"""

import itertools
import logging
import os
from pathlib import Path
from typing import Any, Dict, List, Literal, Mapping, Optional, Tuple, Union

import yaml  # type: ignore[import-untyped]
from app.services.architectures import ModelKind, ModelSpec
from app.services.training import TrainingConfig
from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, field_validator

load_dotenv()

logger = logging.getLogger(__name__)

CONFIG_SCHEMA_VERSION = 1


class Settings(BaseModel):
    output_root: Path
    database_url: str
    log_level: str


def get_settings() -> Settings:
    """Read settings from the environment (and a .env file, if present)."""
    output_root = Path(os.getenv("SIMTRAIN_OUTPUT_ROOT", "./runs"))
    return Settings(
        output_root=output_root,
        database_url=os.getenv("DATABASE_URL", f"sqlite:///{output_root}/registry.db"),
        log_level=os.getenv("SIMTRAIN_LOG_LEVEL", "INFO").upper(),
    )


class RunConfigFile(BaseModel):
    """``model`` and ``training`` sections of a run config file."""

    model_config = ConfigDict(extra="forbid")

    schema_version: Literal[1] = CONFIG_SCHEMA_VERSION
    model: Dict[str, Any] = Field(default_factory=dict)
    training: Dict[str, Any] = Field(default_factory=dict)


class GridFile(BaseModel):
    """
    Hyperparameter grid: every key maps to the list of values to sweep.

    ``base_model``/``base_training`` hold fixed settings shared by all jobs.
    """

    model_config = ConfigDict(extra="forbid")

    schema_version: Literal[1] = CONFIG_SCHEMA_VERSION
    name: str = "sweep"
    seed: int = 0
    budget: int = Field(ge=1)
    arch: List[ModelKind] = Field(min_length=1)
    model: Dict[str, List[Any]] = Field(default_factory=dict)
    training: Dict[str, List[Any]] = Field(default_factory=dict)
    base_model: Dict[str, Any] = Field(default_factory=dict)
    base_training: Dict[str, Any] = Field(default_factory=dict)

    @field_validator("model", "training")
    @classmethod
    def _non_empty_axes(cls, value: Dict[str, List[Any]]) -> Dict[str, List[Any]]:
        empty = [key for key, options in value.items() if not options]
        if empty:
            raise ValueError(f"empty grid for {empty}")
        return value

    @property
    def spec_grid(self) -> Dict[str, List[Any]]:
        return {"kind": list(self.arch), **self.model}


def _read_yaml(path: Union[str, Path]) -> Dict[str, Any]:
    with open(path, "r") as f:
        data = yaml.safe_load(f) or {}
    if not isinstance(data, dict):
        raise ValueError(f"{path} must contain a mapping")
    return data


def load_run_config(path: Union[str, Path]) -> RunConfigFile:
    return RunConfigFile.model_validate(_read_yaml(path))


def load_grid(path: Union[str, Path]) -> GridFile:
    return GridFile.model_validate(_read_yaml(path))


def expand(grid: Mapping[str, List[Any]]) -> List[Dict[str, Any]]:
    """Cartesian product of a grid, in key order then value order."""
    keys = list(grid)
    return [dict(zip(keys, values)) for values in itertools.product(*grid.values())]


def _without_unset(values: Optional[Mapping[str, Any]]) -> Dict[str, Any]:
    return {key: value for key, value in (values or {}).items() if value is not None}


def resolve_config(
    input_dim: int,
    output_dim: int,
    config_file: Optional[RunConfigFile] = None,
    model_flags: Optional[Mapping[str, Any]] = None,
    training_flags: Optional[Mapping[str, Any]] = None,
) -> Tuple[ModelSpec, TrainingConfig]:
    """
    Merge defaults, the config file and flags into validated configs.

    Flags set to None count as not given. Dimensions always come from the data.

    Raises:
        pydantic.ValidationError: On unknown keys or invalid values
    """
    config_file = config_file or RunConfigFile()
    model = {
        **config_file.model,
        **_without_unset(model_flags),
        "input_dim": input_dim,
        "output_dim": output_dim,
    }
    training = {**config_file.training, **_without_unset(training_flags)}
    spec = ModelSpec.model_validate(model)
    config = TrainingConfig.model_validate(training)
    config.check_compatible(spec)
    return spec, config
