"""Configuration management for dgadr.

Two layers live here:

* ``Settings`` - process-level runtime settings (log level, worker count, run
  directory) resolved from constructor arguments first, then the environment.
* The experiment models (``SynthConfig``, ``LossConfig``, ``TrainConfig`` and
  ``ExperimentConfig``), validated with pydantic and read from flat
  ``key = value`` files.
"""

from __future__ import annotations

import os
from collections.abc import Mapping
from pathlib import Path
from typing import Any, Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from dgadr.exceptions import ConfigError


class Settings:
    """Runtime settings shared by every command."""

    def __init__(
        self,
        *,
        debug: bool | None = None,
        log_level: str | None = None,
        jobs: int | None = None,
        runs_dir: Path | str | None = None,
        **kwargs: Any,
    ):
        """Initialize settings.

        Args:
            debug: Enable debug mode (forces DEBUG logging)
            log_level: Logging level name
            jobs: Default number of worker threads for leave-one-out runs
            runs_dir: Default parent directory for run outputs
            **kwargs: Additional settings
        """
        self.debug = (
            debug
            if debug is not None
            else self._get_bool_env("DGADR_DEBUG", default=False)
        )
        self.log_level = (
            log_level
            if log_level is not None
            else os.getenv("DGADR_LOG_LEVEL", "INFO")
        )
        if self.debug:
            self.log_level = "DEBUG"
        self.jobs = jobs if jobs is not None else int(os.getenv("DGADR_JOBS", "1"))
        if self.jobs < 1:
            msg = f"jobs must be >= 1, got {self.jobs}"
            raise ConfigError(msg)
        self.runs_dir = (
            Path(runs_dir) if runs_dir else Path(os.getenv("DGADR_RUNS_DIR", "runs"))
        )

        for key, value in kwargs.items():
            setattr(self, key, value)

    def dict(self, exclude: set[str] | None = None) -> dict[str, Any]:
        """Convert settings to a dictionary.

        Args:
            exclude: Set of attribute names to exclude from the dict

        Returns:
            Dictionary representation of the settings
        """
        exclude = exclude or set()
        return {
            name: getattr(self, name)
            for name in dir(self)
            if not name.startswith("_")
            and not callable(getattr(self, name))
            and name not in exclude
        }

    def _get_bool_env(self, env_name: str, *, default: bool) -> bool:
        """Get boolean value from environment variable."""
        value = os.getenv(env_name)
        if value is None:
            return default
        return value.lower() in ("true", "1", "yes", "on")


def _split_ints(value: Any) -> Any:
    if isinstance(value, str):
        parts = [part.strip() for part in value.split(",") if part.strip()]
        return tuple(int(part) for part in parts)
    return value


def _none_if_blank(value: Any) -> Any:
    if isinstance(value, str) and value.strip().lower() in ("", "none"):
        return None
    return value


class SynthConfig(BaseModel):
    """Parameters of the synthetic multi-domain generator."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    num_domains: int = Field(4, ge=1)
    num_classes: int = Field(4, ge=1)
    feature_dim: int = Field(8, ge=1)
    samples_per_domain: int = Field(400, ge=1)
    class_skew: float = Field(3.0, ge=1.0)
    domain_shift_scale: float = Field(1.0, ge=0.0)
    intra_domain_subclusters: int = Field(2, ge=1)
    noise_std: float = Field(1.0, ge=0.0)
    class_separation: float = Field(3.0, ge=0.0)
    subcluster_spread: float = Field(0.5, ge=0.0)
    seed: int = 0


PositiveScope = Literal["any", "cross_domain"]


class LossConfig(BaseModel):
    """DomAlign and classification-loss hyperparameters.

    Defaults: margin 0.1, five hard samples, alignment weight 10 and focal
    exponent 2.0. ``gamma = 0`` turns the focal term into (weighted)
    cross-entropy. ``positive_scope = "cross_domain"`` mines hard positives
    only from domains other than the query's own.
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    margin: float = Field(0.1, ge=0.0)
    hard_count: int = Field(5, ge=1)
    alpha: float = Field(10.0, ge=0.0)
    gamma: float = Field(2.0, ge=0.0)
    class_weights: Literal["uniform", "weighted_ce"] = "uniform"
    positive_scope: PositiveScope = "any"


class TrainConfig(BaseModel):
    """Everything the training loop needs besides the data."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    hidden_dims: tuple[int, ...] = (64, 32)
    activation: Literal["tanh", "relu"] = "tanh"
    feature_layer: int | None = None
    loss: LossConfig = LossConfig()
    batch_size: int = Field(128, ge=1)
    epochs: int = Field(200, ge=1)
    lr: float = Field(0.001, gt=0.0)
    jitter_strength: float = Field(0.1, ge=0.0)
    second_stream_strength: float = Field(0.0, ge=0.0)
    seeds: tuple[int, ...] = Field((0, 1, 2), min_length=1)
    init_params: Path | None = None
    eval_every: int = Field(10, ge=1)

    @field_validator("hidden_dims", "seeds", mode="before")
    @classmethod
    def _parse_int_list(cls, value: Any) -> Any:
        return _split_ints(value)

    @field_validator("feature_layer", "init_params", mode="before")
    @classmethod
    def _parse_optional(cls, value: Any) -> Any:
        return _none_if_blank(value)

    @field_validator("hidden_dims")
    @classmethod
    def _positive_dims(cls, value: tuple[int, ...]) -> tuple[int, ...]:
        if any(dim < 1 for dim in value):
            msg = f"hidden_dims must be positive, got {value}"
            raise ValueError(msg)
        return value

    def layer_dims(self, feature_dim: int, num_classes: int) -> list[int]:
        """Full layer dimension chain for a dataset."""
        return [feature_dim, *self.hidden_dims, num_classes]


class ExperimentConfig(BaseModel):
    """Resolved configuration of one command invocation."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    data: SynthConfig = SynthConfig()
    train: TrainConfig = TrainConfig()
    kl_shrinkage: float = Field(1e-3, ge=0.0)
    jobs: int = Field(1, ge=1)


# flat key -> location inside ExperimentConfig
_DATA_KEYS = {
    ("data_seed" if name == "seed" else name): ("data", name)
    for name in SynthConfig.model_fields
}
_LOSS_KEYS = {name: ("train", "loss", name) for name in LossConfig.model_fields}
_TRAIN_KEYS = {
    name: ("train", name) for name in TrainConfig.model_fields if name != "loss"
}
_TOP_KEYS = {"kl_shrinkage": ("kl_shrinkage",), "jobs": ("jobs",)}

CONFIG_KEYS: dict[str, tuple[str, ...]] = {
    **_DATA_KEYS,
    **_LOSS_KEYS,
    **_TRAIN_KEYS,
    **_TOP_KEYS,
}


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    """Parse flat ``key = value`` text.

    Args:
        text: File contents
        source: Name used in error messages

    Returns:
        Mapping of key to raw string value, in file order

    Raises:
        ConfigError: On a malformed line or an unknown key
    """
    values: dict[str, str] = {}
    for line_number, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            msg = f"{source}:{line_number}: expected 'key = value', got {raw_line!r}"
            raise ConfigError(msg)
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in CONFIG_KEYS:
            msg = f"{source}:{line_number}: unknown config key '{key}'"
            raise ConfigError(msg)
        values[key] = value
    return values


def build_experiment_config(values: Mapping[str, Any]) -> ExperimentConfig:
    """Route flat keys into the nested models and validate them.

    Raises:
        ConfigError: Naming the offending key for unknown keys or invalid values
    """
    nested: dict[str, Any] = {}
    for key, value in values.items():
        if key not in CONFIG_KEYS:
            msg = f"unknown config key '{key}'"
            raise ConfigError(msg)
        *parents, leaf = CONFIG_KEYS[key]
        target = nested
        for parent in parents:
            target = target.setdefault(parent, {})
        target[leaf] = value

    try:
        return ExperimentConfig.model_validate(nested)
    except ValidationError as exc:
        first = exc.errors()[0]
        location = tuple(str(part) for part in first["loc"])
        key = _flat_key_for(location)
        msg = f"invalid value for config key '{key}': {first['msg']}"
        raise ConfigError(msg) from exc


def _flat_key_for(location: tuple[str, ...]) -> str:
    for key, path in CONFIG_KEYS.items():
        if location[: len(path)] == path:
            return key
    return ".".join(location)


def load_experiment_config(
    path: Path | str | None = None,
    overrides: Mapping[str, Any] | None = None,
    *,
    defaults: Mapping[str, Any] | None = None,
) -> ExperimentConfig:
    """Resolve ``defaults``, then the config file (optional), then ``overrides``.

    Later layers win; None values in ``defaults`` or ``overrides`` are ignored.

    Raises:
        ConfigError: If the file is missing or any key/value is invalid
    """
    values: dict[str, Any] = {
        key: value for key, value in (defaults or {}).items() if value is not None
    }
    if path is not None:
        config_path = Path(path)
        if not config_path.is_file():
            msg = f"config file not found: {config_path}"
            raise ConfigError(msg)
        values.update(parse_config_text(config_path.read_text(), str(config_path)))
    for key, value in (overrides or {}).items():
        if value is not None:
            values[key] = value
    return build_experiment_config(values)


def _format_value(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, tuple):
        return ",".join(str(item) for item in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def flatten_config(config: ExperimentConfig) -> dict[str, str]:
    """Flat ``key -> value`` view in registry order."""
    flat: dict[str, str] = {}
    for key, path in CONFIG_KEYS.items():
        value: Any = config
        for part in path:
            value = getattr(value, part)
        flat[key] = _format_value(value)
    return flat


def render_config(config: ExperimentConfig) -> str:
    """Render a config in the same ``key = value`` format it is read from."""
    flat = flatten_config(config)
    return "".join(f"{key} = {value}\n" for key, value in flat.items())
