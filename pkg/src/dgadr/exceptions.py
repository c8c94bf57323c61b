"""Exception hierarchy for the toolkit."""

from __future__ import annotations

from typing import TYPE_CHECKING

if TYPE_CHECKING:
    from dgadr.data import Minibatch


class DgadrError(Exception):
    """Base class for every error raised by dgadr."""


class ConfigError(DgadrError, ValueError):
    """Invalid configuration file, key or value."""


class DatasetError(DgadrError, ValueError):
    """Malformed dataset, CSV row or split request."""


class ModelError(DgadrError, ValueError):
    """Shape mismatch or non-finite parameters."""


class LossError(DgadrError, ValueError):
    """Invalid loss inputs (labels out of range, bad weight lookups)."""


class MetricsError(DgadrError, ValueError):
    """Metric cannot be computed for the given inputs."""


class AnalysisError(DgadrError, ValueError):
    """Degenerate inputs to the domain-shift analysis."""


class TrainingError(DgadrError, RuntimeError):
    """Training aborted; carries the offending minibatch when there is one."""

    def __init__(self, message: str, batch: Minibatch | None = None):
        super().__init__(message)
        self.batch = batch
