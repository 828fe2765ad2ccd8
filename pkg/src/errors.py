"""Exception hierarchy shared by every module.

Each error knows which module raised it and carries a small context mapping so the
command line can report failures as one machine-parsable line.
"""

import json
from typing import Any


class RadgpError(Exception):
    """Base error for the package."""

    module: str = "radgp"

    def __init__(self, message: str, **context: Any):
        super().__init__(message)
        self.message = message
        self.context = context

    def __str__(self) -> str:
        """Message followed by its context, if any."""
        if not self.context:
            return self.message
        details = ", ".join(f"{k}={v}" for k, v in self.context.items())
        return f"{self.message} ({details})"

    def as_line(self) -> str:
        """Render the error as a single JSON line."""
        payload = {
            "module": self.module,
            "error": self.message,
            "context": {k: _jsonable(v) for k, v in self.context.items()},
        }
        return json.dumps(payload, sort_keys=True)


def _jsonable(value: Any) -> Any:
    if isinstance(value, (str, int, float, bool)) or value is None:
        return value
    try:
        return float(value)
    except (TypeError, ValueError):
        return str(value)


class GeometryError(RadgpError):
    """Invalid coordinates or distance queries."""

    module = "geometry"


class PartitionError(RadgpError):
    """Alternating partition failures."""

    module = "partition"


class DagError(RadgpError):
    """Radial neighbors graph failures."""

    module = "dag"


class KernelError(RadgpError):
    """Covariance function failures."""

    module = "kernels"


class PrecisionError(RadgpError):
    """Sparse precision factor failures."""

    module = "precision"


class FactorizationError(PrecisionError):
    """A parent covariance block could not be factorized."""


class DiagnosticCapError(PrecisionError):
    """A dense diagnostic was requested above the configured size cap."""


class InferenceError(RadgpError):
    """Posterior sampling failures."""

    module = "inference"


class CgConvergenceError(InferenceError):
    """Conjugate gradients did not reach the requested tolerance."""


class PredictionError(RadgpError):
    """Posterior prediction failures."""

    module = "predict"


class MetricsError(RadgpError):
    """Diagnostic metric failures."""

    module = "metrics"


class ConfigError(RadgpError):
    """Invalid run configuration."""

    module = "config"


class WorkspaceError(RadgpError):
    """Input or output file failures."""

    module = "workspace"


class SimulationError(RadgpError):
    """Synthetic data generation failures."""

    module = "simulate"
