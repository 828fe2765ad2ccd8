"""Run configuration.

Values come from, highest precedence first: dotted command-line overrides, the YAML
file given with `--config`, `RADGP_*` environment variables (nested keys joined by
`__`), and the defaults below.
"""

import hashlib
import logging
import math
import os
from pathlib import Path
from typing import Any, Literal

import yaml
from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from constants import (
    DEFAULT_DENSE_SIMULATION_CAP,
    DEFAULT_DIAGNOSTIC_CAP,
    DEFAULT_N_PROJECTIONS,
    DEFAULT_PROPOSAL_SCALE,
    DEFAULT_SEED,
    ENV_PREFIX,
    REGION_EDGES,
    TARGET_ACCEPTANCE,
    TRUE_PHI,
    TRUE_SIGMA,
    TRUE_TAU,
    IndexKind,
    Layout,
    ModelKind,
)
from errors import ConfigError
from models import CgConfig, KernelSpec, MhConfig, PriorSpec

logger = logging.getLogger(__name__)


class McmcConfig(BaseModel):
    """Chain lengths and proposal settings."""

    model: ModelKind = "latent"
    l1: int = 4000
    l2: int = 2000
    thin: int = 1
    chains: int = 1
    proposal_scale: float = DEFAULT_PROPOSAL_SCALE
    adapt: bool | None = None
    target_acceptance: float = TARGET_ACCEPTANCE
    keep_latent: bool = True
    # add nugget noise to predictions so they target new responses
    noisy: bool = True
    level: float = 0.95
    theta0: dict[str, float] | None = None

    @model_validator(mode="after")
    def check_lengths(self) -> "McmcConfig":
        """Burn-in must not exceed the chain length."""
        if min(self.l1, self.l2, self.thin, self.chains) < 1:
            raise ValueError("l1, l2, thin and chains must be positive")
        if self.l2 > self.l1:
            raise ValueError(f"l2 ({self.l2}) must not exceed l1 ({self.l1})")
        if not 0 < self.level < 1:
            raise ValueError("credible level must lie in (0, 1)")
        return self

    def mh(self, model: ModelKind) -> MhConfig:
        """Proposal settings; adaptation defaults to on for the response sampler only."""
        adapt = self.adapt if self.adapt is not None else model == "response"
        return MhConfig(
            proposal_scale=self.proposal_scale,
            adapt=adapt,
            target_acceptance=self.target_acceptance,
        )


def _truth_kernel() -> KernelSpec:
    return KernelSpec(family="exponential", params={"tau2": TRUE_TAU**2, "phi": TRUE_PHI})


class SimulationConfig(BaseModel):
    """Synthetic data settings."""

    kernel: KernelSpec = Field(default_factory=_truth_kernel)
    nugget_sd: float = TRUE_SIGMA
    layout: Layout = "grid"
    test_layout: Layout = "uniform"
    n_train: int = 1600
    n_test: int = 1000
    dim: int = 2
    beta: list[float] = []
    dense_cap: int = DEFAULT_DENSE_SIMULATION_CAP
    blocked: bool = False
    blocked_rho: float = 0.2


class DiagnosticsConfig(BaseModel):
    """Dense diagnostics and prediction scoring."""

    cap: int = DEFAULT_DIAGNOSTIC_CAP
    n_projections: int = DEFAULT_N_PROJECTIONS
    rho_grid: list[float] = []
    regions: list[tuple[float, float]] = list(REGION_EDGES)
    n_draws: int = 2000
    factor_dump: bool = False


class RunConfig(BaseSettings):
    """Everything a command needs."""

    model_config = SettingsConfigDict(
        env_prefix=ENV_PREFIX, env_nested_delimiter="__", extra="forbid", case_sensitive=False
    )

    kernel: KernelSpec = Field(default_factory=KernelSpec)
    priors: PriorSpec = Field(default_factory=PriorSpec)
    mcmc: McmcConfig = Field(default_factory=McmcConfig)
    cg: CgConfig = Field(default_factory=CgConfig)
    simulation: SimulationConfig = Field(default_factory=SimulationConfig)
    diagnostics: DiagnosticsConfig = Field(default_factory=DiagnosticsConfig)

    train_path: Path | None = None
    test_path: Path | None = None
    truth_path: Path | None = None
    out_dir: Path = Path("radgp-out")

    seed: int = DEFAULT_SEED
    rho: float | Literal["auto"] = 0.055
    index: IndexKind = "auto"
    threads: int = 1
    jitter: float = 0.0
    log: str = "INFO"

    @field_validator("rho", mode="before")
    @classmethod
    def parse_rho(cls, v: Any) -> float | str:
        """Accept numbers, numeric strings and `auto`."""
        if isinstance(v, str) and v.strip().lower() == "auto":
            return "auto"
        if isinstance(v, str):
            return float(v)
        return v

    @field_validator("rho")
    @classmethod
    def positive_rho(cls, v: float | str) -> float | str:
        """An explicit radius must be positive and finite."""
        if v != "auto" and not (math.isfinite(v) and v > 0):
            raise ValueError(f"rho must be positive, got {v}")
        return v

    @field_validator("log", mode="before")
    @classmethod
    def upper_level(cls, v: Any) -> str:
        """Log level names are case-insensitive."""
        level = str(v).upper()
        if not isinstance(logging.getLevelName(level), int):
            raise ValueError(f"unknown log level {v}")
        return level

    @field_validator("threads", "jitter")
    @classmethod
    def nonnegative(cls, v: float) -> float:
        """Thread counts and jitter cannot be negative."""
        if v < 0:
            raise ValueError("must be nonnegative")
        return v

    @property
    def threads_resolved(self) -> int:
        """Thread count, with 0 meaning every available core."""
        return self.threads or os.cpu_count() or 1

    def input_path(self, name: str, default: str) -> Path:
        """Configured input path, or `default` inside the output directory."""
        path = getattr(self, name) or self.out_dir / default
        return Path(path)

    def fingerprint(self) -> str:
        """Hash of the effective configuration."""
        return hashlib.sha256(self.model_dump_json().encode()).hexdigest()


def parse_overrides(tokens: list[str]) -> dict[str, Any]:
    """Turn `--a.b value` / `--a.b=value` tokens into a nested mapping.

    Values are parsed as YAML scalars, so numbers, booleans and lists keep their type.
    """
    nested: dict[str, Any] = {}
    i = 0
    while i < len(tokens):
        token = tokens[i]
        if not token.startswith("--") or len(token) == 2:
            raise ConfigError("unexpected argument", argument=token)
        key, sep, raw = token[2:].partition("=")
        if not sep:
            if i + 1 >= len(tokens) or tokens[i + 1].startswith("--"):
                raise ConfigError("override is missing a value", key=key)
            raw = tokens[i + 1]
            i += 1
        i += 1
        parts = key.replace("-", "_").split(".")
        target = nested
        for part in parts[:-1]:
            target = target.setdefault(part, {})
            if not isinstance(target, dict):
                raise ConfigError("conflicting overrides", key=key)
        try:
            target[parts[-1]] = yaml.safe_load(raw)
        except yaml.YAMLError:
            target[parts[-1]] = raw
    return nested


def deep_merge(base: dict[str, Any], update: dict[str, Any]) -> dict[str, Any]:
    """Recursive dict merge; `update` wins."""
    merged = dict(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def load_config(
    path: Path | str | None = None, overrides: dict[str, Any] | None = None
) -> RunConfig:
    """Build the run configuration from a YAML file and command-line overrides."""
    data: dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError("config file not found", path=str(path))
        try:
            data = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as err:
            raise ConfigError(
                "config file is not valid YAML", path=str(path), cause=str(err)
            ) from None
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a mapping", path=str(path))
    data = deep_merge(data, overrides or {})
    try:
        return RunConfig(**data)
    except ValidationError as err:
        first = err.errors()[0]
        raise ConfigError(
            "invalid configuration",
            field=".".join(str(p) for p in first["loc"]),
            reason=first["msg"],
            n_errors=err.error_count(),
        ) from None
