"""Validated specification objects shared across modules."""

import math
from typing import Any, Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from scipy import stats

from constants import (
    ADAPTATION_EXPONENT,
    DEFAULT_CG_RETRIES,
    DEFAULT_CG_TOL,
    DEFAULT_PROPOSAL_SCALE,
    TARGET_ACCEPTANCE,
    KernelFamily,
    Preconditioner,
)

KERNEL_PARAMS: dict[str, dict[str, float]] = {
    "exponential": {"tau2": 1.0, "phi": 19.97},
    "matern": {"sigma2": 1.0, "alpha": 20.0, "nu": 1.5},
    "gaussian": {"sigma2": 1.0, "a": 100.0},
    "generalized_cauchy": {"sigma2": 1.0, "alpha": 0.1, "delta": 1.0, "lam": 4.0},
}


class KernelSpec(BaseModel):
    """Covariance family and its parameters."""

    model_config = ConfigDict(frozen=True)

    family: KernelFamily = "exponential"
    params: dict[str, float] = Field(default_factory=dict)

    @model_validator(mode="before")
    @classmethod
    def fill_defaults(cls, data: Any) -> Any:
        """Parameters left out take the family defaults."""
        if isinstance(data, dict):
            family = data.get("family", "exponential")
            if family in KERNEL_PARAMS:
                data = {**data, "params": {**KERNEL_PARAMS[family], **(data.get("params") or {})}}
        return data

    @model_validator(mode="after")
    def check_params(self) -> "KernelSpec":
        """Require exactly the family's parameters, all positive and finite."""
        expected = set(KERNEL_PARAMS[self.family])
        if set(self.params) != expected:
            unknown = sorted(set(self.params) - expected)
            raise ValueError(f"{self.family} does not take parameters {unknown}")
        for name, value in self.params.items():
            if not (math.isfinite(value) and value > 0):
                raise ValueError(f"parameter {name} must be positive, got {value}")
        return self


class ThetaPrior(BaseModel):
    """Prior on one covariance parameter, with its support."""

    kind: Literal["flat", "inverse_gamma", "gamma", "lognormal"] = "flat"
    a: float = 1.0
    b: float = 1.0
    lower: float = 0.0
    upper: float = math.inf

    @model_validator(mode="after")
    def check_support(self) -> "ThetaPrior":
        """Flat priors must be restricted to a bounded interval."""
        if self.lower < 0 or self.upper <= self.lower:
            raise ValueError(f"invalid support [{self.lower}, {self.upper}]")
        if self.kind == "flat" and not math.isfinite(self.upper):
            raise ValueError("flat priors need a finite upper bound")
        if self.kind != "flat" and not (self.a > 0 and self.b > 0):
            raise ValueError("prior hyperparameters must be positive")
        return self

    def in_support(self, value: float) -> bool:
        """True when `value` is strictly positive and within bounds."""
        return bool(value > 0 and self.lower <= value <= self.upper)

    def log_density(self, value: float) -> float:
        """Unnormalized log density; -inf outside the support."""
        if not self.in_support(value):
            return -math.inf
        if self.kind == "flat":
            return 0.0
        if self.kind == "inverse_gamma":
            return float(stats.invgamma.logpdf(value, self.a, scale=self.b))
        if self.kind == "gamma":
            return float(stats.gamma.logpdf(value, self.a, scale=1.0 / self.b))
        return float(stats.lognorm.logpdf(value, self.b, scale=math.exp(self.a)))


class InverseGammaPrior(BaseModel):
    """IG(a0, b0) prior on a variance."""

    a0: float = 2.0
    b0: float = 0.01

    @field_validator("a0", "b0")
    @classmethod
    def positive(cls, v: float) -> float:
        """Both hyperparameters must be positive."""
        if not v > 0:
            raise ValueError(f"inverse-gamma hyperparameters must be positive, got {v}")
        return v

    @property
    def mean(self) -> float:
        """Prior mean, or the mode when the mean does not exist."""
        return self.b0 / (self.a0 - 1.0) if self.a0 > 1 else self.b0 / (self.a0 + 1.0)

    def log_density(self, value: float) -> float:
        """Log density at `value`."""
        if not value > 0:
            return -math.inf
        return float(stats.invgamma.logpdf(value, self.a0, scale=self.b0))


class BetaPrior(BaseModel):
    """Normal N(mean, precision^-1) prior on regression coefficients; flat when unset."""

    mean: list[float] | None = None
    precision: list[list[float]] | None = None

    def arrays(self, p: int) -> tuple[np.ndarray, np.ndarray]:
        """Prior mean and precision for `p` coefficients (zero precision means flat)."""
        mean = np.zeros(p) if self.mean is None else np.asarray(self.mean, dtype=float)
        precision = (
            np.zeros((p, p)) if self.precision is None else np.asarray(self.precision, dtype=float)
        )
        if mean.shape != (p,) or precision.shape != (p, p):
            raise ValueError(f"beta prior does not match {p} covariates")
        if p and np.linalg.eigvalsh((precision + precision.T) / 2).min() < -1e-12:
            raise ValueError("beta prior precision must be positive semidefinite")
        return mean, precision


def default_theta_priors() -> dict[str, ThetaPrior]:
    """Priors used for the exponential simulation scenario."""
    return {
        "tau2": ThetaPrior(kind="inverse_gamma", a=2.0, b=1.0),
        "phi": ThetaPrior(kind="flat", lower=1.0, upper=100.0),
    }


class PriorSpec(BaseModel):
    """Priors for beta, the nugget variance and covariance parameters.

    Covariance parameters without an entry in `theta` are held fixed.
    """

    beta: BetaPrior = Field(default_factory=BetaPrior)
    sigma2: InverseGammaPrior = Field(default_factory=InverseGammaPrior)
    theta: dict[str, ThetaPrior] = Field(default_factory=default_theta_priors)


class CgConfig(BaseModel):
    """Conjugate gradient settings for latent draws."""

    tol: float = DEFAULT_CG_TOL
    max_iter: int | None = None
    preconditioner: Preconditioner = "jacobi"
    retries: int = DEFAULT_CG_RETRIES


class MhConfig(BaseModel):
    """Random-walk Metropolis settings on log parameters."""

    proposal_scale: float = DEFAULT_PROPOSAL_SCALE
    adapt: bool = False
    target_acceptance: float = TARGET_ACCEPTANCE
    adapt_exponent: float = ADAPTATION_EXPONENT

    @field_validator("proposal_scale")
    @classmethod
    def nonnegative(cls, v: float) -> float:
        """A zero scale freezes the chain."""
        if v < 0:
            raise ValueError("proposal scale must be nonnegative")
        return v


class PartitionViolation(BaseModel):
    """Two members of one subset closer than the radius."""

    subset: int
    i: int
    j: int
    distance: float


class PartitionReport(BaseModel):
    """Outcome of validating an alternating partition."""

    n_subsets: int
    violations: list[PartitionViolation] = []
    missing: list[int] = []
    duplicated: list[int] = []
    subset_bound: int
    bound_met: bool

    @property
    def valid(self) -> bool:
        """No separation violations and full, disjoint coverage."""
        return not (self.violations or self.missing or self.duplicated)


class W2Report(BaseModel):
    """Exact W2 between the exact and approximate Gaussians plus its two upper bounds."""

    w2_squared: float
    trace_bound: float
    column_bound: float | None
    hypothesis_met: bool
    inputs_hash: str
