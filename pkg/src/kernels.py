"""Isotropic covariance functions and the radius advisor."""

import logging
import math
from abc import ABC, abstractmethod
from typing import ClassVar

import numpy as np
from numpy.typing import ArrayLike
from scipy.spatial.distance import cdist
from scipy.special import gamma, gammaln, kv
from typing_extensions import override

from errors import KernelError
from geometry import LocationSet, as_points
from models import KernelSpec

logger = logging.getLogger(__name__)


class Kernel(ABC):
    """Isotropic covariance K0(r) = variance * correlation(r)."""

    family: ClassVar[str]
    variance_name: ClassVar[str] = "sigma2"
    range_name: ClassVar[str]

    def __init__(self, spec: KernelSpec):
        self.spec = spec
        self.params = dict(spec.params)

    @property
    def variance(self) -> float:
        """K0(0)."""
        return self.params[self.variance_name]

    @abstractmethod
    def correlation(self, r: np.ndarray) -> np.ndarray:
        """Correlation at nonnegative distances."""
        ...

    @abstractmethod
    def log_radius_bound(self, q: float, n: int, d: int) -> float:
        """Log of the sufficient approximation radius for separation `q` and size `n`."""
        ...

    def __call__(self, r: ArrayLike) -> np.ndarray:
        r = np.asarray(r, dtype=float)
        return self.variance * self.correlation(r)

    def with_params(self, **updates: float) -> "Kernel":
        """Copy with some parameters replaced."""
        return make_kernel(KernelSpec(family=self.spec.family, params={**self.params, **updates}))

    def __repr__(self) -> str:
        args = ", ".join(f"{k}={v:.6g}" for k, v in self.params.items())
        return f"{type(self).__name__}({args})"


class MaternKernel(Kernel):
    """sigma2 * 2^(1-nu)/Gamma(nu) * (alpha r)^nu * K_nu(alpha r)."""

    family = "matern"
    range_name = "alpha"

    @property
    def nu(self) -> float:
        """Smoothness."""
        return self.params["nu"]

    @property
    def alpha(self) -> float:
        """Inverse range."""
        return self.params["alpha"]

    @override
    def correlation(self, r: np.ndarray) -> np.ndarray:
        x = self.alpha * r
        nu = self.nu
        if nu == 0.5:
            return np.exp(-x)
        if nu == 1.5:
            return (1.0 + x) * np.exp(-x)
        if nu == 2.5:
            return (1.0 + x + x * x / 3.0) * np.exp(-x)
        safe = np.where(x > 0, x, 1.0)
        with np.errstate(over="ignore", invalid="ignore", under="ignore"):
            value = np.exp((1.0 - nu) * math.log(2.0) - gammaln(nu) + nu * np.log(safe)) * kv(
                nu, safe
            )
        value = np.where(np.isfinite(value), value, 0.0)
        return np.where(x > 0, value, 1.0)

    @override
    def log_radius_bound(self, q: float, n: int, d: int) -> float:
        return _matern_log_radius(self.params[self.variance_name], self.alpha, self.nu, q, n, d)


class ExponentialKernel(MaternKernel):
    """tau2 * exp(-phi r), the Matern kernel with nu = 1/2."""

    family = "exponential"
    variance_name = "tau2"
    range_name = "phi"

    @property
    @override
    def nu(self) -> float:
        return 0.5

    @property
    @override
    def alpha(self) -> float:
        return self.params["phi"]

    @override
    def correlation(self, r: np.ndarray) -> np.ndarray:
        return np.exp(-self.alpha * r)


class GaussianKernel(Kernel):
    """sigma2 * exp(-a r^2)."""

    family = "gaussian"
    range_name = "a"

    @override
    def correlation(self, r: np.ndarray) -> np.ndarray:
        return np.exp(-self.params["a"] * r * r)

    @override
    def log_radius_bound(self, q: float, n: int, d: int) -> float:
        a, sigma2 = self.params["a"], self.variance
        if not q < a**-0.5:
            raise KernelError("precondition q < a^(-1/2) violated", q=q, a=a)
        c2, c3 = _c2(d), _c3(d, q)
        blowup = c2 * c2 / (a * q * q)
        log_first = math.log(c3) - math.log(sigma2) + blowup
        second = math.log(n) - d * math.log(q) - 5.0 * math.log(sigma2) + 5.0 * blowup
        return 0.5 * math.log(d / a) + 3.0 * _log_sum(log_first, second)


class GeneralizedCauchyKernel(Kernel):
    """sigma2 * (1 + (r/alpha)^delta)^(-lam/delta)."""

    family = "generalized_cauchy"
    range_name = "alpha"
    # leading constant of the radius bound, fixed at 1
    c9: ClassVar[float] = 1.0

    @override
    def correlation(self, r: np.ndarray) -> np.ndarray:
        alpha, delta, lam = self.params["alpha"], self.params["delta"], self.params["lam"]
        return (1.0 + (r / alpha) ** delta) ** (-lam / delta)

    @override
    def log_radius_bound(self, q: float, n: int, d: int) -> float:
        alpha, delta, lam = self.params["alpha"], self.params["delta"], self.params["lam"]
        if not lam > d + 1:
            raise KernelError("precondition lam > d + 1 violated", lam=lam, d=d)
        if not q < alpha:
            raise KernelError("precondition q < alpha violated", q=q, alpha=alpha)
        # n multiplies delta * (lam + 4.5) in the exponent
        exponent = (12.5 * d + delta * (lam + 4.5) * n) / (lam - (d + 1))
        return math.log(self.c9) - exponent * math.log(q) + math.log(n) / (lam - (d + 1))


KERNELS: dict[str, type[Kernel]] = {
    cls.family: cls
    for cls in (ExponentialKernel, MaternKernel, GaussianKernel, GeneralizedCauchyKernel)
}


def make_kernel(spec: KernelSpec | Kernel) -> Kernel:
    """Instantiate the kernel described by `spec`."""
    if isinstance(spec, Kernel):
        return spec
    return KERNELS[spec.family](spec)


def kernel_value(k: KernelSpec | Kernel, r: ArrayLike) -> np.ndarray | float:
    """K0(r) for nonnegative distances."""
    r_arr = np.asarray(r, dtype=float)
    if np.any(r_arr < 0):
        raise KernelError("distance must be nonnegative", r=float(r_arr.min()))
    value = make_kernel(k)(r_arr)
    return float(value) if value.ndim == 0 else value


def _coords(x: LocationSet | ArrayLike) -> np.ndarray:
    return x.points if isinstance(x, LocationSet) else as_points(x)


def cov_matrix(
    k: KernelSpec | Kernel,
    A: LocationSet | ArrayLike,
    B: LocationSet | ArrayLike | None = None,
    nugget: float = 0.0,
) -> np.ndarray:
    """Covariance between two location sets; `B=None` means `A` with itself.

    The nugget lands on the diagonal of the square case only.
    """
    a = _coords(A)
    b = a if B is None else _coords(B)
    cov = make_kernel(k)(cdist(a, b))
    if B is None and nugget:
        cov[np.diag_indices_from(cov)] += nugget
    return cov


def _c2(d: int) -> float:
    return 12.0 * (math.pi * gamma(d / 2 + 1) ** 2 / 9.0) ** (1.0 / (d + 1))


def _c1(d: int) -> float:
    return 2.0 * gamma(d / 2 + 1) * (2**1.5 / _c2(d)) ** d


def _c3(d: int, q: float) -> float:
    return _c1(d) * d * d * 2**d * (1 + d + q / 2) * (1 + q / 2) ** (d - 1)


def _log_sum(log_first: float, second: float) -> float:
    """log(exp(log_first) + second) without overflowing."""
    if log_first > 700:
        return log_first + math.log1p(second * math.exp(-log_first))
    total = math.exp(log_first) + second
    if not total > 0:
        raise KernelError("radius bound is not positive", value=total)
    return math.log(total)


def _matern_log_radius(sigma2: float, alpha: float, nu: float, q: float, n: int, d: int) -> float:
    if not q < 1.0 / alpha:
        raise KernelError("precondition q < 1/alpha violated", q=q, alpha=alpha)
    c2, c3 = _c2(d), _c3(d, q)
    log_cm1 = gammaln(nu) - math.log(sigma2) - d * math.log(2) - d / 2 * math.log(math.pi)
    log_cm1 -= gammaln(nu + d / 2)
    log_t = math.log1p(4 * c2 * c2 / (alpha * alpha * q * q))
    log_first = math.log(c3) + log_cm1 + (nu + d / 2) * log_t
    second = log_cm1 + math.log(n) - d * math.log(q) + 5 * (nu + d / 2) * log_t
    return 0.5 * math.log(d) - math.log(alpha) + 3.0 * _log_sum(log_first, second)


def recommend_radius(k: KernelSpec | Kernel, q: float, n: int, d: int) -> float:
    """Radius sufficient for vanishing W2 error, with no safety factor applied."""
    if not (q > 0 and n > 0 and d > 0):
        raise KernelError("q, n and d must be positive", q=q, n=n, d=d)
    log_rho = make_kernel(k).log_radius_bound(q, n, d)
    if log_rho > math.log(np.finfo(float).max):
        logger.warning(f"radius bound exp({log_rho:.4g}) exceeds the float range")
        return math.inf
    return math.exp(log_rho)
