"""Closed-form error-rate functions used for detection thresholds.

Each rate decomposes into a sampling term plus a privacy term; the
``*_terms`` variants expose the two separately for diagnostics.  All
logarithms are natural; leading constants are 1 (threshold calibration
absorbs unspecified constants downstream).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import ParameterError


@dataclass(frozen=True)
class RateParams:
    """Parameter bundle for rate evaluation across the three problem families."""

    n: int
    d: int = 1
    s: int = 1
    epsilon: float = 1.0
    delta: float = 1e-5
    eta: float = 0.05
    K: int = 0
    h: float = 0.0

    def __post_init__(self) -> None:
        if self.n < 2:
            raise ParameterError(f"n must be >= 2, got {self.n}")
        if not 0 < self.eta < 1:
            raise ParameterError(f"eta must lie in (0, 1), got {self.eta}")
        if self.h < 0:
            raise ParameterError(f"h must be nonnegative, got {self.h}")
        if self.s > self.d:
            raise ParameterError(f"s={self.s} exceeds d={self.d}")
        if self.K < 0:
            raise ParameterError(f"K must be nonnegative, got {self.K}")


def _check_common(n: int, eta: float, epsilon: float, n_min: int = 2) -> None:
    if n < n_min:
        raise ParameterError(f"n must be >= {n_min}, got {n}")
    if not 0 < eta < 1:
        raise ParameterError(f"eta must lie in (0, 1), got {eta}")
    if not epsilon > 0:
        raise ParameterError(f"epsilon must be positive, got {epsilon}")


def rate_mean_terms(n: int, eta: float, epsilon: float) -> tuple[float, float]:
    """(sampling, privacy) terms of the univariate-mean accuracy rate."""
    _check_common(n, eta, epsilon)
    sampling = math.sqrt(math.log(1.0 / eta) / n)
    privacy = math.log(1.0 / eta) * math.sqrt(math.log(n / eta)) / (epsilon * n)
    return sampling, privacy


def rate_mean(n: int, eta: float, epsilon: float) -> float:
    """Accuracy rate of the private mean on one site: sqrt(log(1/eta)/n) + log(1/eta)*sqrt(log(n/eta))/(eps*n)."""
    return sum(rate_mean_terms(n, eta, epsilon))


def rate_lowdim_terms(
    n: int, d: int, epsilon: float, delta: float, eta: float
) -> tuple[float, float]:
    """(sampling, privacy) terms of the low-dimensional regression rate."""
    _check_common(n, eta, epsilon, n_min=3)
    if n <= math.e:
        raise ParameterError(f"n must exceed e for log log n, got {n}")
    if d < 1:
        raise ParameterError(f"d must be >= 1, got {d}")
    if not 0 < delta < 1:
        raise ParameterError(f"delta must lie in (0, 1), got {delta}")
    sampling = math.log(math.log(n) / eta) * math.sqrt(d * math.log(n) / n)
    privacy = (
        d
        * math.log(n / eta) ** 2
        * math.sqrt(math.log(1.0 / delta) * math.log(math.log(n / eta)))
        / (n * epsilon)
    )
    return sampling, privacy


def rate_lowdim(n: int, d: int, epsilon: float, delta: float, eta: float) -> float:
    """Accuracy rate of single-site private linear regression."""
    return sum(rate_lowdim_terms(n, d, epsilon, delta, eta))


def rate_highdim_terms(
    n: int, s_prime: int, d: int, epsilon: float, delta: float, eta: float
) -> tuple[float, float]:
    """(sampling, privacy) terms of the sparse-regression rate."""
    _check_common(n, eta, epsilon)
    if not 1 <= s_prime <= d:
        raise ParameterError(f"need 1 <= s_prime <= d, got s_prime={s_prime}, d={d}")
    if not 0 < delta < 1:
        raise ParameterError(f"delta must lie in (0, 1), got {delta}")
    sampling = math.sqrt(s_prime * math.log(d / eta) * math.log(n) / n)
    privacy = (
        s_prime
        * math.sqrt(math.log(1.0 / delta))
        * math.log(n * d / eta) ** 2.5
        / (n * epsilon)
    )
    return sampling, privacy


def rate_highdim(n: int, s_prime: int, d: int, epsilon: float, delta: float, eta: float) -> float:
    """Accuracy rate of single-site private sparse regression."""
    return sum(rate_highdim_terms(n, s_prime, d, epsilon, delta, eta))


def aggregation_privacy_term(
    K_hat: int, n_agg: int, s_prime: int, d: int, epsilon: float, delta: float, eta: float
) -> float:
    """Privacy part of the federated sparse-aggregation error.

    Evaluates sqrt(K_hat * d * s') * sqrt(log(1/delta)) * log^{5/2}(n_agg*d/eta)
    / (n_agg * eps), the quantity the meta rule compares against the
    target-only rate.  An empty selected set gives exactly 0.
    """
    if K_hat < 0:
        raise ParameterError(f"K_hat must be nonnegative, got {K_hat}")
    if K_hat == 0:
        return 0.0
    _check_common(n_agg, eta, epsilon)
    if not 1 <= s_prime <= d:
        raise ParameterError(f"need 1 <= s_prime <= d, got s_prime={s_prime}, d={d}")
    if not 0 < delta < 1:
        raise ParameterError(f"delta must lie in (0, 1), got {delta}")
    return (
        math.sqrt(K_hat * d * s_prime)
        * math.sqrt(math.log(1.0 / delta))
        * math.log(n_agg * d / eta) ** 2.5
        / (n_agg * epsilon)
    )
