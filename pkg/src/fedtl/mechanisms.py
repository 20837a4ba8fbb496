"""Differentially private primitives.

Everything here is a pure function of its inputs and an explicit
``numpy.random.Generator``; there is no module state, so concurrent use is
safe as long as each thread owns its generator.

``NoiseMode.OFF`` turns every mechanism into a deterministic function of its
inputs (zero noise, no stability thresholding).  It exists solely so tests
can compare against exact oracles; production entry points never expose it.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .errors import InsufficientDataError, ParameterError

# Dyadic bin indices are clamped to this range to keep histograms finite.
# With standardized synthetic data the boundary bins are unreachable.
BIN_MIN = -60
BIN_MAX = 60


class NoiseMode(enum.Enum):
    """Calibrated noise (privacy-valid, default) or zero noise (test-only)."""

    CALIBRATED = "calibrated"
    OFF = "off"


@dataclass(frozen=True)
class PrivacyBudget:
    """An (epsilon, delta) differential-privacy budget for one mechanism."""

    epsilon: float
    delta: float = 0.0

    def __post_init__(self) -> None:
        if not (self.epsilon > 0 and math.isfinite(self.epsilon)):
            raise ParameterError(f"epsilon must be positive and finite, got {self.epsilon}")
        if not (0.0 <= self.delta < 1.0):
            raise ParameterError(f"delta must lie in [0, 1), got {self.delta}")

    def halve(self) -> "PrivacyBudget":
        """The (epsilon/2, delta/2) half used by per-round stage splits."""
        return PrivacyBudget(self.epsilon / 2.0, self.delta / 2.0)


@dataclass(frozen=True)
class ClipRadii:
    """Covariate clip radius and per-round residual clip radius."""

    R: float
    R_t: float

    def __post_init__(self) -> None:
        if not self.R > 0:
            raise ParameterError(f"R must be positive, got {self.R}")
        if not self.R_t > 0:
            raise ParameterError(f"R_t must be positive, got {self.R_t}")


# ---------------------------------------------------------------------------
# noise calibration (the formulas the ledger audits against)
# ---------------------------------------------------------------------------

def laplace_scale(sensitivity: float, epsilon: float) -> float:
    """Laplace mechanism scale for an l1 sensitivity under epsilon-DP."""
    if not sensitivity > 0:
        raise ParameterError(f"sensitivity must be positive, got {sensitivity}")
    if not epsilon > 0:
        raise ParameterError(f"epsilon must be positive, got {epsilon}")
    return sensitivity / epsilon


def gaussian_noise_std(sensitivity: float, budget: PrivacyBudget) -> float:
    """Gaussian mechanism standard deviation: sqrt(2 ln(1.25/delta)) * s / eps."""
    if not sensitivity > 0:
        raise ParameterError(f"sensitivity must be positive, got {sensitivity}")
    if budget.delta <= 0:
        raise ParameterError("the Gaussian mechanism requires delta > 0")
    return math.sqrt(2.0 * math.log(1.25 / budget.delta)) * sensitivity / budget.epsilon


def peeling_noise_scale(lam: float, s: int, budget: PrivacyBudget) -> float:
    """Per-coordinate Laplace scale of the noisy top-s selection."""
    if budget.delta <= 0:
        raise ParameterError("peeling requires delta > 0")
    return 2.0 * lam * math.sqrt(3.0 * s * math.log(1.0 / budget.delta)) / budget.epsilon


def variance_histogram_noise_scale(n_pairs: int, epsilon: float) -> float:
    """Laplace scale added to each nonzero bin proportion (sensitivity 2/n)."""
    return 2.0 / (epsilon * n_pairs)


# ---------------------------------------------------------------------------
# samplers
# ---------------------------------------------------------------------------

def laplace_sample(rng: np.random.Generator, scale: float, mode: NoiseMode = NoiseMode.CALIBRATED) -> float:
    """One draw from Laplace(scale) via the inverse CDF of a uniform.

    The uniform is consumed in both modes so that OFF and CALIBRATED runs
    advance the stream identically; OFF returns 0.
    """
    if not scale > 0:
        raise ParameterError(f"scale must be positive, got {scale}")
    u = rng.uniform(-0.5, 0.5)
    if mode is NoiseMode.OFF:
        return 0.0
    return float(-scale * math.copysign(1.0, u) * math.log1p(-2.0 * abs(u)))


def _laplace_vector(rng: np.random.Generator, scale: float, size: int) -> np.ndarray:
    u = rng.uniform(-0.5, 0.5, size=size)
    return -scale * np.sign(u) * np.log1p(-2.0 * np.abs(u))


# ---------------------------------------------------------------------------
# projections
# ---------------------------------------------------------------------------

def project_l2(x: np.ndarray, R: float) -> np.ndarray:
    """Rescale ``x`` onto the l2 ball of radius ``R``: x * min(1, R/||x||_2)."""
    if not R > 0:
        raise ParameterError(f"R must be positive, got {R}")
    x = np.asarray(x, dtype=float)
    nrm = float(np.linalg.norm(x))
    if nrm <= R:
        return x.copy()
    return x * (R / nrm)


def project_linf(x: np.ndarray, R: float) -> np.ndarray:
    """Whole-vector rescale onto the l-infinity ball: x * min(1, R/max|x_j|).

    This is not a per-coordinate clamp; the direction of ``x`` is preserved.
    """
    if not R > 0:
        raise ParameterError(f"R must be positive, got {R}")
    x = np.asarray(x, dtype=float)
    mx = float(np.max(np.abs(x))) if x.size else 0.0
    if mx <= R:
        return x.copy()
    return x * (R / mx)


def clip_scalar(t: float, R: float) -> float:
    """Scalar specialization of the rescaling projection: clamp to [-R, R]."""
    if not R > 0:
        raise ParameterError(f"R must be positive, got {R}")
    return float(min(max(t, -R), R))


# ---------------------------------------------------------------------------
# dyadic stability histogram and the scale estimator built on it
# ---------------------------------------------------------------------------

def dyadic_bin(absw: np.ndarray) -> np.ndarray:
    """Bin index j with |w| in (2^j, 2^{j+1}], clamped to [BIN_MIN, BIN_MAX].

    Exact powers of two belong to the lower bin (the intervals are open on
    the left).  Inputs must be strictly positive.
    """
    m, e = np.frexp(np.asarray(absw, dtype=float))
    j = np.where(m > 0.5, e - 1, e - 2)
    return np.clip(j, BIN_MIN, BIN_MAX).astype(np.int64)


def noisy_bin_argmax(
    keys: np.ndarray,
    n: int,
    epsilon: float,
    delta: float,
    rng: np.random.Generator,
    mode: NoiseMode = NoiseMode.CALIBRATED,
) -> int:
    """Stability-histogram release: the key of the largest noisy proportion.

    ``keys`` holds one integer bin key per binned observation; ``n`` is the
    denominator of the proportions (observations that fell in no bin still
    count toward it).  Only nonzero bins receive Laplace(2/(eps*n)) noise,
    and any noisy proportion below 2*ln(1/delta)/(eps*n) + 1/n is zeroed.
    In OFF mode the raw proportions are compared directly.

    Raises :class:`InsufficientDataError` when no bin survives.
    """
    if keys.size == 0:
        raise InsufficientDataError("insufficient data for scale estimation")
    uniq, counts = np.unique(np.asarray(keys, dtype=np.int64), return_counts=True)
    props = counts.astype(float) / float(n)
    if mode is NoiseMode.OFF:
        noisy = props
    else:
        if delta <= 0:
            raise ParameterError("the stability histogram requires delta > 0")
        scale = variance_histogram_noise_scale(n, epsilon)
        noisy = props + _laplace_vector(rng, scale, props.size)
        threshold = 2.0 * math.log(1.0 / delta) / (epsilon * n) + 1.0 / n
        noisy = np.where(noisy < threshold, 0.0, noisy)
    if not np.any(noisy > 0):
        raise InsufficientDataError("insufficient data for scale estimation")
    return int(uniq[int(np.argmax(noisy))])


def private_variance(
    samples: np.ndarray,
    budget: PrivacyBudget,
    rng: np.random.Generator,
    mode: NoiseMode = NoiseMode.CALIBRATED,
) -> float:
    """Private scale estimate of i.i.d. data from pair differences.

    Takes 2n observations, forms n pair differences W'_i = W_{2i} - W_{2i-1},
    histograms |W'_i| into dyadic bins (2^j, 2^{j+1}] and releases
    2^(j_hat + 2) for the winning noisy bin.  Zero differences fall in no
    bin; the output is always a power of two.

    Raises :class:`InsufficientDataError` when no bin survives thresholding,
    which signals that the batch is too small for scale estimation.
    """
    w = np.asarray(samples, dtype=float)
    if w.ndim != 1 or w.size < 2:
        raise ParameterError("need a 1-d sample of length >= 2")
    if w.size % 2 != 0:
        raise ParameterError("sample length must be even (pair differences)")
    n = w.size // 2
    diffs = np.abs(w[1::2] - w[0::2])
    nz = diffs > 0.0
    keys = dyadic_bin(diffs[nz]) if nz.any() else np.empty(0, dtype=np.int64)
    j_hat = noisy_bin_argmax(keys, n, budget.epsilon, budget.delta, rng, mode)
    return float(2.0 ** (j_hat + 2))


# ---------------------------------------------------------------------------
# sparse selection
# ---------------------------------------------------------------------------

def hard_threshold(v: np.ndarray, s: int) -> np.ndarray:
    """Keep the s entries of largest magnitude, zero the rest.

    Ties are broken toward the lowest coordinate index, so the result is
    deterministic and idempotent.
    """
    v = np.asarray(v, dtype=float)
    d = v.size
    if not 1 <= s <= d:
        raise ParameterError(f"need 1 <= s <= d, got s={s}, d={d}")
    order = np.argsort(-np.abs(v), kind="stable")
    out = np.zeros_like(v)
    keep = order[:s]
    out[keep] = v[keep]
    return out


def peeling(
    v: np.ndarray,
    s: int,
    budget: PrivacyBudget,
    lam: float,
    rng: np.random.Generator,
    mode: NoiseMode = NoiseMode.CALIBRATED,
) -> np.ndarray:
    """Noisy top-s selection with perturbed kept values.

    Runs s rounds of noisy argmax over |v_j| (fresh Laplace noise each round,
    selection without replacement), then releases v on the selected support
    plus one more Laplace perturbation; everything else is zero.  ``lam`` is
    the l-infinity sensitivity of ``v``; with ``lam == 0`` (or OFF mode) the
    procedure reduces exactly to :func:`hard_threshold`.
    """
    v = np.asarray(v, dtype=float)
    d = v.size
    if not 1 <= s <= d:
        raise ParameterError(f"need 1 <= s <= d, got s={s}, d={d}")
    if lam < 0:
        raise ParameterError(f"lam must be nonnegative, got {lam}")
    scale = 0.0 if (mode is NoiseMode.OFF or lam == 0.0) else peeling_noise_scale(lam, s, budget)
    if scale == 0.0:
        return hard_threshold(v, s)
    absv = np.abs(v)
    chosen = np.zeros(d, dtype=bool)
    for _ in range(s):
        score = absv + _laplace_vector(rng, scale, d)
        score[chosen] = -np.inf
        chosen[int(np.argmax(score))] = True
    out = np.zeros_like(v)
    w = _laplace_vector(rng, scale, d)
    out[chosen] = v[chosen] + w[chosen]
    return out
