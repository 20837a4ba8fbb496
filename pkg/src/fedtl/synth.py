"""Synthetic multi-site data for the three problem families.

Instances are constructed so that the informative-set membership conditions
hold exactly, not just with high probability: informative contrasts have
norm at most h by construction, outlying sites sit at least
``outlier_separation`` away, and both facts are asserted per instance.
Everything is deterministic given (spec, seed).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import seeding
from .errors import ParameterError
from .harness import SiteDataset


class Family(enum.Enum):
    MEAN = "mean"
    LOWDIM = "lowdim"
    HIGHDIM = "highdim"


@dataclass(frozen=True)
class ProblemSpec:
    """Data-generating configuration for one federated instance.

    ``A`` indexes the informative sources (subset of 1..K); sources outside
    ``A`` are placed at distance >= ``outlier_separation`` from the target
    parameter.  Per-site observation noise is standard normal by default;
    ``sigma`` exists so oracle tests can switch it off.  Site covariances
    are identity or per-site diagonal with eigenvalues in [1/L, L].
    """

    family: Family
    K: int
    n0: int
    n_k: int | tuple[int, ...] = 0  # 0 means: same as n0
    A: frozenset[int] = frozenset()
    h: float = 0.0
    outlier_separation: float = 1.0
    d: int = 1
    s: int = 1
    sigma: float = 1.0
    cov: str = "identity"  # "identity" | "diagonal"
    L: float = 1.0
    target_param: object | None = None

    def __post_init__(self) -> None:
        if self.K < 0:
            raise ParameterError(f"K must be nonnegative, got {self.K}")
        if not self.A <= set(range(1, self.K + 1)):
            raise ParameterError(f"A={set(self.A)} not a subset of 1..{self.K}")
        if self.h < 0:
            raise ParameterError(f"h must be nonnegative, got {self.h}")
        if self.sigma < 0:
            raise ParameterError(f"sigma must be nonnegative, got {self.sigma}")
        has_outliers = len(self.A) < self.K
        if has_outliers:
            if not self.outlier_separation > 0:
                raise ParameterError("outlier_separation must be positive when outliers exist")
            if self.h >= self.outlier_separation:
                raise ParameterError(
                    f"h={self.h} must be smaller than outlier_separation={self.outlier_separation}"
                )
        if self.cov not in ("identity", "diagonal"):
            raise ParameterError(f"unknown covariance spec {self.cov!r}")
        if self.cov == "diagonal" and self.L < 1:
            raise ParameterError(f"L must be >= 1, got {self.L}")
        if self.family is not Family.MEAN:
            if self.d < 1:
                raise ParameterError(f"d must be >= 1, got {self.d}")
        if self.family is Family.HIGHDIM:
            if not 1 <= self.s < self.d:
                raise ParameterError(f"need 1 <= s < d, got s={self.s}, d={self.d}")
            if self.s >= self.n0:
                raise ParameterError(f"need s < n0, got s={self.s}, n0={self.n0}")

    def site_sizes(self) -> list[int]:
        if isinstance(self.n_k, tuple):
            if len(self.n_k) != self.K:
                raise ParameterError(f"n_k tuple must have K={self.K} entries")
            return [self.n0, *self.n_k]
        nk = self.n_k or self.n0
        return [self.n0] + [nk] * self.K


@dataclass(frozen=True)
class GroundTruth:
    """True per-site parameters of a generated instance."""

    params: dict
    A: frozenset[int]
    h: float
    outlier_separation: float

    def contrast(self, k: int) -> float:
        a = np.atleast_1d(np.asarray(self.params[k], dtype=float))
        b = np.atleast_1d(np.asarray(self.params[0], dtype=float))
        return float(np.linalg.norm(a - b))


def _check_membership(truth: GroundTruth, spec: ProblemSpec) -> None:
    for k in range(1, spec.K + 1):
        c = truth.contrast(k)
        if k in spec.A:
            if c > spec.h * (1 + 1e-12) + 1e-15:
                raise AssertionError(f"informative site {k} contrast {c} exceeds h={spec.h}")
        elif c < spec.outlier_separation * (1 - 1e-12):
            raise AssertionError(f"outlier {k} contrast {c} below separation {spec.outlier_separation}")


def _contrast_radii(spec: ProblemSpec, rng: np.random.Generator) -> dict[int, float]:
    """Informative radii drawn U[0, h] (exercising the whole ball); outlier
    radii drawn in [separation, 2*separation]."""
    radii = {}
    for k in range(1, spec.K + 1):
        if k in spec.A:
            radii[k] = float(rng.uniform(0.0, spec.h)) if spec.h > 0 else 0.0
        else:
            radii[k] = float(spec.outlier_separation * (1.0 + rng.uniform()))
    return radii


def _sphere(rng: np.random.Generator, dim: int) -> np.ndarray:
    v = rng.standard_normal(dim)
    nrm = np.linalg.norm(v)
    while nrm == 0.0:  # pragma: no cover - probability zero
        v = rng.standard_normal(dim)
        nrm = np.linalg.norm(v)
    return v / nrm


def _site_cov_diag(spec: ProblemSpec, rng: np.random.Generator) -> np.ndarray:
    if spec.cov == "identity":
        return np.ones(spec.d)
    return rng.uniform(1.0 / spec.L, spec.L, size=spec.d)


def gen_mean_sites(spec: ProblemSpec, seed: int) -> tuple[list[SiteDataset], GroundTruth]:
    """Unit-variance Gaussian samples per site around shifted means."""
    if spec.family is not Family.MEAN:
        raise ParameterError("spec.family must be MEAN")
    prng = seeding.spawn(seed, seeding.DOMAIN_DATA, 0)
    mu0 = float(prng.standard_normal()) if spec.target_param is None else float(spec.target_param)
    radii = _contrast_radii(spec, prng)
    params: dict[int, float] = {0: mu0}
    for k in range(1, spec.K + 1):
        sign = 1.0 if prng.uniform() < 0.5 else -1.0
        params[k] = mu0 + sign * radii[k]
    truth = GroundTruth(params, spec.A, spec.h, spec.outlier_separation)
    _check_membership(truth, spec)
    sites = []
    for k, n in enumerate(spec.site_sizes()):
        srng = seeding.spawn(seed, seeding.DOMAIN_DATA, 1 + k)
        sites.append(SiteDataset(k, params[k] + spec.sigma * srng.standard_normal(n)))
    return sites, truth


def gen_linreg_sites(spec: ProblemSpec, seed: int) -> tuple[list[SiteDataset], GroundTruth]:
    """Gaussian linear-model sites with dense coefficient contrasts."""
    if spec.family is not Family.LOWDIM:
        raise ParameterError("spec.family must be LOWDIM")
    prng = seeding.spawn(seed, seeding.DOMAIN_DATA, 0)
    if spec.target_param is None:
        beta = _sphere(prng, spec.d)
    else:
        beta = np.asarray(spec.target_param, dtype=float).copy()
    radii = _contrast_radii(spec, prng)
    params: dict[int, np.ndarray] = {0: beta}
    for k in range(1, spec.K + 1):
        params[k] = beta + radii[k] * _sphere(prng, spec.d)
    cov_diags = {k: _site_cov_diag(spec, prng) for k in range(spec.K + 1)}
    truth = GroundTruth(params, spec.A, spec.h, spec.outlier_separation)
    _check_membership(truth, spec)
    sites = []
    for k, n in enumerate(spec.site_sizes()):
        srng = seeding.spawn(seed, seeding.DOMAIN_DATA, 1 + k)
        X = srng.standard_normal((n, spec.d)) * np.sqrt(cov_diags[k])
        y = X @ params[k] + spec.sigma * srng.standard_normal(n)
        sites.append(SiteDataset(k, (X, y)))
    return sites, truth


def _sparse_contrast(rng: np.random.Generator, d: int, s: int, radius: float) -> np.ndarray:
    out = np.zeros(d)
    if radius == 0.0:
        return out
    support = rng.choice(d, size=s, replace=False)
    out[support] = radius * _sphere(rng, s)
    return out


def gen_sparse_sites(spec: ProblemSpec, seed: int) -> tuple[list[SiteDataset], GroundTruth]:
    """High-dimensional sites with an s-sparse target coefficient.

    Informative contrasts are supported on at most s coordinates, so the
    l1/l2 sparsity condition holds with constant 1.  Outliers are exactly
    s-sparse centers placed at the required separation.
    """
    if spec.family is not Family.HIGHDIM:
        raise ParameterError("spec.family must be HIGHDIM")
    prng = seeding.spawn(seed, seeding.DOMAIN_DATA, 0)
    if spec.target_param is None:
        beta = np.zeros(spec.d)
        support = prng.choice(spec.d, size=spec.s, replace=False)
        beta[support] = _sphere(prng, spec.s)
    else:
        beta = np.asarray(spec.target_param, dtype=float).copy()
    radii = _contrast_radii(spec, prng)
    params: dict[int, np.ndarray] = {0: beta}
    for k in range(1, spec.K + 1):
        params[k] = beta + _sparse_contrast(prng, spec.d, spec.s, radii[k])
    cov_diags = {k: _site_cov_diag(spec, prng) for k in range(spec.K + 1)}
    truth = GroundTruth(params, spec.A, spec.h, spec.outlier_separation)
    _check_membership(truth, spec)
    sites = []
    for k, n in enumerate(spec.site_sizes()):
        srng = seeding.spawn(seed, seeding.DOMAIN_DATA, 1 + k)
        X = srng.standard_normal((n, spec.d)) * np.sqrt(cov_diags[k])
        y = X @ params[k] + spec.sigma * srng.standard_normal(n)
        sites.append(SiteDataset(k, (X, y)))
    return sites, truth


def generate(spec: ProblemSpec, seed: int) -> tuple[list[SiteDataset], GroundTruth]:
    """Dispatch to the family-specific generator."""
    if spec.family is Family.MEAN:
        return gen_mean_sites(spec, seed)
    if spec.family is Family.LOWDIM:
        return gen_linreg_sites(spec, seed)
    return gen_sparse_sites(spec, seed)


def dump_sites(sites: list[SiteDataset], truth: GroundTruth, spec: ProblemSpec, out_dir: str | Path) -> None:
    """Write one CSV per site plus a ground-truth sidecar."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    d = 0 if spec.family is Family.MEAN else spec.d
    for site in sites:
        path = out / f"site_{site.site_id}.csv"
        with path.open("w") as fh:
            fh.write("site_id,n,d,family\n")
            fh.write(f"{site.site_id},{site.n},{d},{spec.family.value}\n")
            if isinstance(site.payload, tuple):
                X, y = site.payload
                for i in range(X.shape[0]):
                    row = ",".join(f"{v:.17g}" for v in X[i])
                    fh.write(f"{row},{y[i]:.17g}\n")
            else:
                for v in site.payload:
                    fh.write(f"{v:.17g}\n")
    with (out / "ground_truth.csv").open("w") as fh:
        fh.write("site_id,in_A,param\n")
        for k in sorted(truth.params):
            vec = np.atleast_1d(np.asarray(truth.params[k], dtype=float))
            param = ";".join(f"{v:.17g}" for v in vec)
            fh.write(f"{k},{int(k in truth.A)},{param}\n")
