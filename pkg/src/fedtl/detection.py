"""Informative-source detection and empirical threshold calibration.

A source is selected when its private estimate lies within
``tilde_c * threshold_radius`` of the target's private estimate in l2.
The multiplier ``tilde_c`` has no closed form, so it is calibrated by a
seeded pilot Monte Carlo: generate data with zero heterogeneity and
well-separated outliers, and pick the threshold that recovers the true
informative set most robustly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import seeding
from .errors import CalibrationError, ParameterError

DEFAULT_TILDE_C = 3.0
_DEFAULT_GRID = tuple(round(0.5 * i, 2) for i in range(1, 41))  # 0.5 .. 20


@dataclass(frozen=True)
class DetectionInput:
    """Private estimates to compare plus the threshold that scales them."""

    target_estimate: np.ndarray
    source_estimates: tuple[tuple[int, np.ndarray], ...]
    threshold_radius: float
    tilde_c: float

    def __post_init__(self) -> None:
        if not self.threshold_radius > 0:
            raise ParameterError(f"threshold_radius must be positive, got {self.threshold_radius}")
        if not self.tilde_c > 0:
            raise ParameterError(f"tilde_c must be positive, got {self.tilde_c}")
        dim = np.asarray(self.target_estimate).shape
        for k, est in self.source_estimates:
            if np.asarray(est).shape != dim:
                raise ParameterError(f"estimate of site {k} has shape {np.asarray(est).shape}, expected {dim}")


def detect_informative(inp: DetectionInput) -> frozenset[int]:
    """Sites whose estimates lie within tilde_c * r of the target estimate."""
    target = np.asarray(inp.target_estimate, dtype=float)
    cut = inp.tilde_c * inp.threshold_radius
    selected = set()
    for k, est in inp.source_estimates:
        if float(np.linalg.norm(np.asarray(est, dtype=float) - target)) <= cut:
            selected.add(k)
    return frozenset(selected)


@dataclass(frozen=True)
class CalibrationConfig:
    """Pilot Monte Carlo budget and estimator settings for calibration.

    ``spec`` should describe the pilot population: h = 0 and outliers at the
    separation the deployment expects (a multiple of the threshold radius).
    ``estimator_options`` are forwarded to the per-family single-site
    estimator configuration.
    """

    spec: object  # synth.ProblemSpec
    budget: object  # mechanisms.PrivacyBudget
    eta: float = 0.05
    seed: int = 0
    reps: int = 60
    grid: tuple[float, ...] = _DEFAULT_GRID
    target_rate: float = 0.95
    estimator_options: dict = field(default_factory=dict)


@dataclass(frozen=True)
class PilotRep:
    """Per-site private estimates of one pilot replication plus the truth."""

    target_estimate: np.ndarray
    source_estimates: tuple[tuple[int, np.ndarray], ...]
    truth: object  # synth.GroundTruth


def threshold_radius_for(problem: str, config: CalibrationConfig) -> float:
    """The rate r used as detection threshold unit for a problem family."""
    from . import rates

    spec = config.spec
    eps, delta = config.budget.epsilon, config.budget.delta
    if problem == "mean":
        return rates.rate_mean(spec.n0, config.eta, eps)
    if problem == "lowdim":
        return rates.rate_lowdim(spec.n0, spec.d, eps, delta, config.eta)
    if problem == "highdim":
        s_prime = config.estimator_options.get("s_prime")
        if s_prime is None:
            from .highdim import default_sparsity

            s_prime = default_sparsity(spec.s, config.estimator_options.get("L", 1.0))
        return rates.rate_highdim(spec.n0, s_prime, spec.d, eps, delta, config.eta)
    raise ParameterError(f"unknown problem family {problem!r}")


def _pilot_estimates(problem: str, config: CalibrationConfig) -> list[PilotRep]:
    from . import synth
    from .mechanisms import NoiseMode

    reps = []
    for rep in range(config.reps):
        data_seed = int(seeding.spawn(config.seed, seeding.DOMAIN_CALIBRATION, rep).integers(2**62))
        sites, truth = synth.generate(config.spec, data_seed)
        estimates = {}
        for site in sites:
            rng = seeding.spawn(config.seed, seeding.DOMAIN_CALIBRATION, rep, 1 + site.site_id)
            estimates[site.site_id] = _single_site_estimate(
                problem, site, config, rng, NoiseMode.CALIBRATED
            )
        reps.append(
            PilotRep(
                target_estimate=estimates[0],
                source_estimates=tuple((k, estimates[k]) for k in sorted(estimates) if k != 0),
                truth=truth,
            )
        )
    return reps


def _single_site_estimate(problem, site, config: CalibrationConfig, rng, mode) -> np.ndarray:
    opts = dict(config.estimator_options)
    if problem == "mean":
        from .meanest import kv_private_mean

        res = kv_private_mean(site.payload, config.budget, config.eta, rng, mode=mode)
        return np.array([res.estimate])
    if problem == "lowdim":
        from .lowdim import RegressionConfig, dp_linreg_single

        det_len = site.n // 2 - 1
        X, y = site.payload
        cfg = RegressionConfig(budget=config.budget, eta=config.eta, noise_mode=mode, **opts)
        beta, _ = dp_linreg_single((X[:det_len], y[:det_len]), cfg, rng)
        return beta
    if problem == "highdim":
        from .highdim import SparseRegConfig, default_sparsity, dp_sparse_single

        det_len = site.n // 2 - 1
        X, y = site.payload
        opts.setdefault("s_prime", default_sparsity(config.spec.s, opts.get("L", 1.0)))
        cfg = SparseRegConfig(budget=config.budget, eta=config.eta, noise_mode=mode, **opts)
        beta, _ = dp_sparse_single((X[:det_len], y[:det_len]), cfg, rng)
        return beta
    raise ParameterError(f"unknown problem family {problem!r}")


def select_tilde_c(
    pilot: list[PilotRep],
    threshold_radius: float,
    grid: tuple[float, ...],
    target_rate: float,
) -> tuple[float, dict[float, float]]:
    """Pick the most robust threshold multiplier from pilot estimates.

    For each candidate the recovery rate P(selected == A) is estimated on
    the pilot reps; among candidates reaching ``target_rate`` the midpoint
    of the longest contiguous feasible run wins (it maximizes the margin to
    both failure modes).  Raises :class:`CalibrationError` if none reaches
    the target.
    """
    rates_by_c: dict[float, float] = {}
    for c in grid:
        hits = 0
        for rep in pilot:
            inp = DetectionInput(rep.target_estimate, rep.source_estimates, threshold_radius, c)
            hits += detect_informative(inp) == rep.truth.A
        rates_by_c[c] = hits / len(pilot)
    feasible = [c for c in grid if rates_by_c[c] >= target_rate]
    if not feasible:
        best = max(grid, key=lambda c: rates_by_c[c])
        raise CalibrationError(
            f"no tilde_c on the grid reaches recovery {target_rate:.2f}; "
            f"best is {rates_by_c[best]:.3f} at tilde_c={best}"
        )
    runs: list[list[float]] = [[feasible[0]]]
    for prev, cur in zip(feasible, feasible[1:]):
        if grid.index(cur) == grid.index(prev) + 1:
            runs[-1].append(cur)
        else:
            runs.append([cur])
    best_run = max(runs, key=len)
    return best_run[len(best_run) // 2], rates_by_c


def calibrate_tilde_c(problem: str, config: CalibrationConfig) -> float:
    """Calibrated threshold multiplier for a problem family.

    Runs the pilot Monte Carlo described by ``config`` and returns a
    tilde_c achieving recovery of the true informative set at rate
    ``config.target_rate``.  With no sources to select (K = 0) the default
    multiplier 3 is returned.
    """
    if config.spec.K == 0:
        return DEFAULT_TILDE_C
    r = threshold_radius_for(problem, config)
    pilot = _pilot_estimates(problem, config)
    tilde_c, _ = select_tilde_c(pilot, r, config.grid, config.target_rate)
    return tilde_c
