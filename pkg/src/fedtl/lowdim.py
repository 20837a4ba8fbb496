"""Low-dimensional private linear regression, single-site and federated.

The single-site estimator is noisy projected gradient descent with adaptive
residual clipping: each round runs on a fresh disjoint batch, estimates the
residual scale privately, clips covariates to an l2 ball and residuals to
the estimated scale, and releases the batch gradient through the Gaussian
mechanism.  Each round composes a (eps/2, delta/2) scale estimate with a
(eps/2, delta/2) gradient release; disjoint batches make rounds compose in
parallel, so the whole run is (eps, delta)-DP.

The federated variant runs the same round structure at every selected site
and lets the aggregator fold the weighted noisy gradients; sites are chosen
by the detection rule applied to single-site estimates computed on each
site's detection half.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ._kernels import clipped_gradient_l2
from .detection import DetectionInput, detect_informative
from .errors import DivergenceError, InsufficientDataError, ParameterError, ProtocolError
from .harness import (
    EstimatorReport,
    SiteDataset,
    StageRecord,
    Transcript,
    run_protocol,
)
from .mechanisms import NoiseMode, PrivacyBudget, gaussian_noise_std, private_variance
from .rates import rate_lowdim

DIVERGENCE_NORM = 1e8


def step_size(L: float) -> float:
    """Default gradient step 18L/(1 + 81 L^2) for eigenvalue bound L."""
    return 18.0 * L / (1.0 + 81.0 * L * L)


def default_rounds(n: int, t_scale: float = 1.0) -> int:
    """Round count ceil(t_scale * ln n)."""
    return max(1, math.ceil(t_scale * math.log(n)))


@dataclass(frozen=True)
class RegressionConfig:
    """Settings of the noisy-gradient regression estimator.

    ``T=None`` derives the round count as ceil(t_scale * ln n) from the data
    actually iterated on; ``rho=None`` uses the default step for ``L``.
    """

    budget: PrivacyBudget
    eta: float = 0.05
    T: int | None = None
    t_scale: float = 1.0
    rho: float | None = None
    L: float = 1.0
    beta0: np.ndarray | None = None
    noise_mode: NoiseMode = NoiseMode.CALIBRATED

    def __post_init__(self) -> None:
        if not 0 < self.eta < 1:
            raise ParameterError(f"eta must lie in (0, 1), got {self.eta}")
        if self.T is not None and self.T < 1:
            raise ParameterError(f"T must be >= 1, got {self.T}")
        if self.rho is not None and self.rho < 0:
            raise ParameterError(f"rho must be nonnegative, got {self.rho}")
        if self.L < 1:
            raise ParameterError(f"L must be >= 1, got {self.L}")

    def rounds_for(self, n: int) -> int:
        return self.T if self.T is not None else default_rounds(n, self.t_scale)

    def step(self) -> float:
        return self.rho if self.rho is not None else step_size(self.L)


@dataclass
class GdTrace:
    """Per-round diagnostics of one gradient-descent run."""

    R: list[float] = field(default_factory=list)
    R_t: list[float] = field(default_factory=list)
    grad_norm: list[float] = field(default_factory=list)
    noise_std: list[float] = field(default_factory=list)
    iterates: list[np.ndarray] = field(default_factory=list)

    def append(self, R, R_t, grad_norm, noise_std, beta) -> None:
        self.R.append(float(R))
        self.R_t.append(float(R_t))
        self.grad_norm.append(float(grad_norm))
        self.noise_std.append(float(noise_std))
        self.iterates.append(np.array(beta))


def _noisy_gradient(
    Xb: np.ndarray,
    yb: np.ndarray,
    beta: np.ndarray,
    R: float,
    log_width: float,
    half: PrivacyBudget,
    rng_pv: np.random.Generator,
    rng_noise: np.random.Generator,
    mode: NoiseMode,
):
    """One round's privatized clipped gradient on a batch.

    Returns (noisy gradient, sigma_hat, R_t, phi, sensitivity, |g|).
    ``log_width`` is sqrt(log(n/eta)) with n the size of the data the run
    owns (site data when single-site, total federation size when federated).
    """
    b = Xb.shape[0]
    res = Xb @ beta - yb
    m = 2 * (b // 2)
    sigma_hat = private_variance(res[:m], half, rng_pv, mode)
    R_t = log_width * sigma_hat
    sensitivity = 2.0 * R * R_t / b
    phi = gaussian_noise_std(sensitivity, half)
    g = clipped_gradient_l2(Xb, res, R, R_t)
    w = rng_noise.standard_normal(beta.size)
    noisy = g if mode is NoiseMode.OFF else g + phi * w
    return noisy, sigma_hat, R_t, phi, sensitivity, float(np.linalg.norm(g))


def dp_linreg_single(
    data: tuple[np.ndarray, np.ndarray],
    cfg: RegressionConfig,
    rng: np.random.Generator,
) -> tuple[np.ndarray, GdTrace]:
    """Private linear regression on one data set.

    Consumes the rows in T disjoint consecutive batches of size floor(n/T).
    Raises :class:`InsufficientDataError` if a round's scale estimate fails
    (the batch is too small) and :class:`DivergenceError` if iterates leave
    the finite range.
    """
    X, y = data
    n, d = X.shape
    T = cfg.rounds_for(n)
    b = n // T
    if b < 2:
        raise ParameterError(f"batch size floor({n}/{T}) must be >= 2")
    rho = cfg.step()
    half = cfg.budget.halve()
    R = math.sqrt(d * math.log(n / cfg.eta))
    log_width = math.sqrt(math.log(n / cfg.eta))
    beta = np.zeros(d) if cfg.beta0 is None else np.asarray(cfg.beta0, dtype=float).copy()
    trace = GdTrace()
    for t in range(T):
        Xb, yb = X[b * t : b * (t + 1)], y[b * t : b * (t + 1)]
        try:
            noisy, sigma_hat, R_t, phi, _, gnorm = _noisy_gradient(
                Xb, yb, beta, R, log_width, half, rng, rng, cfg.noise_mode
            )
        except InsufficientDataError as exc:
            raise InsufficientDataError(f"round {t}: {exc}") from exc
        beta = beta - rho * noisy
        trace.append(R, R_t, gnorm, phi if cfg.noise_mode is NoiseMode.CALIBRATED else 0.0, beta)
        if not np.isfinite(beta).all() or np.linalg.norm(beta) > DIVERGENCE_NORM:
            raise DivergenceError(t, f"|beta| = {np.linalg.norm(beta):.3g}")
    return beta, trace


# ---------------------------------------------------------------------------
# protocol-based execution (records transcripts)
# ---------------------------------------------------------------------------

def _gd_stage_records(noisy_payload, sigma_hat, phi, sensitivity, weight, half, n_pairs, mode):
    pv_scale = 2.0 / (half.epsilon * n_pairs)
    off = mode is NoiseMode.OFF
    return [
        StageRecord(
            stage="private_variance",
            epsilon=half.epsilon,
            delta=half.delta,
            sensitivity=2.0 / n_pairs,
            noise_scale=0.0 if off else pv_scale,
            payload=sigma_hat,
        ),
        StageRecord(
            stage="gaussian",
            epsilon=half.epsilon,
            delta=half.delta,
            sensitivity=weight * sensitivity,
            noise_scale=0.0 if off else weight * phi,
            payload=noisy_payload,
        ),
    ]


def run_gd_phase(
    sites: list[SiteDataset],
    segments: dict[int, tuple[int, int]],
    T: int,
    cfg: RegressionConfig,
    master_seed: int,
    *,
    shared: bool,
    round_offset: int = 0,
    beta0: np.ndarray | None = None,
):
    """T rounds of noisy gradient descent over per-site segments.

    With ``shared=False`` every site folds its own iterate (the detection
    stage: independent single-site runs recorded in lockstep rounds).  With
    ``shared=True`` the sites emit size-weighted gradients and the
    aggregator folds one common iterate (the federated stage).

    Returns (final state, transcript entries, traces).
    """
    d = next(iter(sites)).payload[0].shape[1]
    by_id = {s.site_id: s for s in sites}
    half = cfg.budget.halve()
    rho = cfg.step()
    mode = cfg.noise_mode

    blocks: dict[int, list[tuple[int, int]]] = {}
    batch: dict[int, int] = {}
    seg_len: dict[int, int] = {}
    for k, (start, stop) in segments.items():
        m = stop - start
        b = m // T
        if b < 2:
            raise ProtocolError(f"site {k} exhausted batches: segment {m} rows over T={T} rounds")
        blocks[k] = [(start + t * b, start + (t + 1) * b) for t in range(T)]
        batch[k] = b
        seg_len[k] = m

    if shared:
        N = sum(seg_len.values())
        R = {k: math.sqrt(d * math.log(N / cfg.eta)) for k in segments}
        log_width = {k: math.sqrt(math.log(N / cfg.eta)) for k in segments}
        weight = {k: seg_len[k] / N for k in segments}
    else:
        R = {k: math.sqrt(d * math.log(seg_len[k] / cfg.eta)) for k in segments}
        log_width = {k: math.sqrt(math.log(seg_len[k] / cfg.eta)) for k in segments}
        weight = {k: 1.0 for k in segments}

    beta_init = np.zeros(d) if beta0 is None else np.asarray(beta0, dtype=float).copy()
    traces = {k: GdTrace() for k in segments} if not shared else {"federated": GdTrace()}

    def round_fn(view, broadcast):
        k = view.site_id
        Xb, yb = view.data
        beta = broadcast if shared else broadcast[k]
        try:
            noisy, sigma_hat, R_t, phi, sens, gnorm = _noisy_gradient(
                Xb, yb, beta, R[k], log_width[k],
                half, view.rng("private_variance"), view.rng("gaussian"), mode,
            )
        except InsufficientDataError as exc:
            raise InsufficientDataError(f"site {k}, round {view.round_index}: {exc}") from exc
        if not shared:
            traces[k].append(R[k], R_t, gnorm, phi if mode is NoiseMode.CALIBRATED else 0.0, beta)
        return _gd_stage_records(
            weight[k] * noisy, sigma_hat, phi, sens, weight[k], half, batch[k] // 2, mode
        )

    def agg_fn(entries, broadcast, t):
        grads = {e.site_id: e.payload for e in entries if e.stage == "gaussian"}
        if shared:
            step = sum(grads.values())
            new = broadcast - rho * step
            traces["federated"].append(
                next(iter(R.values())), 0.0, float(np.linalg.norm(step)), 0.0, new
            )
            if not np.isfinite(new).all() or np.linalg.norm(new) > DIVERGENCE_NORM:
                raise DivergenceError(t, f"|beta| = {np.linalg.norm(new):.3g}")
            return new
        new = dict(broadcast)
        for k, g in grads.items():
            new[k] = new[k] - rho * g
            if not np.isfinite(new[k]).all() or np.linalg.norm(new[k]) > DIVERGENCE_NORM:
                raise DivergenceError(t, f"site {k} |beta| = {np.linalg.norm(new[k]):.3g}")
        return new

    initial = beta_init if shared else {k: beta_init.copy() for k in segments}
    state, entries = run_protocol(
        [by_id[k] for k in sorted(segments)],
        round_fn,
        agg_fn,
        T,
        blocks=blocks,
        master_seed=master_seed,
        noise_mode=mode,
        initial_broadcast=initial,
        round_offset=round_offset,
    )
    return state, entries, traces


def fed_linreg(
    sites: list[SiteDataset],
    cfg: RegressionConfig,
    tilde_c: float,
    master_seed: int,
) -> EstimatorReport:
    """Federated private linear regression with source detection.

    Stage 1 runs the single-site estimator on every site's detection half
    (the first floor(n/2) - 1 rows) and selects the informative set by
    comparing against the target estimate at threshold
    tilde_c * rate_lowdim(n0, ...).  Stage 2 runs T federated rounds of
    weighted noisy gradient descent on the remaining halves of the selected
    sites; the aggregator touches transcript entries only.
    """
    by_id = {s.site_id: s for s in sites}
    if 0 not in by_id:
        raise ParameterError("sites must include the target (site_id 0)")
    d = by_id[0].payload[0].shape[1]

    det_segments = {}
    for s in sites:
        det_len = s.n // 2 - 1
        if det_len < 2:
            raise ParameterError(f"site {s.site_id} too small for a detection split (n={s.n})")
        det_segments[s.site_id] = (0, det_len)
    T_det = cfg.rounds_for(det_segments[0][1])
    estimates, det_entries, det_traces = run_gd_phase(
        sites, det_segments, T_det, cfg, master_seed, shared=False
    )

    r = rate_lowdim(by_id[0].n, d, cfg.budget.epsilon, cfg.budget.delta, cfg.eta)
    selected = detect_informative(
        DetectionInput(
            target_estimate=estimates[0],
            source_estimates=tuple((k, estimates[k]) for k in sorted(estimates) if k != 0),
            threshold_radius=r,
            tilde_c=tilde_c,
        )
    )

    participants = sorted({0} | selected)
    fed_segments = {k: (det_segments[k][1], by_id[k].n) for k in participants}
    N = sum(stop - start for start, stop in fed_segments.values())
    T_fed = cfg.rounds_for(N)
    beta, fed_entries, fed_traces = run_gd_phase(
        sites, fed_segments, T_fed, cfg, master_seed, shared=True, round_offset=T_det
    )

    transcript = Transcript(tuple(det_entries + fed_entries), T_det + T_fed)
    return EstimatorReport(
        estimate=beta,
        selected=selected,
        transcript=transcript,
        master_seed=master_seed,
        per_site={k: estimates[k] for k in sorted(estimates)},
        traces={"detection": det_traces, "federated": fed_traces["federated"]},
    )
