"""High-dimensional sparse private regression: single-site, federated, meta.

The single-site estimator alternates a clipped, scale-adaptive batch
gradient step (covariates rescaled to an l-infinity ball) with a private
noisy top-s' selection, so every released iterate is s'-sparse.  The
federated variant privatizes each site's clipped gradient with Gaussian
noise and lets the aggregator apply a plain hard threshold, which costs no
budget because its inputs are already privatized.  A meta rule decides
between aggregating the detected sources and falling back to the target
alone by comparing the aggregation privacy error against the target-only
rate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ._kernels import clipped_gradient_l2, clipped_gradient_linf
from .detection import DetectionInput, detect_informative
from .errors import DivergenceError, InsufficientDataError, ParameterError, ProtocolError
from .harness import (
    EstimatorReport,
    SiteDataset,
    StageRecord,
    Transcript,
    run_protocol,
)
from .lowdim import DIVERGENCE_NORM, GdTrace
from .mechanisms import (
    NoiseMode,
    PrivacyBudget,
    gaussian_noise_std,
    hard_threshold,
    peeling,
    peeling_noise_scale,
    private_variance,
)
from .rates import aggregation_privacy_term, rate_highdim


def sparse_step_size(L: float) -> float:
    """Default step (9/(10L)) * (1 - 0.296/L^4) for eigenvalue bound L."""
    return (9.0 / (10.0 * L)) * (1.0 - 0.296 / L**4)


def default_sparsity(s: int, L: float = 1.0) -> int:
    """Default selection size ceil(4.18 * L^4 * s)."""
    return math.ceil(4.18 * L**4 * s)


@dataclass(frozen=True)
class SparseRegConfig:
    """Settings of the sparse noisy-gradient estimator.

    ``lambda_denominator`` chooses the sample count in the selection noise
    level 2*rho*R_t*R/denominator: "batch" (the default) uses the batch
    size actually touched by the round, which is the privacy-safe reading;
    "full" divides by the whole sample size instead.
    """

    budget: PrivacyBudget
    s_prime: int
    eta: float = 0.05
    T: int | None = None
    t_scale: float = 1.0
    rho: float | None = None
    L: float = 1.0
    beta0: np.ndarray | None = None
    noise_mode: NoiseMode = NoiseMode.CALIBRATED
    lambda_denominator: str = "batch"

    def __post_init__(self) -> None:
        if not 0 < self.eta < 1:
            raise ParameterError(f"eta must lie in (0, 1), got {self.eta}")
        if self.s_prime < 1:
            raise ParameterError(f"s_prime must be >= 1, got {self.s_prime}")
        if self.T is not None and self.T < 1:
            raise ParameterError(f"T must be >= 1, got {self.T}")
        if self.rho is not None and self.rho < 0:
            raise ParameterError(f"rho must be nonnegative, got {self.rho}")
        if self.L < 1:
            raise ParameterError(f"L must be >= 1, got {self.L}")
        if self.lambda_denominator not in ("batch", "full"):
            raise ParameterError(f"lambda_denominator must be 'batch' or 'full', got {self.lambda_denominator!r}")

    def rounds_for(self, n: int) -> int:
        if self.T is not None:
            return self.T
        return max(1, math.ceil(self.t_scale * math.log(n)))

    def step(self) -> float:
        return self.rho if self.rho is not None else sparse_step_size(self.L)


@dataclass
class SparseTrace(GdTrace):
    """Gradient-descent diagnostics plus selection-noise level and support size."""

    lam: list[float] = field(default_factory=list)
    support_size: list[int] = field(default_factory=list)

    def append_sparse(self, R, R_t, grad_norm, noise_std, beta, lam) -> None:
        self.append(R, R_t, grad_norm, noise_std, beta)
        self.lam.append(float(lam))
        self.support_size.append(int(np.count_nonzero(beta)))


@dataclass(frozen=True)
class MetaDecision:
    """Outcome of the aggregate-or-not comparison of the meta rule."""

    branch: str  # "aggregate" | "target_only"
    lhs: float
    rhs: float

    def __post_init__(self) -> None:
        expected = "aggregate" if self.lhs <= self.rhs else "target_only"
        if self.branch != expected:
            raise ParameterError(f"branch {self.branch!r} inconsistent with lhs={self.lhs}, rhs={self.rhs}")


def dp_sparse_single(
    data: tuple[np.ndarray, np.ndarray],
    cfg: SparseRegConfig,
    rng: np.random.Generator,
) -> tuple[np.ndarray, SparseTrace]:
    """Private sparse regression on one data set; iterates stay s'-sparse."""
    X, y = data
    n, d = X.shape
    if cfg.s_prime > d:
        raise ParameterError(f"s_prime={cfg.s_prime} exceeds d={d}")
    T = cfg.rounds_for(n)
    b = n // T
    if b < 2:
        raise ParameterError(f"batch size floor({n}/{T}) must be >= 2")
    rho = cfg.step()
    half = cfg.budget.halve()
    R = 2.0 * math.sqrt(cfg.L * math.log(n * d / cfg.eta))
    log_width = 2.0 * math.sqrt(math.log(n / cfg.eta))
    beta = np.zeros(d) if cfg.beta0 is None else np.asarray(cfg.beta0, dtype=float).copy()
    trace = SparseTrace()
    denom_n = n
    for t in range(T):
        Xb, yb = X[b * t : b * (t + 1)], y[b * t : b * (t + 1)]
        res = Xb @ beta - yb
        try:
            sigma_hat = private_variance(res[: 2 * (b // 2)], half, rng, cfg.noise_mode)
        except InsufficientDataError as exc:
            raise InsufficientDataError(f"round {t}: {exc}") from exc
        R_t = log_width * sigma_hat
        g = clipped_gradient_linf(Xb, res, R, R_t)
        lam = 2.0 * rho * R_t * R / (b if cfg.lambda_denominator == "batch" else denom_n)
        beta = peeling(beta - rho * g, cfg.s_prime, half, lam, rng, cfg.noise_mode)
        scale = 0.0 if cfg.noise_mode is NoiseMode.OFF else peeling_noise_scale(lam, cfg.s_prime, half)
        trace.append_sparse(R, R_t, float(np.linalg.norm(g)), scale, beta, lam)
        if not np.isfinite(beta).all() or np.linalg.norm(beta) > DIVERGENCE_NORM:
            raise DivergenceError(t, f"|beta| = {np.linalg.norm(beta):.3g}")
    return beta, trace


# ---------------------------------------------------------------------------
# protocol-based execution
# ---------------------------------------------------------------------------

def _pv_record(sigma_hat, half: PrivacyBudget, n_pairs: int, mode: NoiseMode) -> StageRecord:
    return StageRecord(
        stage="private_variance",
        epsilon=half.epsilon,
        delta=half.delta,
        sensitivity=2.0 / n_pairs,
        noise_scale=0.0 if mode is NoiseMode.OFF else 2.0 / (half.epsilon * n_pairs),
        payload=sigma_hat,
    )


def run_sparse_detection_phase(
    sites: list[SiteDataset],
    segments: dict[int, tuple[int, int]],
    T: int,
    cfg: SparseRegConfig,
    master_seed: int,
    *,
    round_offset: int = 0,
):
    """Lockstep single-site sparse runs; each round releases the new iterate.

    Per (site, round): a private scale estimate plus a noisy top-s'
    selection, each on half the round budget.  Returns (estimates by site,
    transcript entries, traces by site).
    """
    by_id = {s.site_id: s for s in sites}
    d = by_id[next(iter(segments))].payload[0].shape[1]
    half = cfg.budget.halve()
    rho = cfg.step()
    mode = cfg.noise_mode
    stage_tag = f"peeling[s={cfg.s_prime}]"

    blocks, batch, seg_len = {}, {}, {}
    for k, (start, stop) in segments.items():
        m = stop - start
        b = m // T
        if b < 2:
            raise ProtocolError(f"site {k} exhausted batches: segment {m} rows over T={T} rounds")
        blocks[k] = [(start + t * b, start + (t + 1) * b) for t in range(T)]
        batch[k], seg_len[k] = b, m

    R = {k: 2.0 * math.sqrt(cfg.L * math.log(seg_len[k] * d / cfg.eta)) for k in segments}
    log_width = {k: 2.0 * math.sqrt(math.log(seg_len[k] / cfg.eta)) for k in segments}
    traces = {k: SparseTrace() for k in segments}

    def round_fn(view, broadcast):
        k = view.site_id
        Xb, yb = view.data
        beta = broadcast[k]
        b = batch[k]
        res = Xb @ beta - yb
        try:
            sigma_hat = private_variance(res[: 2 * (b // 2)], half, view.rng("private_variance"), mode)
        except InsufficientDataError as exc:
            raise InsufficientDataError(f"site {k}, round {view.round_index}: {exc}") from exc
        R_t = log_width[k] * sigma_hat
        g = clipped_gradient_linf(Xb, res, R[k], R_t)
        denom = b if cfg.lambda_denominator == "batch" else seg_len[k]
        lam = 2.0 * rho * R_t * R[k] / denom
        new_beta = peeling(beta - rho * g, cfg.s_prime, half, lam, view.rng("peeling"), mode)
        scale = 0.0 if mode is NoiseMode.OFF else peeling_noise_scale(lam, cfg.s_prime, half)
        traces[k].append_sparse(R[k], R_t, float(np.linalg.norm(g)), scale, new_beta, lam)
        return [
            _pv_record(sigma_hat, half, b // 2, mode),
            StageRecord(
                stage=stage_tag,
                epsilon=half.epsilon,
                delta=half.delta,
                sensitivity=lam,
                noise_scale=scale,
                payload=new_beta,
            ),
        ]

    def agg_fn(entries, broadcast, t):
        new = dict(broadcast)
        for e in entries:
            if e.stage == stage_tag:
                new[e.site_id] = e.payload
                if not np.isfinite(e.payload).all() or np.linalg.norm(e.payload) > DIVERGENCE_NORM:
                    raise DivergenceError(t, f"site {e.site_id}")
        return new

    initial = {
        k: (np.zeros(d) if cfg.beta0 is None else np.asarray(cfg.beta0, dtype=float).copy())
        for k in segments
    }
    estimates, entries = run_protocol(
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
    return estimates, entries, traces


def fed_sparse(
    sites: list[SiteDataset],
    cfg: SparseRegConfig,
    subset: frozenset[int] | set[int],
    master_seed: int,
    *,
    segments: dict[int, tuple[int, int]] | None = None,
    round_offset: int = 0,
):
    """Federated sparse regression over the target plus ``subset``.

    Each round, every participating site emits a size-weighted clipped
    gradient (l2 covariate projection here) privatized by the Gaussian
    mechanism; the aggregator folds the messages and hard-thresholds to s'
    coordinates, a post-processing step that costs no budget.

    Returns (estimate, transcript entries, trace).
    """
    by_id = {s.site_id: s for s in sites}
    if 0 not in by_id:
        raise ParameterError("sites must include the target (site_id 0)")
    participants = sorted({0} | set(subset))
    unknown = [k for k in participants if k not in by_id]
    if unknown:
        raise ParameterError(f"subset references unknown sites {unknown}")
    if segments is None:
        segments = {k: (0, by_id[k].n) for k in participants}
    else:
        segments = {k: segments[k] for k in participants}
    d = by_id[0].payload[0].shape[1]
    if cfg.s_prime > d:
        raise ParameterError(f"s_prime={cfg.s_prime} exceeds d={d}")
    half = cfg.budget.halve()
    rho = cfg.step()
    mode = cfg.noise_mode

    seg_len = {k: stop - start for k, (start, stop) in segments.items()}
    N = sum(seg_len.values())
    T = cfg.rounds_for(N)
    blocks, batch = {}, {}
    for k, (start, stop) in segments.items():
        b = seg_len[k] // T
        if b < 2:
            raise ProtocolError(f"site {k} exhausted batches: segment {seg_len[k]} rows over T={T} rounds")
        blocks[k] = [(start + t * b, start + (t + 1) * b) for t in range(T)]
        batch[k] = b

    R = 2.0 * math.sqrt(cfg.L * d * math.log(N / cfg.eta))
    log_width = 2.0 * math.sqrt(math.log(N / cfg.eta))
    weight = {k: seg_len[k] / N for k in participants}
    trace = SparseTrace()

    def round_fn(view, broadcast):
        k = view.site_id
        Xb, yb = view.data
        b = batch[k]
        res = Xb @ broadcast - yb
        try:
            sigma_hat = private_variance(res[: 2 * (b // 2)], half, view.rng("private_variance"), mode)
        except InsufficientDataError as exc:
            raise InsufficientDataError(f"site {k}, round {view.round_index}: {exc}") from exc
        R_t = log_width * sigma_hat
        g = clipped_gradient_l2(Xb, res, R, R_t)
        sens = 2.0 * R * R_t / b
        std = gaussian_noise_std(sens, half)
        if mode is NoiseMode.OFF:
            z = weight[k] * g
        else:
            z = weight[k] * (g + std * view.rng("gaussian").standard_normal(d))
        return [
            _pv_record(sigma_hat, half, b // 2, mode),
            StageRecord(
                stage="gaussian",
                epsilon=half.epsilon,
                delta=half.delta,
                sensitivity=weight[k] * sens,
                noise_scale=0.0 if mode is NoiseMode.OFF else weight[k] * std,
                payload=z,
            ),
        ]

    def agg_fn(entries, broadcast, t):
        step = sum(e.payload for e in entries if e.stage == "gaussian")
        half_iter = broadcast - rho * step
        new = hard_threshold(half_iter, cfg.s_prime)
        trace.append_sparse(R, 0.0, float(np.linalg.norm(step)), 0.0, new, 0.0)
        if not np.isfinite(new).all() or np.linalg.norm(new) > DIVERGENCE_NORM:
            raise DivergenceError(t)
        return new

    beta0 = np.zeros(d) if cfg.beta0 is None else np.asarray(cfg.beta0, dtype=float).copy()
    beta, entries = run_protocol(
        [by_id[k] for k in participants],
        round_fn,
        agg_fn,
        T,
        blocks=blocks,
        master_seed=master_seed,
        noise_mode=mode,
        initial_broadcast=beta0,
        round_offset=round_offset,
    )
    return beta, entries, trace


def meta_sparse(
    sites: list[SiteDataset],
    cfg: SparseRegConfig,
    tilde_c: float,
    master_seed: int,
) -> EstimatorReport:
    """Detection, then aggregate-or-target-only sparse estimation.

    Stage 1 runs the single-site sparse estimator on every site's detection
    half and selects sources within tilde_c * rate_highdim(n0, s', ...) of
    the target estimate.  Stage 2 compares the aggregation privacy error of
    the selected set against that threshold rate: if aggregation is not
    more expensive, the federated run uses the selected sites' remaining
    halves, otherwise the target's remaining half is used alone.
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
    estimates, det_entries, det_traces = run_sparse_detection_phase(
        sites, det_segments, T_det, cfg, master_seed
    )

    eps, delta = cfg.budget.epsilon, cfg.budget.delta
    r = rate_highdim(by_id[0].n, cfg.s_prime, d, eps, delta, cfg.eta)
    selected = detect_informative(
        DetectionInput(
            target_estimate=estimates[0],
            source_estimates=tuple((k, estimates[k]) for k in sorted(estimates) if k != 0),
            threshold_radius=r,
            tilde_c=tilde_c,
        )
    )

    iter_segments = {k: (det_segments[k][1], by_id[k].n) for k in sorted(by_id)}
    n_agg = sum(stop - start for k, (start, stop) in iter_segments.items() if k == 0 or k in selected)
    lhs = aggregation_privacy_term(len(selected), n_agg, cfg.s_prime, d, eps, delta, cfg.eta)
    rhs = tilde_c * r
    decision = MetaDecision(branch="aggregate" if lhs <= rhs else "target_only", lhs=lhs, rhs=rhs)

    if decision.branch == "aggregate":
        beta, stage2_entries, stage2_trace = fed_sparse(
            sites, cfg, selected, master_seed, segments=iter_segments, round_offset=T_det
        )
    else:
        est2, stage2_entries, traces2 = run_sparse_detection_phase(
            sites, {0: iter_segments[0]}, cfg.rounds_for(iter_segments[0][1] - iter_segments[0][0]),
            cfg, master_seed, round_offset=T_det,
        )
        beta, stage2_trace = est2[0], traces2[0]

    rounds = max(e.round_index for e in stage2_entries) + 1
    transcript = Transcript(tuple(det_entries) + tuple(stage2_entries), rounds)
    return EstimatorReport(
        estimate=beta,
        selected=selected,
        transcript=transcript,
        master_seed=master_seed,
        per_site={k: estimates[k] for k in sorted(estimates)},
        traces={"detection": det_traces, "stage2": stage2_trace},
        decision=decision,
    )
