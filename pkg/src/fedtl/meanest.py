"""Univariate private mean estimation and its federated aggregation.

Per site, the estimator is a noisy truncated mean: a privately chosen
truncation interval (an (eps/2, delta)-DP dyadic stability histogram over
the data, unit variance known), clamping, averaging, and a Laplace release
calibrated to the interval width, consuming (eps/2, 0).  The federated
estimate is a sample-size weighted average over the target plus the
detected informative sources; the whole pipeline spends exactly one
(eps, delta) budget per site in a single communication round.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .detection import DetectionInput, detect_informative
from .errors import InsufficientDataError, ParameterError
from .harness import (
    EstimatorReport,
    SiteDataset,
    StageRecord,
    Transcript,
    run_protocol,
)
from .mechanisms import (
    BIN_MIN,
    NoiseMode,
    PrivacyBudget,
    dyadic_bin,
    laplace_sample,
    noisy_bin_argmax,
)
from .rates import rate_mean


@dataclass(frozen=True)
class PrivateMeanResult:
    """One site's private mean release and its truncation interval."""

    estimate: float
    trunc_low: float
    trunc_high: float
    budget_spent: PrivacyBudget
    n: int
    noise_scale: float
    widened: bool = False

    def __post_init__(self) -> None:
        if self.trunc_low > self.trunc_high:
            raise ParameterError("trunc_low must not exceed trunc_high")


@dataclass
class FedMeanReport:
    estimate: float
    selected: frozenset[int]
    per_site: dict[int, PrivateMeanResult]


def _range_pad(n: int, eta: float) -> float:
    return 2.0 * math.sqrt(math.log(2.0 * n / eta)) + 1.0


def private_range(
    data: np.ndarray,
    epsilon: float,
    delta: float,
    eta: float,
    rng: np.random.Generator,
    mode: NoiseMode = NoiseMode.CALIBRATED,
) -> tuple[float, float, bool]:
    """(eps, delta)-DP truncation interval via a signed dyadic histogram.

    Each observation is keyed by the dyadic bin of its magnitude and its
    sign (with a zero bin for |x| below the smallest scale); the winning
    noisy bin's endpoints are padded by 2*sqrt(ln(2n/eta)) + 1 so that, with
    unit variance, the interval covers all data with probability >= 1-eta.

    Returns (low, high, widened); ``widened`` marks the defensive branch
    where a degenerate interval was symmetrically widened to width 1.
    """
    x = np.asarray(data, dtype=float)
    n = x.size
    if n < 2:
        raise ParameterError(f"need at least 2 observations, got {n}")
    absx = np.abs(x)
    nz = absx > 0.0
    keys = np.zeros(n, dtype=np.int64)
    if nz.any():
        j = dyadic_bin(absx[nz])
        keys[nz] = np.sign(x[nz]).astype(np.int64) * (j - BIN_MIN + 1)
    try:
        key = noisy_bin_argmax(keys, n, epsilon, delta, rng, mode)
    except InsufficientDataError:
        raise InsufficientDataError("insufficient sample for private range") from None
    if key == 0:
        lo_b, hi_b = -(2.0 ** BIN_MIN), 2.0 ** BIN_MIN
    else:
        j = abs(key) + BIN_MIN - 1
        lo_b, hi_b = 2.0 ** j, 2.0 ** (j + 1)
        if key < 0:
            lo_b, hi_b = -hi_b, -lo_b
    pad = _range_pad(n, eta)
    lo, hi = lo_b - pad, hi_b + pad
    widened = False
    if not lo < hi:  # pragma: no cover - unreachable with pad > 0, kept defensively
        mid = 0.5 * (lo + hi)
        lo, hi = mid - 0.5, mid + 0.5
        widened = True
    return float(lo), float(hi), widened


def kv_private_mean(
    data: np.ndarray,
    budget: PrivacyBudget,
    eta: float,
    rng: np.random.Generator,
    mode: NoiseMode = NoiseMode.CALIBRATED,
    range_rng: np.random.Generator | None = None,
) -> PrivateMeanResult:
    """Noisy truncated mean of one site's samples.

    The budget splits into (eps/2, delta) for the truncation interval and
    (eps/2, 0) for the Laplace release, whose scale is
    2*(high - low)/(n*eps).  ``range_rng`` may supply a dedicated stream for
    the interval subroutine; by default both stages share ``rng``.
    """
    x = np.asarray(data, dtype=float)
    n = x.size
    if n < 2:
        raise ParameterError(f"need at least 2 observations, got {n}")
    if not 0 < eta < 1:
        raise ParameterError(f"eta must lie in (0, 1), got {eta}")
    lo, hi, widened = private_range(
        x, budget.epsilon / 2.0, budget.delta, eta, range_rng if range_rng is not None else rng, mode
    )
    y = np.clip(x, lo, hi)
    scale = 2.0 * (hi - lo) / (n * budget.epsilon)
    noise = laplace_sample(rng, scale, mode)
    return PrivateMeanResult(
        estimate=float(np.mean(y) + noise),
        trunc_low=lo,
        trunc_high=hi,
        budget_spent=budget,
        n=n,
        noise_scale=scale,
        widened=widened,
    )


def fed_mean(
    per_site: list[tuple[int, int, PrivateMeanResult]],
    target: tuple[int, PrivateMeanResult],
    eta: float,
    epsilon: float,
    tilde_c: float,
) -> FedMeanReport:
    """Sample-size weighted average over the detected informative set.

    Detection compares each source estimate against the target estimate at
    threshold tilde_c * rate_mean(n0, eta, epsilon).  An empty selection
    returns the target estimate unchanged.
    """
    n0, target_res = target
    for k, _, res in per_site:
        if res.budget_spent != target_res.budget_spent:
            raise ParameterError(
                f"site {k} estimate spent {res.budget_spent}, target spent {target_res.budget_spent}"
            )
    r = rate_mean(n0, eta, epsilon)
    inp = DetectionInput(
        target_estimate=np.array([target_res.estimate]),
        source_estimates=tuple((k, np.array([res.estimate])) for k, _, res in per_site),
        threshold_radius=r,
        tilde_c=tilde_c,
    )
    selected = detect_informative(inp)
    num = n0 * target_res.estimate
    den = n0
    results = {0: target_res}
    for k, n_k, res in per_site:
        results[k] = res
        if k in selected:
            num += n_k * res.estimate
            den += n_k
    return FedMeanReport(estimate=num / den, selected=selected, per_site=results)


def run_fed_mean(
    sites: list[SiteDataset],
    budget: PrivacyBudget,
    eta: float,
    tilde_c: float,
    master_seed: int,
    mode: NoiseMode = NoiseMode.CALIBRATED,
) -> tuple[FedMeanReport, EstimatorReport]:
    """Non-interactive federated mean pipeline with a full transcript.

    One protocol round: every site releases its truncation interval and its
    noisy truncated mean; aggregation and detection are post-processing of
    the transcript payloads.
    """
    sizes = {s.site_id: s.n for s in sites}
    if 0 not in sizes:
        raise ParameterError("sites must include the target (site_id 0)")

    def round_fn(view, broadcast):
        x = view.data
        n = x.size
        res = kv_private_mean(
            x, budget, eta, view.rng("laplace"), mode=mode, range_rng=view.rng("range")
        )
        width = res.trunc_high - res.trunc_low
        return [
            StageRecord(
                stage="range",
                epsilon=budget.epsilon / 2.0,
                delta=budget.delta,
                sensitivity=2.0 / n,
                noise_scale=(2.0 / n) / (budget.epsilon / 2.0) if mode is NoiseMode.CALIBRATED else 0.0,
                payload=np.array([res.trunc_low, res.trunc_high]),
            ),
            StageRecord(
                stage="laplace",
                epsilon=budget.epsilon / 2.0,
                delta=0.0,
                sensitivity=width / n,
                noise_scale=res.noise_scale if mode is NoiseMode.CALIBRATED else 0.0,
                payload=res.estimate,
            ),
        ]

    def agg_fn(entries, broadcast, t):
        out = {}
        for e in entries:
            if e.stage == "laplace":
                lo, hi = next(
                    x.payload for x in entries if x.site_id == e.site_id and x.stage == "range"
                )
                out[e.site_id] = PrivateMeanResult(
                    estimate=float(e.payload),
                    trunc_low=float(lo),
                    trunc_high=float(hi),
                    budget_spent=budget,
                    n=sizes[e.site_id],
                    noise_scale=e.noise_scale,
                )
        return out

    blocks = {s.site_id: [(0, s.n)] for s in sites}
    results, entries = run_protocol(
        sites, round_fn, agg_fn, T=1, blocks=blocks, master_seed=master_seed, noise_mode=mode
    )
    per_site = [(k, sizes[k], results[k]) for k in sorted(results) if k != 0]
    report = fed_mean(per_site, (sizes[0], results[0]), eta, budget.epsilon, tilde_c)
    transcript = Transcript(tuple(entries), 1)
    est_report = EstimatorReport(
        estimate=report.estimate,
        selected=report.selected,
        transcript=transcript,
        master_seed=master_seed,
        per_site=report.per_site,
    )
    return report, est_report
