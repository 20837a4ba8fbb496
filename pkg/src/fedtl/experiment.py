"""Replicated experiment sweeps: run pipelines over parameter grids, emit CSV.

Each grid cell runs the federated estimator and the target-only baseline on
identical generated data, audits the transcripts, and records errors against
the generator's ground truth.  Per-cell seeds derive from the master seed,
so results are independent of execution order and worker count; rows are
sorted before writing and the CSV is byte-stable given (config, seed).

CSV schema (fixed column order, one header comment line with the full
config and version):

    family,n,K,d,s,h,epsilon,delta,rep,err_target_only,err_federated,
    A_recovered,branch,ledger_ok,seconds

``seconds`` is wall-clock time and is the only column allowed to vary
between reruns of the same configuration.
"""

from __future__ import annotations

import itertools
import json
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import __version__, seeding
from .detection import CalibrationConfig, calibrate_tilde_c
from .errors import DivergenceError, InsufficientDataError, ParameterError
from .harness import Transcript, audit_ledger
from .highdim import SparseRegConfig, default_sparsity, meta_sparse, run_sparse_detection_phase
from .lowdim import RegressionConfig, fed_linreg, run_gd_phase
from .meanest import run_fed_mean
from .mechanisms import PrivacyBudget
from .rates import rate_highdim, rate_lowdim, rate_mean
from .synth import Family, ProblemSpec, generate

CSV_COLUMNS = (
    "family", "n", "K", "d", "s", "h", "epsilon", "delta", "rep",
    "err_target_only", "err_federated", "A_recovered", "branch", "ledger_ok", "seconds",
)

# Config fields that a sweep may vary.
_SWEEPABLE = {"n0", "n_k", "K", "d", "s", "h", "epsilon", "delta", "outlier_separation", "sigma"}


@dataclass(frozen=True)
class ExperimentConfig:
    """One batch experiment: a problem spec, a budget, and an optional grid."""

    family: Family
    n0: int
    K: int = 0
    d: int = 1
    s: int = 1
    h: float = 0.0
    n_k: int = 0
    A: frozenset[int] | None = None  # None: all sources informative
    outlier_separation: float = 1.0
    sigma: float = 1.0
    cov: str = "identity"
    L: float = 1.0
    epsilon: float = 1.0
    delta: float = 1e-5
    eta: float = 0.05
    tilde_c: float | str = 3.0
    replications: int = 1
    master_seed: int = 0
    sweep: tuple[tuple[str, tuple], ...] = ()
    estimator: dict = field(default_factory=dict)
    calibration: dict = field(default_factory=dict)
    output: str | None = None

    # Estimator knobs reachable from config files.  Noise mode is not one of
    # them: the zero-noise test mode must stay unreachable from this path.
    _ESTIMATOR_KEYS = frozenset({"T", "t_scale", "rho", "L", "s_prime", "lambda_denominator"})

    def __post_init__(self) -> None:
        if self.replications < 1:
            raise ParameterError(f"replications must be >= 1, got {self.replications}")
        for name, values in self.sweep:
            if name not in _SWEEPABLE:
                raise ParameterError(f"cannot sweep over {name!r}; allowed: {sorted(_SWEEPABLE)}")
            if len(values) == 0:
                raise ParameterError(f"sweep grid for {name!r} is empty")
        bad = set(self.estimator) - self._ESTIMATOR_KEYS
        if bad:
            raise ParameterError(f"unknown estimator options: {sorted(bad)}")

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(raw) - known
        if unknown:
            raise ParameterError(f"unknown config keys: {sorted(unknown)}")
        kw = dict(raw)
        if "family" in kw:
            kw["family"] = Family(kw["family"])
        if "A" in kw and kw["A"] is not None:
            kw["A"] = frozenset(int(k) for k in kw["A"])
        if "sweep" in kw:
            sw = kw["sweep"]
            if isinstance(sw, dict):
                sw = list(sw.items())
            kw["sweep"] = tuple((str(name), tuple(vals)) for name, vals in sw)
        return cls(**kw)

    def to_json(self) -> str:
        out = {}
        for name in self.__dataclass_fields__:
            val = getattr(self, name)
            if isinstance(val, Family):
                val = val.value
            elif isinstance(val, frozenset):
                val = sorted(val)
            elif name == "sweep":
                val = [[n, list(v)] for n, v in val]
            out[name] = val
        return json.dumps(out, sort_keys=True)

    def grid(self) -> list[dict]:
        if not self.sweep:
            return [{}]
        names = [name for name, _ in self.sweep]
        return [dict(zip(names, combo)) for combo in itertools.product(*(v for _, v in self.sweep))]

    def cell_params(self, overrides: dict) -> dict:
        base = {
            "n0": self.n0, "n_k": self.n_k, "K": self.K, "d": self.d, "s": self.s,
            "h": self.h, "epsilon": self.epsilon, "delta": self.delta,
            "outlier_separation": self.outlier_separation, "sigma": self.sigma,
        }
        base.update(overrides)
        return base


@dataclass
class SweepResult:
    rows: list[dict]
    csv_text: str
    ledger_clean: bool


def _problem_spec(config: ExperimentConfig, params: dict) -> ProblemSpec:
    K = int(params["K"])
    A = config.A if config.A is not None else frozenset(range(1, K + 1))
    A = frozenset(k for k in A if k <= K)
    common = dict(
        family=config.family,
        K=K,
        n0=int(params["n0"]),
        n_k=int(params["n_k"]),
        A=A,
        h=float(params["h"]),
        outlier_separation=float(params["outlier_separation"]),
        sigma=float(params["sigma"]),
        cov=config.cov,
        L=config.L,
    )
    if config.family is not Family.MEAN:
        common["d"] = int(params["d"])
    if config.family is Family.HIGHDIM:
        common["s"] = int(params["s"])
    return ProblemSpec(**common)


def _resolve_tilde_c(config: ExperimentConfig, spec: ProblemSpec, budget: PrivacyBudget, grid_index: int) -> float:
    if config.tilde_c != "calibrate":
        return float(config.tilde_c)
    cal_kw = dict(config.calibration)
    sep_mult = cal_kw.pop("separation_mult", 10.0)
    pilot_spec = ProblemSpec(
        family=spec.family, K=spec.K, n0=spec.n0, n_k=spec.n_k, A=spec.A, h=0.0,
        outlier_separation=sep_mult * _threshold_radius(config, spec, budget),
        d=spec.d, s=spec.s, sigma=spec.sigma, cov=spec.cov, L=spec.L,
    )
    cal = CalibrationConfig(
        spec=pilot_spec,
        budget=budget,
        eta=config.eta,
        seed=int(seeding.spawn(config.master_seed, seeding.DOMAIN_SWEEP, grid_index, 0, 2).integers(2**62)),
        estimator_options=dict(config.estimator),
        **cal_kw,
    )
    return calibrate_tilde_c(config.family.value, cal)


def _threshold_radius(config: ExperimentConfig, spec: ProblemSpec, budget: PrivacyBudget) -> float:
    if config.family is Family.MEAN:
        return rate_mean(spec.n0, config.eta, budget.epsilon)
    if config.family is Family.LOWDIM:
        return rate_lowdim(spec.n0, spec.d, budget.epsilon, budget.delta, config.eta)
    s_prime = config.estimator.get("s_prime") or default_sparsity(spec.s, config.L)
    return rate_highdim(spec.n0, s_prime, spec.d, budget.epsilon, budget.delta, config.eta)


def _err(a, b) -> float:
    return float(np.linalg.norm(np.atleast_1d(np.asarray(a, float)) - np.atleast_1d(np.asarray(b, float))))


def run_cell(config: ExperimentConfig, grid_index: int, overrides: dict, rep: int,
             tilde_c: float) -> dict:
    """Run one (grid point, replication) cell: pipeline, baseline, audit."""
    t0 = time.perf_counter()
    params = config.cell_params(overrides)
    budget = PrivacyBudget(float(params["epsilon"]), float(params["delta"]))
    spec = _problem_spec(config, params)
    data_seed = int(seeding.spawn(config.master_seed, seeding.DOMAIN_SWEEP, grid_index, rep, 0).integers(2**62))
    run_seed = int(seeding.spawn(config.master_seed, seeding.DOMAIN_SWEEP, grid_index, rep, 1).integers(2**62))
    base_seed = int(seeding.spawn(config.master_seed, seeding.DOMAIN_SWEEP, grid_index, rep, 2).integers(2**62))
    sites, truth = generate(spec, data_seed)
    truth_target = truth.params[0]

    branch = "aggregate"
    failures: list[str] = []
    err_fed = err_target = math.inf
    selected: frozenset[int] = frozenset()
    verdicts = []
    try:
        if config.family is Family.MEAN:
            fed_report, report = run_fed_mean(sites, budget, config.eta, tilde_c, run_seed)
            err_fed = _err(fed_report.estimate, truth_target)
            err_target = _err(fed_report.per_site[0].estimate, truth_target)
            selected = fed_report.selected
            verdicts.append(audit_ledger(report.transcript, budget))
        elif config.family is Family.LOWDIM:
            cfg = RegressionConfig(budget=budget, eta=config.eta, **config.estimator)
            report = fed_linreg(sites, cfg, tilde_c, run_seed)
            err_fed = _err(report.estimate, truth_target)
            selected = report.selected
            verdicts.append(audit_ledger(report.transcript, budget))
            target = sites[0]
            seg = {0: (target.n // 2 - 1, target.n)}
            beta_base, base_entries, _ = run_gd_phase(
                [target], seg, cfg.rounds_for(seg[0][1] - seg[0][0]), cfg, base_seed, shared=True
            )
            err_target = _err(beta_base, truth_target)
            verdicts.append(audit_ledger(Transcript(tuple(base_entries), 1 + max(e.round_index for e in base_entries)), budget))
        else:
            est_kw = dict(config.estimator)
            est_kw.setdefault("s_prime", default_sparsity(spec.s, config.L))
            cfg = SparseRegConfig(budget=budget, eta=config.eta, **est_kw)
            report = meta_sparse(sites, cfg, tilde_c, run_seed)
            err_fed = _err(report.estimate, truth_target)
            selected = report.selected
            branch = report.decision.branch
            verdicts.append(audit_ledger(report.transcript, budget))
            target = sites[0]
            seg = {0: (target.n // 2 - 1, target.n)}
            est_base, base_entries, _ = run_sparse_detection_phase(
                [target], seg, cfg.rounds_for(seg[0][1] - seg[0][0]), cfg, base_seed
            )
            err_target = _err(est_base[0], truth_target)
            verdicts.append(audit_ledger(Transcript(tuple(base_entries), 1 + max(e.round_index for e in base_entries)), budget))
    except (InsufficientDataError, DivergenceError) as exc:
        failures.append(str(exc))

    ledger_ok = bool(verdicts) and all(v.ok for v in verdicts)
    violation = bool(verdicts) and not all(v.ok for v in verdicts)
    seconds = time.perf_counter() - t0
    row = dict(
        family=config.family.value,
        n=int(params["n0"]), K=int(params["K"]), d=int(params["d"]), s=int(params["s"]),
        h=float(params["h"]), epsilon=float(params["epsilon"]), delta=float(params["delta"]),
        rep=rep,
        err_target_only=err_target,
        err_federated=err_fed,
        A_recovered=int(selected == truth.A),
        branch=branch if not failures else "failed",
        ledger_ok=int(ledger_ok),
        seconds=seconds,
    )
    row["_grid_index"] = grid_index
    row["_ledger_violation"] = violation
    return row


def _format_row(row: dict) -> str:
    vals = []
    for col in CSV_COLUMNS:
        v = row[col]
        if col == "seconds":
            vals.append(f"{v:.3f}")
        elif isinstance(v, float):
            vals.append(f"{v:.12g}")
        else:
            vals.append(str(v))
    return ",".join(vals)


def run_sweep(config: ExperimentConfig) -> SweepResult:
    """Run the full grid x replications and render the CSV."""
    grid = config.grid()
    tilde_cs = []
    for gi, overrides in enumerate(grid):
        params = config.cell_params(overrides)
        spec = _problem_spec(config, params)
        budget = PrivacyBudget(float(params["epsilon"]), float(params["delta"]))
        tilde_cs.append(_resolve_tilde_c(config, spec, budget, gi))

    cells = [
        (gi, overrides, rep)
        for gi, overrides in enumerate(grid)
        for rep in range(config.replications)
    ]
    workers = int(os.environ.get("FEDTL_THREADS", "1") or "1")
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(
                pool.map(lambda c: run_cell(config, c[0], c[1], c[2], tilde_cs[c[0]]), cells)
            )
    else:
        rows = [run_cell(config, gi, overrides, rep, tilde_cs[gi]) for gi, overrides, rep in cells]
    rows.sort(key=lambda r: (r["_grid_index"], r["rep"]))

    header = f"# fedtl-{__version__} config={config.to_json()}"
    lines = [header, ",".join(CSV_COLUMNS)]
    lines.extend(_format_row(r) for r in rows)
    csv_text = "\n".join(lines) + "\n"
    if config.output:
        with open(config.output, "w") as fh:
            fh.write(csv_text)
    # aborted cells (no transcript) are not ledger violations; only an
    # audited transcript that fails the audit makes the sweep unclean
    ledger_clean = not any(r["_ledger_violation"] for r in rows)
    return SweepResult(rows=rows, csv_text=csv_text, ledger_clean=ledger_clean)


# ---------------------------------------------------------------------------
# slope fitting
# ---------------------------------------------------------------------------

def parse_csv(text: str) -> list[dict]:
    lines = [ln for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
    if not lines:
        raise ParameterError("CSV has no data")
    header = lines[0].split(",")
    rows = []
    for ln in lines[1:]:
        parts = ln.split(",")
        if len(parts) != len(header):
            raise ParameterError(f"malformed CSV row: {ln!r}")
        rows.append(dict(zip(header, parts)))
    return rows


def fit_rate_slopes(
    csv_text: str, axis: str, column: str = "err_federated"
) -> tuple[float, float]:
    """Least-squares slope of log(median error) against log(axis value).

    Requires at least 4 distinct grid values along ``axis``.  Returns
    (slope, standard error).
    """
    if axis not in ("n", "K", "epsilon"):
        raise ParameterError(f"axis must be one of n, K, epsilon; got {axis!r}")
    rows = parse_csv(csv_text)
    if column not in rows[0]:
        raise ParameterError(f"no column {column!r} in CSV")
    groups: dict[float, list[float]] = {}
    for row in rows:
        x = float(row[axis])
        err = float(row[column])
        if math.isfinite(err):
            groups.setdefault(x, []).append(err)
    if len(groups) < 4:
        raise ParameterError(f"need >= 4 grid points along {axis!r}, found {len(groups)}")
    xs = np.log(sorted(groups))
    ys = np.array([math.log(float(np.median(groups[x]))) for x in sorted(groups)])
    A = np.vstack([xs, np.ones_like(xs)]).T
    coef, *_ = np.linalg.lstsq(A, ys, rcond=None)
    resid = ys - A @ coef
    dof = max(len(xs) - 2, 1)
    sxx = float(np.sum((xs - xs.mean()) ** 2))
    stderr = math.sqrt(float(resid @ resid) / dof / sxx)
    return float(coef[0]), stderr
