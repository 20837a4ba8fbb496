"""Hot numeric kernels with numba acceleration and a pure-numpy fallback.

The per-round clipped-gradient sums dominate the runtime of the Monte Carlo
experiments (they touch every sample once per round).  Both backends compute
identical quantities; floating-point results can differ in the last ulp
because of summation order, which is why all downstream checks are
tolerance-based.

Backend selection happens once at import time:

    FEDTL_DISABLE_NUMBA=1   force the pure-numpy path

``backend()`` reports which path is active.  ``benchmarks/bench_kernels.py``
times both implementations side by side.
"""

from __future__ import annotations

import os

import numpy as np

_DISABLED = os.environ.get("FEDTL_DISABLE_NUMBA", "").strip() not in ("", "0")

try:  # pragma: no cover - exercised via the env flag in CI
    if _DISABLED:
        raise ImportError("numba disabled by FEDTL_DISABLE_NUMBA")
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    _HAVE_NUMBA = False


def backend() -> str:
    """Name of the active kernel backend: ``"numba"`` or ``"numpy"``."""
    return "numba" if _HAVE_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# pure-numpy reference implementations
# ---------------------------------------------------------------------------

def _grad_l2_np(X: np.ndarray, res: np.ndarray, R: float, Rt: float) -> np.ndarray:
    """(1/b) * sum_i clip(res_i, ±Rt) * X_i * min(1, R/||X_i||_2)."""
    norms = np.sqrt(np.einsum("ij,ij->i", X, X))
    scale = np.minimum(1.0, R / np.maximum(norms, np.finfo(float).tiny))
    cres = np.clip(res, -Rt, Rt)
    return X.T @ (scale * cres) / X.shape[0]


def _grad_linf_np(X: np.ndarray, res: np.ndarray, R: float, Rt: float) -> np.ndarray:
    """Same as :func:`_grad_l2_np` but with whole-row l-infinity rescaling."""
    mx = np.max(np.abs(X), axis=1)
    scale = np.minimum(1.0, R / np.maximum(mx, np.finfo(float).tiny))
    cres = np.clip(res, -Rt, Rt)
    return X.T @ (scale * cres) / X.shape[0]


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

if _HAVE_NUMBA:

    @njit(cache=True)
    def _grad_l2_nb(X, res, R, Rt):  # pragma: no cover - compiled
        b, d = X.shape
        g = np.zeros(d)
        for i in range(b):
            s = 0.0
            for j in range(d):
                s += X[i, j] * X[i, j]
            nrm = np.sqrt(s)
            sc = 1.0 if nrm <= R else R / nrm
            r = res[i]
            if r > Rt:
                r = Rt
            elif r < -Rt:
                r = -Rt
            w = sc * r
            for j in range(d):
                g[j] += w * X[i, j]
        return g / b

    @njit(cache=True)
    def _grad_linf_nb(X, res, R, Rt):  # pragma: no cover - compiled
        b, d = X.shape
        g = np.zeros(d)
        for i in range(b):
            mx = 0.0
            for j in range(d):
                a = abs(X[i, j])
                if a > mx:
                    mx = a
            sc = 1.0 if mx <= R else R / mx
            r = res[i]
            if r > Rt:
                r = Rt
            elif r < -Rt:
                r = -Rt
            w = sc * r
            for j in range(d):
                g[j] += w * X[i, j]
        return g / b


def clipped_gradient_l2(X: np.ndarray, res: np.ndarray, R: float, Rt: float) -> np.ndarray:
    """Average of l2-projected rows weighted by clipped residuals."""
    X = np.ascontiguousarray(X, dtype=np.float64)
    res = np.ascontiguousarray(res, dtype=np.float64)
    if _HAVE_NUMBA:
        return _grad_l2_nb(X, res, float(R), float(Rt))
    return _grad_l2_np(X, res, float(R), float(Rt))


def clipped_gradient_linf(X: np.ndarray, res: np.ndarray, R: float, Rt: float) -> np.ndarray:
    """Average of l-infinity-projected rows weighted by clipped residuals."""
    X = np.ascontiguousarray(X, dtype=np.float64)
    res = np.ascontiguousarray(res, dtype=np.float64)
    if _HAVE_NUMBA:
        return _grad_linf_nb(X, res, float(R), float(Rt))
    return _grad_linf_np(X, res, float(R), float(Rt))
