"""Timing comparison of the numba kernels against the pure-numpy fallback.

Runs the clipped-gradient kernels on batch shapes representative of the
experiment sweeps (small-d dense rounds up to wide sparse-regression
rounds) and prints per-call times for both backends.

Usage:  python benchmarks/bench_kernels.py [--repeat 200]
"""

import argparse
import time

import numpy as np

from fedtl import _kernels

SHAPES = [
    (500, 5),      # low-dim round batch
    (4000, 5),
    (1000, 100),   # sparse detection batch
    (5000, 200),   # sparse sweep batch
]


def time_fn(fn, args, repeat):
    fn(*args)  # warm-up / JIT compile
    t0 = time.perf_counter()
    for _ in range(repeat):
        fn(*args)
    return (time.perf_counter() - t0) / repeat


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeat", type=int, default=200)
    args = parser.parse_args()

    if not _kernels._HAVE_NUMBA:
        print("numba backend unavailable (FEDTL_DISABLE_NUMBA set or numba missing); "
              "only the numpy path can be timed.")

    rng = np.random.default_rng(0)
    print(f"{'shape':>12} {'kernel':>6} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8}")
    for b, d in SHAPES:
        X = rng.standard_normal((b, d))
        res = rng.standard_normal(b)
        R, Rt = 0.8 * float(np.max(np.linalg.norm(X, axis=1))), 1.5
        for name, np_fn, nb_fn in (
            ("l2", _kernels._grad_l2_np, getattr(_kernels, "_grad_l2_nb", None)),
            ("linf", _kernels._grad_linf_np, getattr(_kernels, "_grad_linf_nb", None)),
        ):
            t_np = time_fn(np_fn, (X, res, R, Rt), args.repeat)
            if nb_fn is not None:
                t_nb = time_fn(nb_fn, (X, res, R, Rt), args.repeat)
                np.testing.assert_allclose(np_fn(X, res, R, Rt), nb_fn(X, res, R, Rt),
                                           rtol=1e-10, atol=1e-12)
                print(f"{f'{b}x{d}':>12} {name:>6} {t_np * 1e3:>10.4f} {t_nb * 1e3:>10.4f} "
                      f"{t_np / t_nb:>7.2f}x")
            else:
                print(f"{f'{b}x{d}':>12} {name:>6} {t_np * 1e3:>10.4f} {'-':>10} {'-':>8}")


if __name__ == "__main__":
    main()
