"""Time the numba and numpy backends of the hot kernels side by side.

    python benchmarks/bench_accel.py [--size N] [--repeat R]

The end-to-end row builds one Levi expansion for the mild 1-D field in a
subprocess per backend, since the backend is fixed at import time.
"""

import argparse
import os
import subprocess
import sys
import time

import numpy as np

from levikit import _accel
from levikit.coeffs import CoefficientField
from levikit.parametrix import phi1_batch

END_TO_END = """
import time, warnings
from levikit.coeffs import CoefficientField
from levikit.levi import LeviExpansion
f = CoefficientField.from_expressions(1, {(1, 1): "2 + 0.5*sin(x1)*cos(t)"},
                                      kappa=1.5, M=2.5, N1=0.6621, N2=0.0, alpha=1.0)
warnings.simplefilter("ignore")
LeviExpansion(f, [0.0], 0.0, 1.0, tol=0.0, ell_max=2)
t0 = time.perf_counter()
LeviExpansion(f, [0.3], 0.0, 1.0, tol=0.0, ell_max=8)
print(time.perf_counter() - t0)
"""


def best_of(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size", type=int, default=200_000)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    if not _accel.numba_impl:
        print("numba is not installed; only the numpy backend is available")
        return 1
    rng = np.random.default_rng(0)
    p = args.size
    field = CoefficientField.from_expressions(
        1, {(1, 1): "2 + 0.5*sin(x1)*cos(t)"}, kappa=1.5, M=2.5, N1=0.6621, N2=0.0, alpha=1.0)
    x = rng.uniform(-3, 3, (p, 1))
    xi = rng.uniform(-3, 3, (p, 1))
    tau = rng.uniform(0, 1, p)
    t = tau + rng.uniform(1e-4, 2, p)
    grid = (np.log(1e-3), 0.37, 40, -6.0, 0.2, 61)
    values = rng.standard_normal(40 * 61)
    logr = rng.uniform(np.log(1e-3), np.log(1e-3) + 0.37 * 39, p)
    y = rng.uniform(-6, 6, (p, 1))
    rows = rng.integers(0, 64, p)
    w = rng.standard_normal(p)

    def phi1(impl):
        return lambda: phi1_batch(field, x, t, xi, tau, impl=impl)

    def gather(impl):
        return lambda: _accel.gather_values(values, logr, y, grid, impl=impl)

    def scatter(impl):
        out = np.zeros((64, 40 * 61))
        return lambda: _accel.scatter_rows(out, rows, w, logr, y, grid, impl=impl)

    print(f"{'kernel':<14s} {'numpy [s]':>10s} {'numba [s]':>10s} {'speed-up':>9s}")
    for name, make in (("phi1", phi1), ("gather", gather), ("scatter", scatter)):
        a = best_of(make(_accel.numpy_impl), args.repeat)
        b = best_of(make(_accel.numba_impl), args.repeat)
        print(f"{name:<14s} {a:>10.4f} {b:>10.4f} {a / b:>8.1f}x")
    g1 = _accel.gather_values(values, logr, y, grid, impl=_accel.numpy_impl)
    g2 = _accel.gather_values(values, logr, y, grid, impl=_accel.numba_impl)
    print(f"gather max abs difference {np.max(np.abs(g1 - g2)):.1e}")

    e2e = {}
    for backend, flag in (("numpy", "1"), ("numba", "0")):
        env = dict(os.environ, LEVIKIT_NO_NUMBA=flag)
        out = subprocess.run([sys.executable, "-c", END_TO_END], env=env, check=True,
                             capture_output=True, text=True)
        e2e[backend] = float(out.stdout.strip().splitlines()[-1])
    print(f"{'expansion':<14s} {e2e['numpy']:>10.4f} {e2e['numba']:>10.4f} "
          f"{e2e['numpy'] / e2e['numba']:>8.1f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
