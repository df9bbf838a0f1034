"""Both kernel backends must agree; the numba path is optional."""

import os
import subprocess
import sys

import numpy as np
import pytest

from levikit import _accel
from levikit.parametrix import phi1_batch, z_batch

needs_numba = pytest.mark.skipif(not _accel.numba_impl, reason="numba unavailable")


@needs_numba
def test_phi1_backends_agree(mild_field, rng):
    x = rng.uniform(-3, 3, (500, 1))
    xi = rng.uniform(-3, 3, (500, 1))
    tau = rng.uniform(0, 1, 500)
    t = tau + rng.uniform(1e-4, 2, 500)
    a = phi1_batch(mild_field, x, t, xi, tau, impl=_accel.numpy_impl)
    b = phi1_batch(mild_field, x, t, xi, tau, impl=_accel.numba_impl)
    for u, v in zip(a, b):
        np.testing.assert_allclose(u, v, rtol=1e-12, atol=0)


@needs_numba
def test_grid_scatter_and_gather_backends_agree(rng):
    grid = (np.log(1e-3), 0.37, 12, -4.0, 0.5, 17)
    values = rng.standard_normal(12 * 17)
    logr = rng.uniform(np.log(1e-3) - 0.5, np.log(1e-3) + 0.37 * 12, 300)
    y = rng.uniform(-5, 5, (300, 1))
    g1 = _accel.gather_values(values, logr, y, grid, impl=_accel.numpy_impl)
    g2 = _accel.gather_values(values, logr, y, grid, impl=_accel.numba_impl)
    np.testing.assert_allclose(g1, g2, rtol=1e-13, atol=1e-15)
    rows = rng.integers(0, 5, 300)
    w = rng.standard_normal(300)
    o1 = np.zeros((5, 12 * 17))
    o2 = np.zeros((5, 12 * 17))
    _accel.scatter_rows(o1, rows, w, logr, y, grid, impl=_accel.numpy_impl)
    _accel.scatter_rows(o2, rows, w, logr, y, grid, impl=_accel.numba_impl)
    np.testing.assert_allclose(o1, o2, rtol=1e-12, atol=1e-14)


def test_gather_is_adjoint_of_scatter(rng):
    grid = (0.0, 0.25, 8, -2.0, 0.4, 11)
    values = rng.standard_normal(8 * 11)
    logr = rng.uniform(0.2, 1.6, 50)
    y = rng.uniform(-1.5, 1.5, (50, 1))
    w = rng.standard_normal(50)
    out = np.zeros((1, 8 * 11))
    _accel.scatter_rows(out, np.zeros(50, dtype=np.int64), w, logr, y, grid)
    lhs = float(out[0] @ values)
    rhs = float(w @ _accel.gather_values(values, logr, y, grid))
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_env_flag_selects_numpy():
    code = "from levikit import _accel; print(_accel.BACKEND)"
    env = dict(os.environ, LEVIKIT_NO_NUMBA="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True)
    assert out.stdout.strip() == "numpy"


def test_z_kernel_backends_agree(heat_field, rng):
    x = rng.standard_normal((100, 1))
    t = rng.uniform(0.1, 1, 100)
    ref = z_batch(heat_field, x, t, np.zeros(1), 0.0)
    assert np.all(ref > 0)
