import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from levikit.coeffs import CoefficientField
from levikit.kernels import gauss_kernel
from levikit.parametrix import (
    KernelQuery,
    check_lemma_pa1,
    constant_C,
    parametrix_Z,
    phi1,
    phi1_batch,
    phi1_envelope,
    psi,
    z_batch,
    z_lower_envelope,
    z_upper_envelope,
)


def _queries(rng, n, count, dt_max=1.0, spread=3.0, xi_box=3.0):
    xi = rng.uniform(-xi_box, xi_box, (count, n))
    tau = rng.uniform(0, 2, count)
    dt = dt_max * (1 - rng.random(count))
    x = xi + rng.standard_normal((count, n)) * spread * np.sqrt(dt)[:, None]
    return x, tau + dt, xi, tau, dt


def test_kernel_query_validation():
    with pytest.raises(ValueError):
        KernelQuery([0.0], 1.0, [0.0], 1.0)
    with pytest.raises(ValueError):
        KernelQuery([0.0, 1.0], 1.0, [0.0], 0.0)
    q = KernelQuery([3.0], 4.0, [1.0], 0.0)
    assert q.rho == pytest.approx(1.0) and q.dt == 4.0
    assert KernelQuery([1.0], 4.0, [1.0], 0.0).rho == 0.0


def test_constant_identity_field_gives_heat_kernel(heat_field, rng):
    x, t, xi, tau, dt = _queries(rng, 1, 200)
    np.testing.assert_allclose(z_batch(heat_field, x, t, xi, tau), gauss_kernel(x - xi, dt),
                               rtol=1e-12)
    assert parametrix_Z(heat_field, KernelQuery([1.0], 1.0, [0.0], 0.0)) == pytest.approx(
        0.2196956, abs=1e-7)


def test_psi_vanishes_and_potential_survives(rng):
    f0 = CoefficientField.constant(np.diag([1.0, 2.0]))
    fq = CoefficientField.constant(np.diag([1.0, 2.0]), q0=0.7)
    x, t, xi, tau, _ = _queries(rng, 2, 100)
    ps, z = phi1_batch(f0, x, t, xi, tau)
    assert np.all(ps == 0)
    ps, z = phi1_batch(fq, x, t, xi, tau)
    np.testing.assert_allclose(ps, 0.7, rtol=1e-13)
    np.testing.assert_allclose(ps * z, 0.7 * z_batch(fq, x, t, xi, tau), rtol=1e-13)
    assert psi(fq, KernelQuery([0.1, 0.2], 1.0, [0.0, 0.0], 0.0)) == pytest.approx(0.7)


def test_psi_holder_estimate(mild_field, rng):
    f = mild_field
    x, t, xi, tau, dt = _queries(rng, 1, 1000)
    ps, _ = phi1_batch(f, x, t, xi, tau)
    rho2 = np.sum((x - xi) ** 2, axis=1) / dt
    bound = f.N1 * (1 / (2 * f.kappa) + rho2 / (4 * f.kappa ** 2)) * (1 + rho2) ** (f.alpha / 2) \
        * dt ** (f.alpha / 2 - 1)
    assert np.all(np.abs(ps) <= bound)


def test_phi1_envelope_mild_field(mild_field, rng):
    C = constant_C(mild_field)
    x, t, xi, tau, dt = _queries(rng, 1, 10000)
    ps, z = phi1_batch(mild_field, x, t, xi, tau)
    rho = np.abs(x - xi)[:, 0] / np.sqrt(dt)
    assert np.all(np.abs(ps * z) <= phi1_envelope(mild_field, C, dt, rho))
    q = KernelQuery(x[0], t[0], xi[0], tau[0])
    assert phi1(mild_field, q) == pytest.approx(float(ps[0] * z[0]), rel=1e-14)


def _bracket_oracle(kappa, N1, N2, alpha, M, n, step=1e-4, lam_hi=40.0):
    # independent dense scan of the envelope multiplier, then golden-section polish
    c = 1 / (8 * M)

    def g(lam):
        return (N1 * (1 / (2 * kappa) + lam ** 2 / (4 * kappa ** 2)) * (1 + lam ** 2) ** (alpha / 2)
                + N2 * (lam / kappa + 1)) * np.exp(-c * lam ** 2)

    lam = np.arange(0, lam_hi + step, step)
    i = int(np.argmax(g(lam)))
    a, b = max(0.0, lam[i] - step), lam[i] + step
    phi = (math.sqrt(5) - 1) / 2
    for _ in range(100):
        c1, c2 = b - phi * (b - a), a + phi * (b - a)
        if g(c1) > g(c2):
            b = c2
        else:
            a = c1
    return (4 * kappa * math.pi) ** (-n / 2) * max(float(g(lam[i])), float(g((a + b) / 2)))


@pytest.mark.parametrize("N1, N2, kappa, M, alpha, n", [
    (1.0, 0.0, 1.0, 1.0, 1.0, 1),
    (0.6621, 0.0, 1.5, 2.5, 1.0, 1),
    (2.0, 0.3, 0.9, 2.6, 1.0, 2),
    (0.5, 1.0, 1.0, 3.0, 0.5, 1),
])
def test_constant_C_against_dense_scan(N1, N2, kappa, M, alpha, n):
    f = CoefficientField.constant(np.eye(n), kappa=kappa, M=M, N1=N1, N2=N2, alpha=alpha)
    assert constant_C(f) == pytest.approx(_bracket_oracle(kappa, N1, N2, alpha, M, n), rel=1e-10)


def test_constant_C_frozen_values():
    # frozen from the dense-scan oracle above
    f = CoefficientField.constant(np.eye(1), N1=1.0)
    assert constant_C(f) == pytest.approx(_bracket_oracle(1, 1, 0, 1, 1, 1), rel=1e-12)
    assert constant_C(CoefficientField.constant(np.eye(1))) == 0.0


@given(st.floats(0.01, 5.0), st.floats(0.5, 2.0), st.floats(1.0, 4.0))
def test_constant_C_linear_in_N1(N1, kappa, ratio):
    f = CoefficientField.constant(np.eye(1), kappa=kappa, M=kappa * ratio, N1=N1)
    g = f.with_constants(N1=2 * N1)
    assert constant_C(g) == pytest.approx(2 * constant_C(f), rel=1e-9)


def test_inverse_bounds_extremal_cases():
    rep = check_lemma_pa1(CoefficientField.constant(np.eye(2)), 100)
    assert rep.inverse_ratio == pytest.approx(1.0, abs=1e-15)
    assert rep.form_ratio == pytest.approx(1.0, abs=1e-15)
    assert rep.entry_ratio == pytest.approx(1.0, abs=1e-15)
    rep = check_lemma_pa1(CoefficientField.constant(np.diag([0.5, 3.0])), 100)
    assert rep.inverse_ratio == pytest.approx(1.0, abs=1e-14) and rep.passed


def test_inverse_bounds_random_fields(mild_field):
    f2 = CoefficientField.from_expressions(
        2, {(1, 1): "1.5 + 0.3*sin(x1)*cos(t)", (2, 2): "2 + 0.3*cos(x2)", (1, 2): "0.2*sin(x1 + x2)"},
        kappa=0.9, M=2.6, N1=2.0, N2=0.0, alpha=1.0)
    assert check_lemma_pa1(mild_field, 2000).passed
    assert check_lemma_pa1(f2, 2000).passed
    bad = f2.with_constants(kappa=1.3)
    assert not check_lemma_pa1(bad, 2000).passed


@pytest.mark.parametrize("n", [1, 2])
def test_z_sandwich(n, rng):
    expr = {(1, 1): "2 + 0.5*sin(x1)*cos(t)"} if n == 1 else \
        {(1, 1): "1.5 + 0.3*sin(x1)*cos(t)", (2, 2): "2 + 0.3*cos(x2)", (1, 2): "0.2*sin(x1 + x2)"}
    f = CoefficientField.from_expressions(n, expr, kappa=1.5 if n == 1 else 0.9,
                                          M=2.5 if n == 1 else 2.6, N1=2.0, N2=0.0, alpha=1.0)
    x, t, xi, tau, dt = _queries(rng, n, 2000, dt_max=5.0)
    z = z_batch(f, x, t, xi, tau)
    rho = np.linalg.norm(x - xi, axis=1) / np.sqrt(dt)
    assert np.all(z_lower_envelope(f, dt, rho) <= z)
    assert np.all(z <= z_upper_envelope(f, dt, rho))


def _fd_operator(field, fn, x, t, h=1e-4, k=1e-5, frozen_at=None):
    """Second-order central differences of ``fn(x, t)`` under L or its frozen version."""
    n = field.n
    coef_x, coef_t = (x, t) if frozen_at is None else frozen_at
    a = field.eval_a(coef_x, coef_t)
    b = field.eval_b(coef_x, coef_t) if frozen_at is None else np.zeros(n)
    q = float(field.eval_q(coef_x, coef_t)) if frozen_at is None else 0.0
    out = q * fn(x, t) - (fn(x, t + k) - fn(x, t - k)) / (2 * k)
    for i in range(n):
        ei = np.zeros(n)
        ei[i] = h
        out += b[i] * (fn(x + ei, t) - fn(x - ei, t)) / (2 * h)
        for j in range(n):
            ej = np.zeros(n)
            ej[j] = h
            d2 = (fn(x + ei + ej, t) - fn(x + ei - ej, t) - fn(x - ei + ej, t)
                  + fn(x - ei - ej, t)) / (4 * h * h)
            out += a[i, j] * d2
    return out


def test_frozen_identity_by_finite_differences(rng):
    f = CoefficientField.from_expressions(
        2, {(1, 1): "1.5 + 0.3*sin(x1)*cos(t)", (2, 2): "2 + 0.3*cos(x2)", (1, 2): "0.2*sin(x1 + x2)"},
        kappa=0.9, M=2.6, N1=2.0, N2=0.0, alpha=1.0)
    for _ in range(20):
        xi, tau = rng.standard_normal(2), 0.3
        x, t = xi + rng.standard_normal(2) * 0.5, tau + rng.uniform(0.2, 1.0)

        def Z(xx, tt):
            return float(z_batch(f, xx, tt, xi, tau))

        r = _fd_operator(f, Z, x, t, h=1e-3, k=1e-5, frozen_at=(xi, tau))
        assert abs(r) <= 1e-5 * Z(x, t) / (t - tau)


def test_full_operator_reproduces_psi_z(rng):
    f = CoefficientField.from_expressions(
        2, {(1, 1): "1.5 + 0.3*sin(x1)*cos(t)", (2, 2): "2 + 0.3*cos(x2)", (1, 2): "0.2*sin(x1 + x2)"},
        b={1: "0.2*cos(x2)", 2: "0.1*sin(t)"}, q="0.1*cos(x1)",
        kappa=0.9, M=2.6, N1=2.0, N2=0.6, alpha=1.0)
    for _ in range(20):
        xi, tau = rng.standard_normal(2), 0.1
        x, t = xi + rng.standard_normal(2) * 0.6, tau + rng.uniform(0.3, 1.0)

        def Z(xx, tt):
            return float(z_batch(f, xx, tt, xi, tau))

        fd = _fd_operator(f, Z, x, t, h=1e-3, k=1e-5)
        ps, z = phi1_batch(f, x, t, xi, tau)
        scale = max(abs(float(ps * z)), z / (t - tau))
        assert abs(fd - float(ps * z)) <= 1e-4 * scale
