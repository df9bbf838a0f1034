import math
import warnings

import mpmath
import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import integrate

from levikit.coeffs import CoefficientField
from levikit.kernels import gauss_kernel
from levikit.levi import (
    DegenerateIntervalWarning,
    GridKernel,
    LeviExpansion,
    QuadratureScheme,
    beta_convolution_reference,
    beta_integrand_pieces,
    convolution_nodes,
    fundamental_solution,
    levi_iterates,
    log_series_majorant,
    phi_series,
    reproducing_check,
    series_constants,
    series_majorant_S,
    spacetime_convolve,
    tail_envelope,
    iterate_envelope,
    time_rule,
)
from levikit.oracle import exact_constant_kernel
from levikit.parametrix import KernelQuery, constant_C, z_batch

from conftest import make_mild_field

QUAD = QuadratureScheme()


# -- quadrature rule ---------------------------------------------------------
@given(st.integers(2, 40), st.floats(1.0, 8.0))
def test_time_rule_positive_and_interior(nodes, p):
    u, um, w = time_rule(nodes, p)
    assert np.all(w > 0)
    # both gaps to the interval ends stay positive, even where u rounds to 1
    assert np.all((u > 0) & (um > 0))
    np.testing.assert_allclose(u + um, 1.0, rtol=0, atol=1e-15)


@given(st.integers(8, 24), st.floats(1.5, 8.0))
def test_time_rule_converges_under_doubling(nodes, p):
    err = [abs(time_rule(m, p)[2].sum() - 1) for m in (nodes, 2 * nodes)]
    assert err[1] < err[0] or err[1] < 1e-14


@pytest.mark.parametrize("beta, nodes, tol", [(0.5, 16, 1e-5), (0.5, 32, 1e-10),
                                               (0.25, 16, 2e-3), (0.25, 64, 1e-10)])
def test_graded_rule_handles_endpoint_singularity(beta, nodes, tol):
    u, um, w = time_rule(nodes, 2 / beta)
    approx = float(np.sum(w * u ** (beta - 1) * um ** (beta - 1)))
    assert approx == pytest.approx(math.gamma(beta) ** 2 / math.gamma(2 * beta), rel=tol)


def test_convolution_nodes_layout():
    x = np.array([[0.3, -0.2]])
    zeta, s, after, before, w = convolution_nodes(x, np.array([1.5]), x[0], 0.5, QUAD, 1.0)
    assert np.all((s > 0.5) & (s < 1.5))
    np.testing.assert_allclose(after + before, 1.0, rtol=1e-15)
    assert np.all(w > 0)
    # x == xi: every slice is symmetric about the segment midpoint
    centred = zeta[0] - x[0]
    np.testing.assert_allclose(np.sort(centred[..., 0], axis=1),
                               np.sort(-centred[..., 0], axis=1), atol=1e-12)


# -- closed form of the Gaussian power convolution ---------------------------
def _convolution_oracle(lam, gamma, delta, r):
    """1-D double integral with scipy: endpoint weights through quad's algebraic weight."""

    def inner(s):
        # z = r s + w sqrt(s (1 - s)) absorbs the (s (1 - s))^(-1/2) prefactor
        s = min(max(s, 1e-15), 1 - 1e-15)
        root = math.sqrt(s * (1 - s))

        def integrand(w):
            z = r * s + w * root
            return math.exp(-lam * (r - z) ** 2 / (1 - s) - lam * z * z / s)
        val, _ = integrate.quad(integrand, -np.inf, np.inf, epsabs=0, epsrel=1e-10, limit=200)
        return val

    val, _ = integrate.quad(inner, 0, 1, weight="alg", wvar=(-delta, -gamma), epsabs=0,
                            epsrel=1e-11, limit=200)
    return val


@pytest.mark.parametrize("lam, gamma, delta, r", [
    (1.0, 0.0, 0.0, 0.0),
    (1.0, 0.5, 0.5, 0.0),
    (1.0, 0.5, 0.5, 1.0),
    (0.125, 0.25, 0.0, 1.0),
    (2.0, 0.0, 0.5, 0.7),
])
def test_closed_form_matches_independent_quadrature(lam, gamma, delta, r):
    qy = KernelQuery([r], 1.0, [0.0], 0.0)
    ref = beta_convolution_reference(lam, gamma, delta, qy)
    assert ref == pytest.approx(_convolution_oracle(lam, gamma, delta, r), rel=1e-8)


def test_closed_form_frozen_values():
    qy = KernelQuery([0.0], 1.0, [0.0], 0.0)
    # sqrt(pi) B(1, 1) and sqrt(pi) B(1/2, 1/2) = pi^(3/2), cross-checked by the quadrature oracle
    assert beta_convolution_reference(1, 0, 0, qy) == pytest.approx(1.7724538509055159, rel=1e-14)
    assert beta_convolution_reference(1, 0.5, 0.5, qy) == pytest.approx(5.568327996831708, rel=1e-14)
    # the (4 pi / lam) normalisation carried by the bound constants is 2^n larger
    assert beta_convolution_reference(1, 0, 0, qy, printed=True) == pytest.approx(3.5449077, rel=1e-7)
    assert beta_convolution_reference(1, 0.5, 0.5, qy, printed=True) == pytest.approx(11.1366, rel=1e-5)


def test_convolve_zero_kernel():
    f, _ = beta_integrand_pieces(1.0, 0.0, 0.0, 1)
    qy = KernelQuery([0.2], 1.0, [0.0], 0.0)
    assert spacetime_convolve(f, lambda z, s: np.zeros(np.shape(s)), qy, QUAD) == 0.0


@pytest.mark.parametrize("lam, gamma, delta, n, r", [
    (1.0, 0.0, 0.0, 1, 0.0),
    (1.0, 0.5, 0.5, 1, 1.0),
    (0.125, 0.25, 0.5, 2, 1.0),
    (2.0, 0.5, 0.0, 2, 0.5),
])
def test_convolution_quadrature_reproduces_closed_form(lam, gamma, delta, n, r):
    x = np.zeros(n)
    x[0] = r
    qy = KernelQuery(x, 1.0, np.zeros(n), 0.0)
    f, gfac = beta_integrand_pieces(lam, gamma, delta, n)
    ref = beta_convolution_reference(lam, gamma, delta, qy)
    errs = [abs(spacetime_convolve(f, gfac(qy.xi, qy.tau), qy, q, spread=1 / (4 * lam)) / ref - 1)
            for q in (QUAD, QUAD.refined())]
    assert errs[0] <= 1e-3
    assert errs[1] < errs[0]


# -- grid kernels -------------------------------------------------------------
def test_grid_kernel_interpolates_nodes_and_round_trips(tmp_path, mild_field):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        exp = LeviExpansion(mild_field, [0.4], 0.0, 0.5, QUAD)
    g = exp.iterates()[1]
    eta, sigma = g.node_points()
    vals = g(eta, sigma[:, None])
    np.testing.assert_allclose(vals, g.node_values(), rtol=1e-10, atol=1e-12 * np.abs(vals).max())
    path = tmp_path / "phi2.csv"
    g.to_csv(path)
    back = GridKernel.from_csv(path)
    np.testing.assert_array_equal(back.values, g.values)
    probe_eta = np.array([[0.1], [0.5], [1.0]])
    np.testing.assert_array_equal(back(probe_eta, 0.3), g(probe_eta, 0.3))


# -- iterates -----------------------------------------------------------------
def test_constant_coefficients_have_no_iterates(heat_field):
    its = levi_iterates(heat_field, (np.zeros(1), 0.0), 1.0, QUAD, ell_max=4)
    assert all(not np.any(g.values) for g in its)
    exp = LeviExpansion(heat_field, [0.0], 0.0, 1.0, QUAD)
    res = phi_series(heat_field, KernelQuery([0.3], 0.5, [0.0], 0.0), expansion=exp)
    assert (res.value, res.tail_bound, res.terms_used) == (0.0, 0.0, 1)


def _dense_phi2_oracle(q0, x, t):
    # direct 2-D quadrature of q0 Z * q0 Z for a = 1 with scipy
    def inner(s):
        val, _ = integrate.quad(lambda z: gauss_kernel(np.array([x - z]), t - s)
                                * gauss_kernel(np.array([z]), s), -np.inf, np.inf,
                                epsabs=0, epsrel=1e-12)
        return val

    val, _ = integrate.quad(inner, 0, t, epsabs=0, epsrel=1e-10)
    return q0 * q0 * val


def test_second_iterate_with_constant_potential():
    q0 = 0.3
    f = CoefficientField.constant([[1.0]], q0=q0)
    with pytest.warns(RuntimeWarning, match="not converged"):
        exp = LeviExpansion(f, [0.0], 0.0, 1.0, QUAD, tol=1e-12, ell_max=4)
    for x, t in [(0.0, 0.5), (0.7, 1.0), (1.5, 0.8)]:
        got = float(exp.iterate_at(2, np.array([[x]]), t)[0])
        oracle = _dense_phi2_oracle(q0, x, t)
        assert oracle == pytest.approx(q0 ** 2 * t * gauss_kernel(np.array([x]), t), rel=1e-8)
        assert got == pytest.approx(oracle, rel=1e-3)


def test_potential_kernel_matches_exponential_factor():
    q0 = 0.3
    f = CoefficientField.constant([[1.0]], q0=q0)
    for x in (0.0, 0.5, 1.2):
        qy = KernelQuery([x], 0.5, [0.0], 0.0)
        E = fundamental_solution(f, qy, QUAD)
        assert E == pytest.approx(exact_constant_kernel(np.eye(1), None, q0, qy), rel=1e-2)


def test_constant_coefficients_E_is_heat_kernel(heat_field, rng):
    x = rng.standard_normal((200, 1)) * 2
    t = rng.uniform(1e-3, 2, 200)
    exp = LeviExpansion(heat_field, [0.0], 0.0, 2.0, QUAD)
    np.testing.assert_allclose(exp.E(x, t), gauss_kernel(x, t), rtol=1e-10)


@pytest.fixture(scope="module")
def mild_expansion():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return LeviExpansion(make_mild_field(), [0.4], 0.0, 1.0, QUAD, tol=1e-6, ell_max=12)


def test_iterate_envelopes_at_grid_nodes(mild_expansion):
    f = mild_expansion.field
    sc = series_constants(f)
    for ell, g in enumerate(mild_expansion.iterates(), start=1):
        eta, sigma = g.node_points()
        r = sigma - g.tau
        rho = np.abs(eta[..., 0] - g.xi[0]) / np.sqrt(r)[:, None]
        vals = np.abs(g.node_values())
        keep = r <= 1
        if ell == 1:
            env = sc.C * r[:, None] ** (-f.n / 2 - 1 + sc.beta) * np.exp(-sc.c * rho ** 2)
        else:
            env = iterate_envelope(sc, f.n, ell, r[:, None], rho)
        assert np.all(vals[keep] <= env[keep])


def test_phi_envelope_and_tail_honesty(mild_expansion, rng):
    f = mild_expansion.field
    k = series_constants(f)
    dt = 1 - rng.random(100)
    x = 0.4 + rng.standard_normal((100, 1)) * 2 * np.sqrt(dt)[:, None]
    t = dt
    rho = np.abs(x[:, 0] - 0.4) / np.sqrt(dt)
    phi = mild_expansion.phi_at(x, t)
    assert np.all(np.abs(phi) <= k.S * dt ** (-f.n / 2 - 1 + k.beta) * np.exp(-k.c * rho ** 2))
    L = 3
    nxt = mild_expansion.iterate_at(L + 1, x, t)
    tail = tail_envelope(k, f.n, L + 1, dt, rho)
    assert np.all(np.abs(nxt) <= tail)


def test_resolvent_agrees_with_iteration(mild_expansion):
    direct = mild_expansion.resolvent_kernel().values
    summed = mild_expansion.phi_scaled
    assert np.abs(direct - summed).max() <= 1e-5 * np.abs(summed).max()


def test_positivity_and_degenerate_interval(mild_expansion, rng):
    x = 0.4 + rng.uniform(-3, 3, (300, 1))
    t = rng.uniform(1e-6, 1, 300)
    assert np.all(mild_expansion.E(x, t) > 0)
    with pytest.warns(DegenerateIntervalWarning):
        v = mild_expansion.E(np.array([[0.4]]), 1e-12)
    assert float(v[0]) == pytest.approx(float(z_batch(mild_expansion.field, [0.4], 1e-12, [0.4], 0.0)))


def test_mass_over_source_points(mild_field):
    # with b = q = 0 the adjoint annihilates constants, so E integrates to one over xi
    x, t, tau = np.array([0.4]), 0.25, 0.0
    half = 6 * math.sqrt(2 * mild_field.M * t)
    h = 0.15
    xis = np.arange(x[0] - half, x[0] + half + h / 2, h)
    vals = [LeviExpansion(mild_field, [xi], tau, t, QUAD).E(x[None, :], t)[0] for xi in xis]
    assert h * float(np.sum(vals)) == pytest.approx(1.0, abs=2e-3)


# -- series majorant ----------------------------------------------------------
def test_S_zero_without_iterates(heat_field):
    assert series_majorant_S(heat_field) == 0.0


def test_S_against_extended_precision_sum():
    f = CoefficientField.constant([[1.0]], N1=1.0)
    sc = series_constants(f)
    mpmath.mp.dps = 40
    C = mpmath.mpf(constant_C(f, decay=1 / 8))
    lam = C * mpmath.mpf(sc.Ctilde) * mpmath.gamma(mpmath.mpf(1) / 2)
    tail = mpmath.fsum(lam ** ell / mpmath.gamma(ell * mpmath.mpf(1) / 2) for ell in range(2, 10002))
    S = C + tail / mpmath.mpf(sc.Ctilde)
    assert sc.log_S == pytest.approx(float(mpmath.log(S)), rel=1e-13)


@given(st.data(), st.sampled_from([0.25, 0.5]))
def test_log_majorant_matches_direct_sum(data, beta):
    log_lam = data.draw(st.floats(-3.0, 3.0 if beta == 0.5 else 2.0))
    # the terms peak near l = Lambda^(1/beta) / beta; sum well past it
    last = int(3 * math.exp(log_lam / beta) / beta) + 2000
    terms = [ell * log_lam - math.lgamma(ell * beta) for ell in range(2, last)]
    ref = float(np.logaddexp.reduce(terms))
    assert log_series_majorant(log_lam, beta) == pytest.approx(ref, rel=1e-12, abs=1e-12)


def test_S_monotone_in_N1():
    logs = [series_constants(CoefficientField.constant([[1.0]], N1=v)).log_S
            for v in (0.1, 0.3, 1.0, 2.0)]
    assert logs == sorted(logs)


# -- reproducing property -----------------------------------------------------
def test_reproducing_constant_coefficients(heat_field):
    qy = KernelQuery([0.3], 1.0, [0.0], 0.0)
    assert reproducing_check(heat_field, qy, 0.5, QUAD).rel_residual <= 1e-6


def test_reproducing_potential_composes_exponentials():
    f = CoefficientField.constant([[1.0]], q0=0.4)
    qy = KernelQuery([0.3], 1.0, [0.0], 0.0)
    res = reproducing_check(f, qy, 0.5, QUAD)
    assert res.rel_residual <= 1e-3
    assert res.rhs == pytest.approx(exact_constant_kernel(np.eye(1), None, 0.4, qy), rel=1e-3)


@pytest.mark.parametrize("log_lam, beta", [(7.5, 0.5), (12.0, 0.5), (6.0, 0.25), (20.0, 0.5)])
def test_majorant_far_regime_tracks_exponential_growth(log_lam, beta):
    # sum_l z^l / Gamma(l beta) grows like exp(z^(1/beta)) for large z
    v = log_series_majorant(log_lam, beta)
    lead = math.exp(log_lam / beta)
    assert lead <= v <= lead * (1 + 1e-5)
    assert log_series_majorant(log_lam + 1e-3, beta) > v


def test_majorant_unreachable_peak_is_vacuous():
    assert log_series_majorant(3.0, 0.05) == math.inf
