import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from levikit.coeffs import (
    CoefficientField,
    SingularMatrixError,
    SpdMatrix,
    batch_inverse,
    estimate_holder_seminorm,
    invert_spd,
    validate_assumptions,
)

from conftest import make_mild_field, random_spd


def test_invert_identity_and_scalar():
    np.testing.assert_array_equal(invert_spd(SpdMatrix(np.eye(2))).entries, np.eye(2))
    assert invert_spd(SpdMatrix([[4.0]])).entries[0, 0] == 0.25


def test_inverse_entries_bounded_by_reciprocal_kappa(rng):
    for _ in range(200):
        a = random_spd(rng, 3, 0.5, 2.0)
        inv = invert_spd(SpdMatrix(a)).entries
        assert np.abs(inv).max() <= 2.0 * (1 + 1e-12)


def test_rejects_asymmetric_and_indefinite():
    with pytest.raises(ValueError):
        SpdMatrix([[1.0, 0.5], [0.0, 1.0]])
    with pytest.raises(ValueError):
        SpdMatrix([[1.0, 2.0], [2.0, 1.0]])


def test_ill_conditioned_matrix_refused():
    with pytest.raises(SingularMatrixError):
        invert_spd(SpdMatrix(np.diag([1.0, 1e-13])))


@given(st.integers(1, 4), st.integers(0, 2 ** 32 - 1))
def test_double_inverse_round_trip(n, seed):
    a = random_spd(np.random.default_rng(seed), n, 0.1, 10.0)
    back = invert_spd(invert_spd(SpdMatrix(a))).entries
    assert np.abs(back - a).max() <= 1e-12 * np.abs(a).max()


@given(st.integers(1, 3), st.integers(0, 2 ** 32 - 1))
def test_batch_inverse_matches_eigendecomposition(n, seed):
    rng = np.random.default_rng(seed)
    mats = np.stack([random_spd(rng, n, 0.3, 3.0) for _ in range(8)])
    inv, det = batch_inverse(mats)
    w, v = np.linalg.eigh(mats)
    ref = np.einsum("pij,pj,pkj->pik", v, 1 / w, v)
    np.testing.assert_allclose(inv, ref, rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(det, np.prod(w, axis=1), rtol=1e-12)


@given(st.integers(1, 3), st.integers(0, 2 ** 32 - 1), st.floats(0.2, 1.0), st.floats(1.0, 5.0))
def test_quadratic_form_lower_bound(n, seed, kappa, M):
    # <a^-1 y, y> / 4dt >= |y|^2 / 4M dt for spectrum inside [kappa, M]
    rng = np.random.default_rng(seed)
    a = random_spd(rng, n, kappa, M)
    inv = invert_spd(SpdMatrix(a))
    for _ in range(50):
        y = rng.standard_normal(n) * 3
        dt = rng.uniform(1e-3, 5)
        assert inv.quadratic_form(y) / (4 * dt) >= (y @ y) / (4 * M * dt) * (1 - 1e-12)


# -- Hoelder seminorm ------------------------------------------------------
def test_constant_field_has_zero_seminorm():
    f = CoefficientField.constant(np.diag([1.0, 3.0]))
    assert estimate_holder_seminorm(f, 500) == 0.0


def _dense_grid_lipschitz(fn, lo=-2 * math.pi, hi=2 * math.pi, m=200001):
    # independent oracle: max |f'| on a dense grid, which is the alpha = 1 seminorm
    x = np.linspace(lo, hi, m)
    return float(np.abs(np.diff(fn(x)) / np.diff(x)).max())


def test_sine_perturbation_seminorm():
    f = CoefficientField.from_expressions(1, {(1, 1): "1 + 0.1*sin(x1)"}, kappa=0.9, M=1.1,
                                          N1=1.0, N2=0.0, alpha=1.0)
    oracle = _dense_grid_lipschitz(lambda x: 1 + 0.1 * np.sin(x))
    assert oracle == pytest.approx(0.1, rel=1e-8)
    coarse = estimate_holder_seminorm(f, 200)
    fine = estimate_holder_seminorm(f, 4000)
    assert coarse <= fine <= 0.1 * (1 + 1e-9)
    assert fine >= 0.099


def test_root_singularity_seminorm_approaches_one():
    f = CoefficientField.from_expressions(1, {(1, 1): "1 + sqrt(abs(x1))"}, kappa=1.0, M=3.0,
                                          N1=10.0, N2=0.0, alpha=0.5, region=(-1, 1, 0, 1))
    est = estimate_holder_seminorm(f, 4000)
    assert 0.9 <= est <= 1.0 + 1e-9


def _mild_seminorm_oracle():
    # sup over offsets (dx, dt) and base points of |a(x+dx, t+dt) - a(x, t)| / sqrt(dx^2 + |dt|),
    # brute force on a grid followed by a local polish
    from scipy import optimize

    def a(x, t):
        return 2 + 0.5 * np.sin(x) * np.cos(t)

    base = np.linspace(0, 2 * math.pi, 64, endpoint=False)
    X, T = np.meshgrid(base, base, indexing="ij")
    best, arg = 0.0, None
    for dt in np.linspace(0, 2 * math.pi, 97)[1:]:
        for dx in np.linspace(-2 * math.pi, 2 * math.pi, 129):
            q = np.abs(a(X + dx, T + dt) - a(X, T)).max() / math.sqrt(dx * dx + dt)
            if q > best:
                i = np.unravel_index(np.argmax(np.abs(a(X + dx, T + dt) - a(X, T))), X.shape)
                best, arg = q, (X[i], T[i], dx, dt)

    def neg(p):
        x, t, dx, dt = p
        return -abs(a(x + dx, t + abs(dt)) - a(x, t)) / math.sqrt(dx * dx + abs(dt))

    res = optimize.minimize(neg, arg, method="Nelder-Mead", options={"xatol": 1e-10, "fatol": 1e-14})
    return max(best, -res.fun)


def test_mild_field_declared_N1_covers_dense_estimate():
    oracle = _mild_seminorm_oracle()
    assert oracle == pytest.approx(0.6019, abs=1e-4)
    est = estimate_holder_seminorm(make_mild_field(), 4000)
    assert est <= oracle * (1 + 1e-9)
    assert make_mild_field().N1 == pytest.approx(1.1 * oracle, abs=1e-3)


# -- assumption validation -------------------------------------------------
def test_heat_field_passes(heat_field):
    assert validate_assumptions(heat_field).passed


def test_kappa_violation_reported_near_origin():
    f = CoefficientField.from_expressions(
        1, {(1, 1): "1 - 0.5*exp(-100*(x1^2 + t^2))"}, kappa=1.0, M=1.0, N1=100.0, N2=0.0,
        alpha=1.0, region=(-1, 1, 0, 1))
    rep = validate_assumptions(f, 4000)
    assert not rep["a2"].passed
    (wx,), wt = rep["a2"].witness
    assert abs(wx) < 0.3 and wt < 0.3


def test_mild_field_passes(mild_field):
    rep = validate_assumptions(mild_field, 3000)
    assert rep.passed, rep.as_dict()


def test_drift_bound_checked():
    f = CoefficientField.from_expressions(1, {(1, 1): "1"}, b={1: "0.5*cos(x1)"}, q="0.3",
                                          kappa=1.0, M=1.0, N1=0.0, N2=0.5, alpha=1.0)
    rep = validate_assumptions(f)
    assert not rep["a5"].passed
    assert rep["a5"].value == pytest.approx(0.8, rel=1e-3)


@pytest.mark.parametrize("kw, msg", [
    (dict(kappa=2.0, M=1.0), "M >= kappa"),
    (dict(kappa=0.0, M=1.0), "kappa"),
    (dict(kappa=1.0, M=1.0, alpha=1.5), "alpha"),
])
def test_constructor_rejects_bad_constants(kw, msg):
    base = dict(N1=0.0, N2=0.0, alpha=1.0)
    base.update(kw)
    with pytest.raises(ValueError, match=msg):
        CoefficientField.from_expressions(1, {(1, 1): "1"}, **base)


def test_expression_field_broadcasts():
    f = CoefficientField.from_expressions(
        2, {(1, 1): "2 + sin(x1)", (2, 2): "3", (1, 2): "0.1*x2"}, b={2: "t"},
        kappa=0.5, M=5, N1=1, N2=1, alpha=1)
    x = np.random.default_rng(0).standard_normal((4, 5, 2))
    a = f.eval_a(x, 0.5)
    assert a.shape == (4, 5, 2, 2)
    np.testing.assert_array_equal(a[..., 0, 1], a[..., 1, 0])
    np.testing.assert_allclose(f.eval_b(x, 0.5)[..., 1], 0.5)
    assert f.eval_q(x, 0.5).shape == (4, 5)
