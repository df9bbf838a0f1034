"""The frozen-coefficient parametrix ``Z``, the residual factor ``Psi`` and ``Phi_1 = L Z``.

``Z(x, t; xi, tau)`` is the generalised Gaussian built from the inverse of
``a(xi, tau)``. Applying the full operator to it leaves ``L Z = Psi Z`` with

    Psi = sum_ij (a_ij(x, t) - a_ij(xi, tau)) d_ij + sum_i d_i b_i(x, t) + q(x, t),
    d_i  = -(1 / 2(t - tau)) sum_j a^ij(xi, tau) (x_j - xi_j),
    d_ij = -a^ij(xi, tau) / (2 (t - tau)) + d_i d_j,

where ``a^ij`` are the entries of the inverse matrix.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import optimize

from . import _accel
from .coeffs import CoefficientField, batch_inverse

__all__ = [
    "KernelQuery",
    "parametrix_Z",
    "psi",
    "phi1",
    "phi1_batch",
    "z_batch",
    "constant_C",
    "phi1_envelope",
    "z_upper_envelope",
    "z_lower_envelope",
    "check_lemma_pa1",
    "InverseBoundsReport",
]


@dataclass(frozen=True)
class KernelQuery:
    """A point ``(x, t; xi, tau)`` with ``t > tau``."""

    x: np.ndarray
    t: float
    xi: np.ndarray
    tau: float

    def __post_init__(self):
        x = np.atleast_1d(np.asarray(self.x, dtype=float))
        xi = np.atleast_1d(np.asarray(self.xi, dtype=float))
        if x.shape != xi.shape or x.ndim != 1:
            raise ValueError("x and xi must be vectors of the same length")
        if not self.t > self.tau:
            raise ValueError(f"query needs t > tau, got t={self.t}, tau={self.tau}")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "xi", xi)
        object.__setattr__(self, "t", float(self.t))
        object.__setattr__(self, "tau", float(self.tau))

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def dt(self) -> float:
        return self.t - self.tau

    @property
    def rho(self) -> float:
        return float(np.linalg.norm(self.x - self.xi) / math.sqrt(self.dt))


def _source_terms(field: CoefficientField, xi, tau):
    a_s = field.eval_a(xi, tau)
    ainv, det = batch_inverse(a_s)
    return a_s, ainv, 1.0 / det


def phi1_batch(field: CoefficientField, x, t, xi, tau, impl=None):
    """``(Psi, Z)`` at arrays of targets ``(x, t)`` and sources ``(xi, tau)``.

    ``x, xi`` have shape ``(..., n)``; times broadcast against ``x.shape[:-1]``.
    """
    n = field.n
    x = np.asarray(x, dtype=float)
    xi = np.asarray(xi, dtype=float)
    shape = np.broadcast_shapes(x.shape[:-1], xi.shape[:-1], np.shape(t), np.shape(tau))
    x = np.broadcast_to(x, shape + (n,))
    xi = np.broadcast_to(xi, shape + (n,))
    t = np.broadcast_to(np.asarray(t, float), shape)
    tau = np.broadcast_to(np.asarray(tau, float), shape)
    dt = t - tau
    if np.any(dt <= 0):
        raise ValueError("every query needs t > tau")
    a_s, ainv, det_inv = _source_terms(field, xi, tau)
    a_t = field.eval_a(x, t)
    b_t = field.eval_b(x, t)
    q_t = field.eval_q(x, t)
    p = int(np.prod(shape)) if shape else 1
    ps, z = _accel.phi1_kernel((x - xi).reshape(p, n), dt.reshape(p), a_t.reshape(p, n, n),
                               b_t.reshape(p, n), q_t.reshape(p), a_s.reshape(p, n, n),
                               ainv.reshape(p, n, n), det_inv.reshape(p), impl=impl)
    return ps.reshape(shape), z.reshape(shape)


def z_batch(field: CoefficientField, x, t, xi, tau):
    n = field.n
    x = np.asarray(x, dtype=float)
    xi = np.asarray(xi, dtype=float)
    shape = np.broadcast_shapes(x.shape[:-1], xi.shape[:-1], np.shape(t), np.shape(tau))
    x = np.broadcast_to(x, shape + (n,))
    xi = np.broadcast_to(xi, shape + (n,))
    dt = np.broadcast_to(np.asarray(t, float) - np.asarray(tau, float), shape)
    if np.any(dt <= 0):
        raise ValueError("every query needs t > tau")
    _, ainv, det_inv = _source_terms(field, xi, np.broadcast_to(np.asarray(tau, float), shape))
    p = int(np.prod(shape)) if shape else 1
    z = _accel.z_kernel((x - xi).reshape(p, n), dt.reshape(p), ainv.reshape(p, n, n),
                        det_inv.reshape(p))
    return z.reshape(shape)


def parametrix_Z(field: CoefficientField, qy: KernelQuery) -> float:
    return float(z_batch(field, qy.x, qy.t, qy.xi, qy.tau))


def psi(field: CoefficientField, qy: KernelQuery) -> float:
    return float(phi1_batch(field, qy.x, qy.t, qy.xi, qy.tau)[0])


def phi1(field: CoefficientField, qy: KernelQuery) -> float:
    ps, z = phi1_batch(field, qy.x, qy.t, qy.xi, qy.tau)
    return float(ps * z)


def z_upper_envelope(field: CoefficientField, dt, rho):
    """``(4 kappa pi dt)^(-n/2) exp(-rho^2 / (4M))``."""
    return (4 * field.kappa * math.pi * np.asarray(dt)) ** (-field.n / 2) \
        * np.exp(-np.asarray(rho) ** 2 / (4 * field.M))


def z_lower_envelope(field: CoefficientField, dt, rho):
    """``(4 pi M dt)^(-n/2) exp(-rho^2 / kappa)``."""
    return (4 * math.pi * field.M * np.asarray(dt)) ** (-field.n / 2) \
        * np.exp(-np.asarray(rho) ** 2 / field.kappa)


def _c_bracket(lam, kappa, N1, N2, alpha, decay):
    lam = np.asarray(lam, dtype=float)
    poly = N1 * (1 / (2 * kappa) + lam ** 2 / (4 * kappa ** 2)) * (1 + lam ** 2) ** (alpha / 2) \
        + N2 * (lam / kappa + 1)
    return poly * np.exp(-decay * lam ** 2)


def _lambda_max(kappa, N1, N2, alpha, decay):
    # beyond this point the bracket is below 1e-16 of its value at zero
    ref = max(_c_bracket(0.0, kappa, N1, N2, alpha, decay), 1e-300)
    lam = 1.0
    while _c_bracket(lam, kappa, N1, N2, alpha, decay) > 1e-16 * ref or lam < 4.0 / math.sqrt(decay):
        lam *= 2.0
    return lam


def constant_C(field: CoefficientField, decay: float | None = None) -> float:
    """Maximise the Psi-Z envelope multiplier over ``lambda >= 0``.

    ``decay`` is the Gaussian rate left over for the maximisation; the
    default ``1/(8M)`` splits the parametrix decay ``1/(4M)`` in half. A
    dense scan locates the peak and a bounded scalar minimiser polishes it.
    """
    kappa, N1, N2, alpha, n = field.kappa, field.N1, field.N2, field.alpha, field.n
    decay = 1.0 / (8.0 * field.M) if decay is None else decay
    if N1 == 0 and N2 == 0:
        return 0.0
    lam_max = _lambda_max(kappa, N1, N2, alpha, decay)
    grid = np.linspace(0.0, lam_max, 4001)
    vals = _c_bracket(grid, kappa, N1, N2, alpha, decay)
    i = int(np.argmax(vals))
    best = float(vals[i])
    h = grid[1] - grid[0]
    lo, hi = max(0.0, grid[i] - h), min(lam_max, grid[i] + h)
    res = optimize.minimize_scalar(lambda s: -_c_bracket(s, kappa, N1, N2, alpha, decay),
                                   bounds=(lo, hi), method="bounded",
                                   options={"xatol": 1e-12 * max(1.0, hi)})
    best = max(best, float(-res.fun))
    return (4 * kappa * math.pi) ** (-n / 2) * best


def phi1_envelope(field: CoefficientField, C: float, dt, rho):
    """``C dt^(-n/2 - 1 + alpha/2) exp(-rho^2 / (8M))``."""
    beta = field.alpha / 2
    c = 1.0 / (8.0 * field.M)
    return C * np.asarray(dt) ** (-field.n / 2 - 1 + beta) * np.exp(-c * np.asarray(rho) ** 2)


@dataclass
class InverseBoundsReport:
    inverse_ratio: float     # max kappa |a^-1 eta| / |eta|, must be <= 1
    entry_ratio: float       # max kappa |a^ij|, must be <= 1
    form_ratio: float        # min M <a^-1 v, v> / |v|^2, must be >= 1
    samples: int
    witness: tuple = ()

    @property
    def passed(self) -> bool:
        tol = 1e-12
        return (self.inverse_ratio <= 1 + tol and self.entry_ratio <= 1 + tol
                and self.form_ratio >= 1 - tol)


def check_lemma_pa1(field: CoefficientField, sample_count: int = 1000,
                    rng_seed: int = 0) -> InverseBoundsReport:
    """Sample the three inverse-matrix estimates at random points and vectors.

    Alongside random vectors the eigenvectors of each sampled inverse are
    tested, so the extremal ratios are attained exactly.
    """
    rng = np.random.default_rng(rng_seed)
    n = field.n
    lo, hi, t0, t1 = field.region
    x = rng.uniform(lo, hi, size=(sample_count, n))
    t = rng.uniform(t0, t1, size=sample_count)
    ainv, _ = batch_inverse(field.eval_a(x, t))
    eta = rng.standard_normal((sample_count, n))
    _, vecs = np.linalg.eigh(ainv)
    cand = np.concatenate([eta[:, None, :], np.swapaxes(vecs, -1, -2)], axis=1)
    cand = cand / np.linalg.norm(cand, axis=-1, keepdims=True)
    img = np.einsum("pij,pkj->pki", ainv, cand)
    inv_ratio = field.kappa * np.linalg.norm(img, axis=-1)
    entry_ratio = field.kappa * np.abs(ainv).reshape(sample_count, -1).max(axis=-1)
    form_ratio = field.M * np.einsum("pki,pki->pk", img, cand)
    worst = int(np.argmax(inv_ratio.max(axis=1)))
    return InverseBoundsReport(float(inv_ratio.max()), float(entry_ratio.max()), float(form_ratio.min()),
                       sample_count, (tuple(x[worst]), float(t[worst])))
