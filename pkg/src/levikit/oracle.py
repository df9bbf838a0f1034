"""Reference solutions: the exact constant-coefficient kernel and a finite-difference solver."""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import interpolate, sparse
from scipy.sparse import linalg as splinalg

from .coeffs import CoefficientField, SpdMatrix, batch_inverse
from .parametrix import KernelQuery

__all__ = [
    "exact_constant_kernel",
    "fd_solve",
    "FDSolution",
    "LeakageWarning",
    "compare",
    "ErrorReport",
]


class LeakageWarning(UserWarning):
    pass


def exact_constant_kernel(a, b, q0: float, qy: KernelQuery) -> float:
    """``e^{q0 dt} G_{a^-1}(x - xi + b dt, dt)`` for constant ``a``, ``b``, ``q0``."""
    if not qy.t > qy.tau:
        raise ValueError("need t > tau")
    a = a.entries if isinstance(a, SpdMatrix) else np.atleast_2d(np.asarray(a, float))
    n = qy.n
    b = np.zeros(n) if b is None else np.atleast_1d(np.asarray(b, float))
    dt = qy.dt
    y = qy.x - qy.xi + b * dt
    ainv = np.linalg.inv(a)
    quad = float(y @ ainv @ y)
    g = (4 * math.pi * dt) ** (-n / 2) / math.sqrt(np.linalg.det(a)) * math.exp(-quad / (4 * dt))
    return math.exp(q0 * dt) * g


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------
@dataclass
class FDSolution:
    axes: list                 # one 1-D node array per dimension (interior nodes)
    t: float
    values: np.ndarray         # shape (len(axes[0]), ..., len(axes[n-1]))
    source: tuple
    mass: float
    leakage: float
    start_time: float

    @property
    def n(self) -> int:
        return len(self.axes)

    @property
    def spacing(self) -> np.ndarray:
        return np.array([ax[1] - ax[0] for ax in self.axes])

    @property
    def leaked(self) -> bool:
        return self.leakage > 1e-6

    def points(self) -> np.ndarray:
        grids = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([g.ravel() for g in grids], axis=-1)

    def value_at(self, x) -> np.ndarray:
        """Cubic interpolation of the grid solution at points ``x`` of shape ``(P, n)``."""
        x = np.atleast_2d(np.asarray(x, float))
        if self.n == 1:
            spline = interpolate.CubicSpline(self.axes[0], self.values)
            return spline(x[:, 0])
        interp = interpolate.RegularGridInterpolator(self.axes, self.values, method="cubic")
        return interp(x)

    def to_csv(self, path) -> None:
        pts = self.points()
        vals = self.values.ravel()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"x_{i + 1}" for i in range(self.n)] + ["t", "value"])
            for p, v in zip(pts, vals):
                w.writerow([repr(float(c)) for c in p] + [repr(self.t), repr(float(v))])


def _laplace_parts(axes):
    """1-D second- and first-difference matrices (Dirichlet) per axis."""
    mats = []
    for ax in axes:
        m = len(ax)
        h = ax[1] - ax[0]
        d2 = sparse.diags([np.ones(m - 1), -2 * np.ones(m), np.ones(m - 1)], [-1, 0, 1]) / h ** 2
        d1 = sparse.diags([-np.ones(m - 1), np.ones(m - 1)], [-1, 1]) / (2 * h)
        mats.append((sparse.csr_matrix(d2), sparse.csr_matrix(d1), sparse.identity(m, format="csr")))
    return mats


def _kron_axis(mats, axis, which):
    out = None
    for i, parts in enumerate(mats):
        m = parts[which] if i == axis else parts[2]
        out = m if out is None else sparse.kron(out, m, format="csr")
    return out


class _Operator:
    """Assembles ``sum a_ij d_ij + sum b_i d_i + q`` on the interior nodes at a given time."""

    def __init__(self, field: CoefficientField, axes):
        self.field = field
        self.axes = axes
        n = field.n
        mats = _laplace_parts(axes)
        self.d2 = [_kron_axis(mats, i, 0) for i in range(n)]
        self.d1 = [_kron_axis(mats, i, 1) for i in range(n)]
        # mixed derivatives: 4-point cross stencil = product of central first differences
        self.dmix = {(i, j): (self.d1[i] @ self.d1[j]).tocsr()
                     for i in range(n) for j in range(i + 1, n)}
        grids = np.meshgrid(*axes, indexing="ij")
        self.pts = np.stack([g.ravel() for g in grids], axis=-1)

    def at(self, t: float):
        f = self.field
        n = f.n
        a = f.eval_a(self.pts, t)
        op = None
        for i in range(n):
            term = sparse.diags(a[:, i, i]) @ self.d2[i]
            op = term if op is None else op + term
        for (i, j), dm in self.dmix.items():
            op = op + sparse.diags(2 * a[:, i, j]) @ dm
        if f.b is not None:
            b = f.eval_b(self.pts, t)
            for i in range(n):
                op = op + sparse.diags(b[:, i]) @ self.d1[i]
        if f.q is not None:
            op = op + sparse.diags(f.eval_q(self.pts, t))
        return op.tocsc()


def _time_dependent(field: CoefficientField) -> bool:
    probe = np.zeros((1, field.n))
    t0, t1 = 0.0, 0.731
    for fn in (field.eval_a, field.eval_b, field.eval_q):
        if not np.array_equal(fn(probe + 0.37, t0), fn(probe + 0.37, t1)):
            return True
    return False


def fd_solve(field: CoefficientField, source, t_end: float, domain_box, nx: int, nt: int,
             theta: float = 0.5, startup: int = 2) -> FDSolution:
    """theta-scheme for ``u_t = sum a_ij d_ij u + sum b_i d_i u + q u`` started from a mollified delta.

    ``domain_box`` is ``[(lo_1, hi_1), ..., (lo_n, hi_n)]`` with zero boundary
    values and ``nx`` intervals per axis. The initial datum is the frozen
    Gaussian ``Z(., tau + s0; xi, tau)`` whose widest axis spans two cells,
    renormalised to unit discrete mass; the clock starts at ``tau + s0`` so
    the mollifier is itself a short-time kernel. ``startup`` leading steps
    are split into two backward-Euler half steps to damp the
    Crank-Nicolson oscillation of non-smooth data.
    """
    xi, tau = source
    xi = np.atleast_1d(np.asarray(xi, float))
    n = field.n
    if not 0.5 <= theta <= 1.0:
        raise ValueError("theta must lie in [1/2, 1]; explicit-leaning schemes are rejected")
    if nx < 8 or nt < 1:
        raise ValueError("need nx >= 8 and nt >= 1")
    if t_end <= tau:
        raise ValueError("t_end must exceed tau")
    box = np.asarray(domain_box, float).reshape(n, 2)
    margin = 8 * math.sqrt(2 * field.M * (t_end - tau))
    if np.any(xi - box[:, 0] < margin) or np.any(box[:, 1] - xi < margin):
        raise ValueError(f"domain must extend at least {margin:.3g} beyond xi in every direction")
    axes = [np.linspace(lo, hi, nx + 1)[1:-1] for lo, hi in box]
    h = np.array([ax[1] - ax[0] for ax in axes])
    cell = float(np.prod(h))
    ops = _Operator(field, axes)
    pts = ops.pts
    a0 = field.eval_a(xi, tau)
    ainv, det = batch_inverse(a0)
    # the widest axis of Z(., s0) has variance 2 s0 lambda_max(a0); make it (2 h)^2
    lam_max = float(np.linalg.eigvalsh(a0).max())
    s0 = (2 * float(h.max())) ** 2 / (2 * lam_max)
    if s0 >= t_end - tau:
        raise ValueError("grid too coarse: mollifier time exceeds the integration span")
    dx = pts - xi
    u = np.exp(-np.einsum("pi,ij,pj->p", dx, ainv, dx) / (4 * s0))
    u /= u.sum() * cell
    t = tau + s0
    dt = (t_end - t) / nt
    eye = sparse.identity(len(u), format="csc")
    varying = _time_dependent(field)
    cache = {}

    def op_at(tt):
        if not varying:
            if "L" not in cache:
                cache["L"] = ops.at(tt)
            return cache["L"]
        return ops.at(tt)

    def implicit_solve(lhs_t, rhs, k, th):
        L1 = op_at(lhs_t)
        key = ("lu", k, th)
        if varying or key not in cache:
            lu = splinalg.splu((eye - th * k * L1).tocsc())
            if not varying:
                cache[key] = lu
        else:
            lu = cache[key]
        return lu.solve(rhs)

    for step in range(nt):
        if step < startup:
            for half in range(2):
                t_new = t + dt / 2
                u = implicit_solve(t_new, u, dt / 2, 1.0)
                t = t_new
            continue
        t_new = t + dt
        rhs = u + (1 - theta) * dt * (op_at(t) @ u) if theta < 1 else u
        u = implicit_solve(t_new, rhs, dt, theta)
        t = t_new
    values = u.reshape([len(ax) for ax in axes])
    mass = float(u.sum() * cell)
    # mass in the outer tenth of the box measures contact with the boundary
    outer = np.zeros(values.shape, dtype=bool)
    for i, ax in enumerate(axes):
        band = max(1, len(ax) // 10)
        sl = [slice(None)] * n
        sl[i] = slice(0, band)
        outer[tuple(sl)] = True
        sl[i] = slice(len(ax) - band, None)
        outer[tuple(sl)] = True
    leakage = float(np.abs(values[outer]).sum() * cell)
    sol = FDSolution(axes, float(t_end), values, (tuple(xi), float(tau)), mass, leakage, tau + s0)
    if sol.leaked:
        warnings.warn(f"boundary band carries mass {leakage:.2e}", LeakageWarning, stacklevel=2)
    return sol


# ---------------------------------------------------------------------------
# comparison
# ---------------------------------------------------------------------------
@dataclass
class ErrorReport:
    max_rel: float
    mean_rel: float
    count: int
    worst_index: int

    def as_dict(self) -> dict:
        return {"max_rel": self.max_rel, "mean_rel": self.mean_rel, "count": self.count}


def compare(parametrix_values, oracle_values, rho=None, rho_max: float = 3.0,
            exclude=None) -> ErrorReport:
    """Relative error of ``parametrix_values`` against ``oracle_values``.

    Only entries with ``rho <= rho_max`` (when ``rho`` is given) and not
    flagged in ``exclude`` take part.
    """
    p = np.asarray(parametrix_values, float).ravel()
    o = np.asarray(oracle_values, float).ravel()
    if p.shape != o.shape:
        raise ValueError("value arrays differ in shape")
    mask = np.ones(p.shape, dtype=bool)
    if rho is not None:
        mask &= np.asarray(rho, float).ravel() <= rho_max
    if exclude is not None:
        mask &= ~np.asarray(exclude, bool).ravel()
    if not np.any(mask):
        raise ValueError("no query lies in the comparison region")
    rel = np.abs(p[mask] - o[mask]) / np.abs(o[mask])
    idx = np.flatnonzero(mask)[int(np.argmax(rel))]
    return ErrorReport(float(rel.max()), float(rel.mean()), int(mask.sum()), int(idx))
