"""Coefficient fields of a non-divergence parabolic operator.

The operator is ``sum a_ij d_ij + sum b_i d_i + q - d_t``. A
:class:`CoefficientField` carries vectorised evaluators for ``a``, ``b`` and
``q`` together with the structural constants (kappa, M, N1, N2, alpha) that
the user declares and that :func:`validate_assumptions` checks by sampling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field
from typing import Callable, Optional, Sequence

import numpy as np

from . import exprparse

__all__ = [
    "SpdMatrix",
    "CoefficientField",
    "SingularMatrixError",
    "invert_spd",
    "batch_inverse",
    "estimate_holder_seminorm",
    "validate_assumptions",
    "AssumptionCheck",
    "AssumptionReport",
]

COND_LIMIT = 1e12
HOLDER_SCALES = 21  # displacement scales 2**-k, k = 0..20


class SingularMatrixError(ValueError):
    pass


@dataclass(frozen=True)
class SpdMatrix:
    entries: np.ndarray

    def __post_init__(self):
        a = np.array(self.entries, dtype=float)
        if a.ndim == 0:
            a = a.reshape(1, 1)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValueError(f"expected a square matrix, got shape {a.shape}")
        if not np.allclose(a, a.T, rtol=1e-12, atol=1e-14):
            raise ValueError("matrix is not symmetric")
        a = 0.5 * (a + a.T)
        if not np.all(np.isfinite(a)) or np.linalg.eigvalsh(a)[0] <= 0:
            raise ValueError("matrix is not positive definite")
        a.setflags(write=False)
        object.__setattr__(self, "entries", a)

    @property
    def n(self) -> int:
        return self.entries.shape[0]

    @property
    def det(self) -> float:
        return float(np.linalg.det(self.entries))

    def eigenvalues(self) -> np.ndarray:
        return np.linalg.eigvalsh(self.entries)

    def quadratic_form(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        return np.einsum("...i,ij,...j->...", v, self.entries, v)

    def __matmul__(self, v):
        return np.asarray(v, dtype=float) @ self.entries.T


def invert_spd(a: SpdMatrix) -> SpdMatrix:
    """Invert a symmetric positive-definite matrix through its Cholesky factor.

    Raises :class:`SingularMatrixError` when the matrix is not positive
    definite or its condition number exceeds ``1e12``.
    """
    m = a.entries
    try:
        chol = np.linalg.cholesky(m)
    except np.linalg.LinAlgError as exc:
        raise SingularMatrixError("matrix is not positive definite") from exc
    cond = np.linalg.cond(m)
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise SingularMatrixError(f"matrix is numerically singular (condition {cond:.3e})")
    ident = np.eye(a.n)
    linv = np.linalg.solve(chol, ident)
    return SpdMatrix(linv.T @ linv)


def batch_inverse(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Inverse and determinant of a stack of SPD matrices ``(..., n, n)``."""
    n = a.shape[-1]
    if n == 1:
        det = a[..., 0, 0]
        return (1.0 / det)[..., None, None], det
    if n == 2:
        a11, a12, a21, a22 = a[..., 0, 0], a[..., 0, 1], a[..., 1, 0], a[..., 1, 1]
        det = a11 * a22 - a12 * a21
        inv = np.empty_like(a)
        inv[..., 0, 0] = a22 / det
        inv[..., 1, 1] = a11 / det
        inv[..., 0, 1] = -a12 / det
        inv[..., 1, 0] = -a21 / det
        return inv, det
    return np.linalg.inv(a), np.linalg.det(a)


def _as_points(x, n: int) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if n == 1 and (x.ndim == 0 or x.shape[-1] != 1):
        x = x[..., None]
    if x.shape[-1] != n:
        raise ValueError(f"expected points with trailing dimension {n}, got {x.shape}")
    return x


@dataclass(frozen=True)
class CoefficientField:
    """Coefficients ``a, b, q`` plus the declared structural constants.

    Evaluators take ``x`` of shape ``(..., n)`` and ``t`` broadcastable to
    ``x.shape[:-1]`` and return arrays of shape ``(..., n, n)``, ``(..., n)``
    and ``(...)``. ``b=None`` / ``q=None`` mean identically zero.
    """

    n: int
    a: Callable
    kappa: float
    M: float
    N1: float
    N2: float
    alpha: float
    b: Optional[Callable] = None
    q: Optional[Callable] = None
    region: tuple = (-2 * math.pi, 2 * math.pi, 0.0, 2 * math.pi)
    description: str = ""
    sources: dict = dc_field(default_factory=dict, compare=False)

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 1:
            raise ValueError("n must be a positive integer")
        if not self.kappa > 0:
            raise ValueError(f"kappa must be positive, got {self.kappa}")
        if not self.M >= self.kappa:
            raise ValueError(f"M must satisfy M >= kappa, got kappa={self.kappa}, M={self.M}")
        if self.N1 < 0 or self.N2 < 0:
            raise ValueError("N1 and N2 must be non-negative")
        if not 0 < self.alpha <= 1:
            raise ValueError(f"alpha must lie in (0, 1], got {self.alpha}")
        lo, hi, t0, t1 = self.region
        if not (hi > lo and t1 > t0):
            raise ValueError("sampling region must have positive volume")

    # -- constructors -----------------------------------------------------
    @classmethod
    def constant(cls, a, b=None, q0: float = 0.0, *, kappa=None, M=None, alpha: float = 1.0,
                 N1: float = 0.0, N2=None, **kw) -> "CoefficientField":
        am = SpdMatrix(np.atleast_2d(np.asarray(a, dtype=float)))
        n = am.n
        ev = am.eigenvalues()
        kappa = float(ev.min()) if kappa is None else kappa
        M = float(ev.max()) if M is None else M
        bv = None if b is None else np.asarray(b, dtype=float).reshape(n)
        if bv is not None and not np.any(bv):
            bv = None
        if N2 is None:
            N2 = (0.0 if bv is None else float(np.abs(bv).sum())) + abs(q0)
        entries = am.entries

        def a_fn(x, t):
            x = np.asarray(x, dtype=float)
            return np.broadcast_to(entries, x.shape[:-1] + (n, n))

        b_fn = None
        if bv is not None:
            def b_fn(x, t):
                x = np.asarray(x, dtype=float)
                return np.broadcast_to(bv, x.shape[:-1] + (n,))

        q_fn = None
        if q0 != 0.0:
            def q_fn(x, t):
                x = np.asarray(x, dtype=float)
                return np.full(x.shape[:-1], float(q0))

        return cls(n=n, a=a_fn, b=b_fn, q=q_fn, kappa=kappa, M=M, N1=N1, N2=N2,
                   alpha=alpha, **kw)

    @classmethod
    def from_expressions(cls, n: int, a: dict, b: Optional[dict] = None, q: Optional[str] = None,
                         **constants) -> "CoefficientField":
        """Build a field from formula strings.

        ``a`` maps 1-based ``(i, j)`` pairs to formulas; a missing ``(j, i)``
        mirrors ``(i, j)`` and missing off-diagonal entries are zero.
        """
        table = {}
        for (i, j), text in a.items():
            if not (1 <= i <= n and 1 <= j <= n):
                raise ValueError(f"a[{i}][{j}] is outside a {n}x{n} matrix")
            table[(i, j)] = exprparse.parse(text, n)
        for i in range(1, n + 1):
            if (i, i) not in table:
                raise ValueError(f"missing diagonal entry a[{i}][{i}]")
            for j in range(1, n + 1):
                if (i, j) not in table:
                    table[(i, j)] = table.get((j, i), exprparse.Num(0.0))
        b_exprs = {}
        for i, text in (b or {}).items():
            if not 1 <= i <= n:
                raise ValueError(f"b[{i}] is outside dimension {n}")
            e = exprparse.parse(text, n)
            if not exprparse.is_zero(e):
                b_exprs[i] = e
        q_expr = None
        if q is not None:
            q_expr = exprparse.parse(q, n)
            if exprparse.is_zero(q_expr):
                q_expr = None

        def a_fn(x, t):
            x = np.asarray(x, dtype=float)
            shape = np.broadcast_shapes(x.shape[:-1], np.shape(t))
            out = np.empty(shape + (n, n))
            for (i, j), e in table.items():
                out[..., i - 1, j - 1] = exprparse.evaluate(e, x, t)
            return out

        b_fn = None
        if b_exprs:
            def b_fn(x, t):
                x = np.asarray(x, dtype=float)
                shape = np.broadcast_shapes(x.shape[:-1], np.shape(t))
                out = np.zeros(shape + (n,))
                for i, e in b_exprs.items():
                    out[..., i - 1] = exprparse.evaluate(e, x, t)
                return out

        q_fn = None
        if q_expr is not None:
            def q_fn(x, t):
                x = np.asarray(x, dtype=float)
                shape = np.broadcast_shapes(x.shape[:-1], np.shape(t))
                return np.broadcast_to(np.asarray(exprparse.evaluate(q_expr, x, t), float), shape)

        sources = {"a": {k: str(v) for k, v in table.items()},
                   "b": {k: str(v) for k, v in b_exprs.items()},
                   "q": None if q_expr is None else str(q_expr)}
        return cls(n=n, a=a_fn, b=b_fn, q=q_fn, sources=sources, **constants)

    # -- evaluation -------------------------------------------------------
    @property
    def drift_free(self) -> bool:
        """True when ``b`` and ``q`` are declared identically zero."""
        return self.b is None and self.q is None

    @property
    def structural(self) -> tuple:
        """The tuple (n, alpha, N1, N2, M, kappa)."""
        return (self.n, self.alpha, self.N1, self.N2, self.M, self.kappa)

    def eval_a(self, x, t) -> np.ndarray:
        x = _as_points(x, self.n)
        shape = np.broadcast_shapes(x.shape[:-1], np.shape(t))
        return np.broadcast_to(np.asarray(self.a(x, t), dtype=float), shape + (self.n, self.n))

    def eval_b(self, x, t) -> np.ndarray:
        x = _as_points(x, self.n)
        shape = np.broadcast_shapes(x.shape[:-1], np.shape(t))
        if self.b is None:
            return np.zeros(shape + (self.n,))
        return np.broadcast_to(np.asarray(self.b(x, t), dtype=float), shape + (self.n,))

    def eval_q(self, x, t) -> np.ndarray:
        x = _as_points(x, self.n)
        shape = np.broadcast_shapes(x.shape[:-1], np.shape(t))
        if self.q is None:
            return np.zeros(shape)
        return np.broadcast_to(np.asarray(self.q(x, t), dtype=float), shape)

    def matrix(self, x, t) -> SpdMatrix:
        return SpdMatrix(self.eval_a(np.asarray(x, float).reshape(self.n), t))

    def with_constants(self, **kw) -> "CoefficientField":
        from dataclasses import replace
        return replace(self, **kw)


def _holder_offsets(u: np.ndarray, n: int, span: float, tspan: float):
    """Turn a row of uniforms into displacement pairs at geometric scales.

    For every scale ``2**-k`` three displacements are produced: purely
    spatial, purely temporal and mixed parabolic.
    """
    k = np.arange(HOLDER_SCALES)
    h = span * 2.0 ** (-k)
    dirs = 2.0 * u[..., :n * HOLDER_SCALES].reshape(u.shape[:-1] + (HOLDER_SCALES, n)) - 1.0
    norm = np.linalg.norm(dirs, axis=-1, keepdims=True)
    dirs = np.where(norm > 1e-12, dirs / np.maximum(norm, 1e-300), 1.0 / math.sqrt(n))
    sgn = np.where(u[..., n * HOLDER_SCALES:n * HOLDER_SCALES + HOLDER_SCALES] < 0.5, -1.0, 1.0)
    ht = tspan * 4.0 ** (-k)
    dx_space = dirs * h[:, None]
    dt_space = np.zeros(u.shape[:-1] + (HOLDER_SCALES,))
    dx_time = np.zeros_like(dx_space)
    dt_time = sgn * tspan * 2.0 ** (-k)
    dx_mixed = dirs * h[:, None]
    dt_mixed = sgn * ht
    dx = np.concatenate([dx_space, dx_time, dx_mixed], axis=-2)
    dt = np.concatenate([dt_space, dt_time, dt_mixed], axis=-1)
    return dx, dt


def _uniform_block(rng_seed: int, count: int, width: int) -> np.ndarray:
    # row-major fill: the first k rows do not depend on ``count``
    return np.random.default_rng(rng_seed).random((count, width))


def _sample_width(n: int) -> int:
    return (n + 1) + n * HOLDER_SCALES + HOLDER_SCALES + (n + 1)


def _sample_pairs(n: int, region, sample_count: int, rng_seed: int):
    lo, hi, t0, t1 = region
    u = _uniform_block(rng_seed, sample_count, _sample_width(n))
    base_x = lo + (hi - lo) * u[:, :n]
    base_t = t0 + (t1 - t0) * u[:, n]
    rest = u[:, n + 1:]
    dx, dt = _holder_offsets(rest[:, : n * HOLDER_SCALES + HOLDER_SCALES], n, hi - lo, t1 - t0)
    far = rest[:, n * HOLDER_SCALES + HOLDER_SCALES:]
    far_x = lo + (hi - lo) * far[:, :n]
    far_t = t0 + (t1 - t0) * far[:, n]
    p_x = np.concatenate([base_x[:, None, :] + dx, far_x[:, None, :]], axis=1)
    p_t = np.concatenate([base_t[:, None] + dt, far_t[:, None]], axis=1)
    return base_x, base_t, p_x, p_t


def _parabolic_distance(dx, dt, alpha):
    return (np.sum(dx * dx, axis=-1) + np.abs(dt)) ** (alpha / 2)


def _holder_quotients(fn, base_x, base_t, p_x, p_t, alpha):
    f0 = fn(base_x, base_t)
    f1 = fn(p_x, p_t)
    f0 = f0.reshape(f0.shape[:1] + (1,) + f0.shape[1:])
    diff = np.abs(f1 - f0)
    diff = diff.reshape(diff.shape[:2] + (-1,)).sum(axis=-1)
    dist = _parabolic_distance(p_x - base_x[:, None, :], p_t - base_t[:, None], alpha)
    with np.errstate(divide="ignore", invalid="ignore"):
        quot = np.where(dist > 0, diff / dist, 0.0)
    return quot


def estimate_holder_seminorm(field: CoefficientField, sample_count: int, region=None,
                             rng_seed: int = 0) -> float:
    """Sampled lower estimate of ``sum_ij [a_ij]_alpha`` on the parabolic metric.

    Base points are uniform in ``region = (x_lo, x_hi, t_lo, t_hi)`` (the
    spatial box is the same interval on every axis); partners sit at
    geometric separations ``2**-k``. Samples are drawn row by row from one
    stream, so raising ``sample_count`` only adds pairs and the estimate is
    non-decreasing.
    """
    if sample_count < 2:
        raise ValueError("sample_count must be at least 2")
    region = field.region if region is None else tuple(region)
    lo, hi, t0, t1 = region
    if not (hi > lo and t1 > t0):
        raise ValueError("degenerate sampling region")
    bx, bt, px, pt = _sample_pairs(field.n, region, sample_count, rng_seed)
    quot = _holder_quotients(field.eval_a, bx, bt, px, pt, field.alpha)
    return float(quot.max())


@dataclass
class AssumptionCheck:
    name: str
    passed: bool
    value: float
    bound: float
    witness: Optional[tuple] = None
    note: str = ""


@dataclass
class AssumptionReport:
    checks: list

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def __getitem__(self, name: str) -> AssumptionCheck:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def as_dict(self) -> dict:
        return {c.name: {"passed": c.passed, "value": c.value, "bound": c.bound,
                         "witness": c.witness, "note": c.note} for c in self.checks}


def _witness(x, t, idx):
    return (tuple(float(v) for v in np.atleast_1d(x[idx])), float(t[idx]))


def validate_assumptions(field: CoefficientField, sample_count: int = 2000,
                         rng_seed: int = 0, rtol: float = 1e-12) -> AssumptionReport:
    """Check the declared constants of ``field`` against sampled values.

    Failures are report entries; nothing is raised.
    """
    n = field.n
    bx, bt, px, pt = _sample_pairs(n, field.region, sample_count, rng_seed)
    # ellipticity on base points plus every partner point
    allx = np.concatenate([bx, px.reshape(-1, n)])
    allt = np.concatenate([bt, pt.reshape(-1)])
    checks = []

    a = field.eval_a(allx, allt)
    finite = bool(np.all(np.isfinite(a)))
    sym_err = float(np.abs(a - np.swapaxes(a, -1, -2)).max()) if finite else float("inf")
    if finite:
        ev = np.linalg.eigvalsh(0.5 * (a + np.swapaxes(a, -1, -2)))
        lo_ev, hi_ev = ev[:, 0], ev[:, -1]
        viol = np.maximum(field.kappa - lo_ev, hi_ev - field.M)
        worst = int(np.argmax(viol))
        tol = rtol * field.M
        checks.append(AssumptionCheck(
            "a2", bool(viol[worst] <= tol and sym_err <= tol), float(viol[worst]), 0.0,
            _witness(allx, allt, worst),
            f"sampled eigenvalues in [{lo_ev.min():.6g}, {hi_ev.max():.6g}], "
            f"declared [{field.kappa:.6g}, {field.M:.6g}], symmetry error {sym_err:.3g}"))
    else:
        checks.append(AssumptionCheck("a2", False, float("inf"), 0.0, None, "non-finite a"))

    quot = _holder_quotients(field.eval_a, bx, bt, px, pt, field.alpha)
    worst = np.unravel_index(int(np.argmax(quot)), quot.shape)
    est = float(quot[worst])
    checks.append(AssumptionCheck("a1", bool(np.isfinite(est)), est, float("inf"),
                                  _witness(bx, bt, worst[0]), "Hoelder quotient of a finite"))
    checks.append(AssumptionCheck("a4", bool(est <= field.N1 * (1 + rtol)), est, field.N1,
                                  _witness(bx, bt, worst[0]),
                                  "sampled sum of Hoelder quotients of a_ij"))

    bvals = np.abs(field.eval_b(allx, allt))
    qvals = np.abs(field.eval_q(allx, allt))
    bound_sum = float(bvals.max(axis=0).sum() + qvals.max()) if len(allt) else 0.0
    pointwise = bvals.sum(axis=-1) + qvals
    wi = int(np.argmax(pointwise))
    checks.append(AssumptionCheck("a3", bool(np.all(np.isfinite(pointwise))),
                                  float(pointwise.max()), float("inf"), _witness(allx, allt, wi),
                                  "b and q finite at samples"))
    checks.append(AssumptionCheck("a5", bool(bound_sum <= field.N2 * (1 + rtol) + 1e-300),
                                  bound_sum, field.N2, _witness(allx, allt, wi),
                                  "sum of sampled sup|b_i| plus sup|q|"))

    # spatial Hoelder finiteness of b and q, fixed time
    def bq(x, t):
        return np.concatenate([field.eval_b(x, t), field.eval_q(x, t)[..., None]], axis=-1)

    quot_bq = _holder_quotients(bq, bx, bt, px, np.broadcast_to(bt[:, None], pt.shape),
                                field.alpha)
    est_bq = float(quot_bq.max())
    checks.append(AssumptionCheck("a6", bool(np.isfinite(est_bq)), est_bq, float("inf"), None,
                                  "spatial Hoelder quotients of b, q finite"))
    return AssumptionReport(checks)
