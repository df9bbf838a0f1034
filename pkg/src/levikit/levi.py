"""Levi iteration: space-time convolutions, iterates ``Phi_l``, the series ``Phi`` and ``E``.

Every iterate ``Phi_l(eta, sigma; xi, tau)`` for a fixed base ``(xi, tau)``
is carried by a :class:`GridKernel` in self-similar coordinates

    r = sigma - tau,   y = (eta - xi) / sqrt(r),

storing ``r**p * Phi_l`` with ``p = n/2 + 1 - alpha/2``. Nodes are uniform
in ``log r`` and in ``y``; the stored values stay bounded as ``r -> 0``
where ``Phi_l`` itself blows up.

One step of the recursion

    Phi_{l+1}(eta, sigma) = int_tau^sigma int Phi_1(eta, sigma; zeta, s) Phi_l(zeta, s) dzeta ds

is linear in the grid values, so it is assembled once per base into a
dense operator ``A`` (quadrature weight x ``Phi_1`` x interpolation stencil)
and every further iterate is a matrix-vector product.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field as dc_field, replace
from typing import Callable, Optional, Sequence, Union

import numpy as np
from scipy import special

from . import _accel
from .coeffs import CoefficientField, batch_inverse
from .parametrix import KernelQuery, phi1_batch, z_batch

__all__ = [
    "QuadratureScheme",
    "GridKernel",
    "LeviExpansion",
    "SeriesResult",
    "SeriesTruncationError",
    "QuadratureError",
    "DegenerateIntervalWarning",
    "spacetime_convolve",
    "beta_convolution_reference",
    "levi_iterates",
    "phi_series",
    "series_majorant_S",
    "log_series_majorant",
    "fundamental_solution",
    "reproducing_check",
    "time_rule",
]

DEGENERATE_DT = 1e-10
MAX_OPERATOR_SIZE = 12000


class QuadratureError(RuntimeError):
    pass


class SeriesTruncationError(RuntimeError):
    pass


class DegenerateIntervalWarning(UserWarning):
    pass


@dataclass(frozen=True)
class QuadratureScheme:
    """Discretisation knobs for the space-time convolutions and the iterate grids.

    ``spatial_nodes_per_axis``, ``time_nodes`` and ``time_grading_exponent``
    set the inner convolution rule; the spatial window is
    ``spatial_radius_factor * sqrt(2 * spread * dt)`` around each Gaussian
    factor. ``grid_*`` fields describe the carrier of the iterates: time
    nodes uniform in ``log r + grid_time_stretch * sqrt(r / t_max)`` from
    ``grid_rmin_ratio * t_max`` to ``t_max``, space nodes uniform in ``y``; and ``lattice_step`` the spacing, in units of the narrowest
    kernel width, of the spatial lattices used when composing kernels.
    """

    spatial_nodes_per_axis: int = 20
    spatial_radius_factor: float = 6.0
    time_nodes: int = 16
    time_grading_exponent: float = 4.0
    grid_time_nodes: int = 20
    grid_space_nodes: int = 48
    grid_rmin_ratio: float = 1e-8
    grid_time_stretch: float = 10.0
    lattice_step: float = 0.6

    def __post_init__(self):
        if self.spatial_nodes_per_axis < 2 or self.time_nodes < 2:
            raise ValueError("quadrature needs at least two nodes per direction")
        if self.grid_time_nodes < 4 or self.grid_space_nodes < 4:
            raise ValueError("cubic interpolation needs at least four grid nodes per direction")
        if self.spatial_radius_factor <= 0 or self.time_grading_exponent < 1:
            raise ValueError("radius factor must be positive and grading exponent >= 1")
        if not 0 < self.grid_rmin_ratio < 1 or self.lattice_step <= 0 or self.grid_time_stretch < 0:
            raise ValueError("invalid grid parameters")

    @classmethod
    def for_field(cls, field: CoefficientField, **kw) -> "QuadratureScheme":
        """Default scheme with the time grading ``2 / beta`` for the field's exponent."""
        kw.setdefault("time_grading_exponent", 4.0 / field.alpha)
        return cls(**kw)

    def refined(self, factor: int = 2) -> "QuadratureScheme":
        return replace(self, spatial_nodes_per_axis=self.spatial_nodes_per_axis * factor,
                       time_nodes=self.time_nodes * factor)


def time_rule(nodes: int, grading: float):
    """Graded rule on ``[0, 1]``: ``(u, 1 - u, weights)``.

    Gauss-Legendre in ``v`` composed with ``u = v^p / (v^p + (1-v)^p)``,
    which flattens endpoint singularities of type ``u^(beta - 1)`` when
    ``p >= 1 / beta``. All weights are positive.
    """
    v, w = np.polynomial.legendre.leggauss(nodes)
    v = 0.5 * (v + 1.0)
    w = 0.5 * w
    p = grading
    a = v ** p
    b = (1.0 - v) ** p
    den = a + b
    u = a / den
    um = b / den
    du = p * v ** (p - 1) * (1.0 - v) ** (p - 1) / den ** 2
    return u, um, w * du


def _axis_midpoints(lo, hi, count):
    frac = (np.arange(count) + 0.5) / count
    width = np.maximum(hi - lo, 0.0)
    return lo[..., None] + width[..., None] * frac, width / count


def convolution_nodes(x, t, xi, tau, quad: QuadratureScheme, spread: float,
                      spread_f: Optional[float] = None):
    """Quadrature nodes for ``int_tau^t int f(x, t; zeta, s) g(zeta, s) dzeta ds``.

    ``x`` has shape ``(J, n)`` and ``t`` shape ``(J,)``; returns ``zeta``
    ``(J, Ns, Q, n)``, ``s``, ``s - tau`` and ``t - s`` (each ``(J, Ns)``)
    and weights ``(J, Ns, Q)`` with ``Q = Nz**n``. The two gaps are formed
    without subtraction so they stay accurate when ``tau`` is large. Per axis the window is the intersection of the supports
    of the two Gaussian factors, so the node count does not grow as one
    factor sharpens.
    """
    x = np.asarray(x, dtype=float)
    j, n = x.shape
    t = np.broadcast_to(np.asarray(t, dtype=float), (j,))
    xi = np.asarray(xi, dtype=float).reshape(n)
    spread_f = spread if spread_f is None else spread_f
    u, um, wt = time_rule(quad.time_nodes, quad.time_grading_exponent)
    dt = t - tau
    s = tau + dt[:, None] * u[None, :]
    after = dt[:, None] * u[None, :]           # s - tau
    before = dt[:, None] * um[None, :]         # t - s
    k = quad.spatial_radius_factor
    rad_f = k * np.sqrt(2.0 * spread_f * before)
    rad_g = k * np.sqrt(2.0 * spread * after)
    lo = np.maximum(x[:, None, :] - rad_f[..., None], xi - rad_g[..., None])
    hi = np.minimum(x[:, None, :] + rad_f[..., None], xi + rad_g[..., None])
    nz = quad.spatial_nodes_per_axis
    pts, hstep = _axis_midpoints(lo, hi, nz)           # (J, Ns, n, Nz), (J, Ns, n)
    grids = np.meshgrid(*([np.arange(nz)] * n), indexing="ij")
    idx = np.stack([g.ravel() for g in grids], axis=-1)  # (Q, n)
    zeta = np.stack([pts[:, :, ax, idx[:, ax]] for ax in range(n)], axis=-1)
    cell = np.prod(hstep, axis=-1)                       # (J, Ns)
    weights = (dt[:, None] * wt[None, :] * cell)[..., None] * np.ones(idx.shape[0])
    return zeta, s, after, before, weights


@dataclass
class GridKernel:
    """A kernel ``g(eta, sigma)`` sampled on a self-similar (log r, y) grid.

    ``values[k, m]`` holds ``r_k**power * g`` at time node ``k`` and flat
    spatial node ``m``. Evaluation is tensor cubic interpolation; outside
    the spatial window the kernel is zero.
    """

    xi: np.ndarray
    tau: float
    w0: float
    dw: float
    y0: float
    dy: float
    values: np.ndarray
    power: float
    label: str = ""
    stretch: float = 0.0
    r_scale: float = 1.0

    def __post_init__(self):
        self.xi = np.atleast_1d(np.asarray(self.xi, dtype=float))
        self.values = np.asarray(self.values, dtype=float)
        if not np.all(np.isfinite(self.values)):
            raise QuadratureError(f"non-finite value in grid kernel {self.label}")

    @property
    def n(self) -> int:
        return self.xi.shape[0]

    @property
    def kt(self) -> int:
        return self.values.shape[0]

    @property
    def jn(self) -> int:
        return int(round(self.values.shape[1] ** (1.0 / self.n)))

    @property
    def grid(self):
        return (self.w0, self.dw, self.kt, self.y0, self.dy, self.jn)

    def time_coordinate(self, r):
        """Grid coordinate ``chi = log r + stretch * sqrt(r / r_scale)``."""
        r = np.maximum(np.asarray(r, dtype=float), 1e-300)
        return np.log(r) + self.stretch * np.sqrt(r / self.r_scale)

    @property
    def r_nodes(self) -> np.ndarray:
        chi = self.w0 + self.dw * np.arange(self.kt)
        return _invert_time_coordinate(chi, self.stretch, self.r_scale)

    @property
    def y_nodes(self) -> np.ndarray:
        return self.y0 + self.dy * np.arange(self.jn)

    @property
    def t_max(self) -> float:
        return self.tau + float(self.r_nodes[-1])

    def flat_y(self) -> np.ndarray:
        axes = np.meshgrid(*([self.y_nodes] * self.n), indexing="ij")
        return np.stack([a.ravel() for a in axes], axis=-1)

    def node_points(self):
        """``(eta, sigma)`` of every node: shapes ``(kt, m, n)`` and ``(kt,)``."""
        r = self.r_nodes
        eta = self.xi + np.sqrt(r)[:, None, None] * self.flat_y()[None, :, :]
        return eta, self.tau + r

    def node_values(self) -> np.ndarray:
        return self.values * self.r_nodes[:, None] ** (-self.power)

    def coordinates(self, eta, sigma):
        eta = np.asarray(eta, dtype=float)
        r = np.asarray(sigma, dtype=float) - self.tau
        if np.any(r > self.r_nodes[-1] * (1 + 1e-9)):
            raise QuadratureError("grid kernel does not cover the requested time")
        rs = np.maximum(r, 1e-300)
        y = (eta - self.xi) / np.sqrt(rs)[..., None]
        return r, self.time_coordinate(rs), y

    def __call__(self, eta, sigma) -> np.ndarray:
        eta = np.asarray(eta, dtype=float)
        shape = np.broadcast_shapes(eta.shape[:-1], np.shape(sigma))
        eta = np.broadcast_to(eta, shape + (self.n,)).reshape(-1, self.n)
        sigma = np.broadcast_to(np.asarray(sigma, float), shape).reshape(-1)
        r, chi, y = self.coordinates(eta, sigma)
        vals = _accel.gather_values(self.values, chi, y, self.grid)
        out = np.where(r > 0, vals * np.maximum(r, 1e-300) ** (-self.power), 0.0)
        return out.reshape(shape)

    def with_values(self, values, label="") -> "GridKernel":
        return replace(self, values=np.asarray(values, float), label=label)

    # -- serialisation ----------------------------------------------------
    def to_csv(self, path) -> None:
        """Flat table: one row per node with coordinates, stored and raw values."""
        eta, sigma = self.node_points()
        raw = self.node_values()
        y = self.flat_y()
        n = self.n
        with open(path, "w", newline="") as fh:
            fh.write(f"# xi={','.join(repr(float(v)) for v in self.xi)} tau={self.tau!r} "
                     f"w0={self.w0!r} dw={self.dw!r} y0={self.y0!r} dy={self.dy!r} "
                     f"power={self.power!r} stretch={self.stretch!r} r_scale={self.r_scale!r} "
                     f"label={self.label}\n")
            w = csv.writer(fh)
            w.writerow(["k", "m", "r", "sigma"] + [f"y_{i + 1}" for i in range(n)]
                       + [f"eta_{i + 1}" for i in range(n)] + ["scaled", "value"])
            r = self.r_nodes
            for k in range(self.kt):
                for m in range(self.values.shape[1]):
                    w.writerow([k, m, repr(float(r[k])), repr(float(sigma[k]))]
                               + [repr(float(v)) for v in y[m]]
                               + [repr(float(v)) for v in eta[k, m]]
                               + [repr(float(self.values[k, m])), repr(float(raw[k, m]))])

    @classmethod
    def from_csv(cls, path) -> "GridKernel":
        with open(path) as fh:
            header = fh.readline()[1:].split()
            meta = dict(item.split("=", 1) for item in header)
            rows = list(csv.DictReader(fh))
        xi = np.array([float(v) for v in meta["xi"].split(",")])
        kt = max(int(r["k"]) for r in rows) + 1
        m = max(int(r["m"]) for r in rows) + 1
        values = np.empty((kt, m))
        for r in rows:
            values[int(r["k"]), int(r["m"])] = float(r["scaled"])
        return cls(xi=xi, tau=float(meta["tau"]), w0=float(meta["w0"]), dw=float(meta["dw"]),
                   y0=float(meta["y0"]), dy=float(meta["dy"]), values=values,
                   power=float(meta["power"]), label=meta.get("label", ""),
                   stretch=float(meta.get("stretch", 0.0)), r_scale=float(meta.get("r_scale", 1.0)))


def _invert_time_coordinate(chi, stretch, r_scale):
    """Solve ``log r + stretch * sqrt(r / r_scale) = chi`` for ``r`` (Newton in ``log r``)."""
    chi = np.asarray(chi, dtype=float)
    if stretch == 0.0:
        return np.exp(chi)
    ls = math.log(r_scale)
    L = np.minimum(chi, ls)
    for _ in range(60):
        g = stretch * np.exp(0.5 * (L - ls))
        step = (L + g - chi) / (1.0 + 0.5 * g)
        L = L - step
        if np.all(np.abs(step) < 1e-15 * np.maximum(1.0, np.abs(L))):
            break
    return np.exp(L)


GLike = Union[GridKernel, Callable]


def spacetime_convolve(f: Callable, g: GLike, qy: KernelQuery, quad: QuadratureScheme,
                       spread: float = 1.0) -> float:
    """``int_tau^t int f(x, t; zeta, s) g(zeta, s) dzeta ds`` for one query.

    ``f(x, t, zeta, s)`` and ``g(zeta, s)`` are vectorised callables (``g``
    may be a :class:`GridKernel`). ``spread`` is the diffusivity scale of
    both Gaussian factors, ``exp(-|y|^2 / (4 spread dt))``; it sizes the
    spatial windows.
    """
    zeta, s, _, _, w = convolution_nodes(qy.x[None, :], np.array([qy.t]), qy.xi, qy.tau,
                                         quad, spread)
    zeta, s, w = zeta[0], s[0], w[0]
    if isinstance(g, GridKernel) and qy.t > g.t_max * (1 + 1e-12) + 1e-300:
        raise QuadratureError("grid kernel does not cover the query interval")
    ss = np.broadcast_to(s[:, None], w.shape)
    fv = np.asarray(f(qy.x, qy.t, zeta, ss), dtype=float)
    gv = np.asarray(g(zeta, ss), dtype=float)
    prod = w * fv * gv
    if not np.all(np.isfinite(prod)):
        bad = np.argwhere(~np.isfinite(prod))[0]
        raise QuadratureError(f"non-finite integrand at zeta={zeta[tuple(bad)]}, "
                              f"s={ss[tuple(bad)]}")
    return float(prod.sum())


def beta_convolution_reference(lam: float, gamma: float, delta: float, qy: KernelQuery,
                               printed: bool = False) -> float:
    """Closed form of the space-time convolution of two Gaussian power kernels.

    ``int_tau^t int (t-s)^(-n/2-gamma) e^{-lam|x-z|^2/(t-s)} (s-tau)^(-n/2-delta)
    e^{-lam|z-xi|^2/(s-tau)} dz ds
    = (pi / lam)^(n/2) B(1-gamma, 1-delta) (t-tau)^(-n/2+1-gamma-delta) e^{-lam|x-xi|^2/(t-tau)}``.

    The Gaussian integral over ``z`` contributes ``(pi / lam)^(n/2)``. The
    bound constants (``C-tilde``) are built on ``(4 pi / lam)^(n/2)``, which
    matches kernels written with ``4 (t - s)`` in the exponent and
    over-estimates this integral by ``4^(n/2)``; ``printed=True`` returns
    that larger value.
    """
    if lam <= 0:
        raise ValueError("lambda must be positive")
    if gamma >= 1 or delta >= 1:
        raise ValueError("gamma and delta must be < 1")
    n = qy.n
    dt = qy.dt
    r2 = float(np.sum((qy.x - qy.xi) ** 2))
    lead = (4 if printed else 1) * math.pi / lam
    return (lead ** (n / 2) * special.beta(1 - gamma, 1 - delta)
            * dt ** (-n / 2 + 1 - gamma - delta) * math.exp(-lam * r2 / dt))


def beta_integrand_pieces(lam: float, gamma: float, delta: float, n: int):
    """The two factors of :func:`beta_convolution_reference` as vectorised callables."""

    def f(x, t, zeta, s):
        d = t - s
        r2 = np.sum((x - zeta) ** 2, axis=-1)
        return d ** (-n / 2 - gamma) * np.exp(-lam * r2 / d)

    def g_factory(xi, tau):
        def g(zeta, s):
            d = s - tau
            r2 = np.sum((zeta - xi) ** 2, axis=-1)
            return d ** (-n / 2 - delta) * np.exp(-lam * r2 / d)
        return g

    return f, g_factory


# ---------------------------------------------------------------------------
# series constants
# ---------------------------------------------------------------------------
def log_series_majorant(log_lam: float, beta: float, start: int = 2,
                        rel: float = 1e-16, max_terms: int = 1 << 62) -> float:
    """``log sum_{l >= start} Lambda^l / Gamma(l beta)`` summed in log space.

    The log-terms ``f(l)`` are concave in ``l``. The sum is taken over a
    window around the peak of ``f`` and each tail is bounded by a geometric
    series with the ratio at the window edge, so the result never
    undershoots the series.
    """
    if log_lam == -math.inf:
        return -math.inf

    def slope(ell):
        return log_lam - beta * special.digamma(ell * beta)

    if slope(start) <= 0:
        peak = float(start)
    else:
        lo, hi = float(start), 2.0 * start
        while slope(hi) > 0:
            lo, hi = hi, 2 * hi
            if hi - start > max_terms:
                # the peak is beyond any representable index; the bound is vacuous
                return math.inf
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if slope(mid) > 0:
                lo = mid
            else:
                hi = mid
            if hi - lo < 0.5:
                break
        peak = lo
    centre = max(start, int(round(peak)))
    # the log-terms fall off like (l - peak)^2 beta / (2 peak) near the top
    width = max(512, int(8 * math.sqrt(max(centre, 1) / beta)))
    if width > _WINDOW_LIMIT:
        return _coarse_log_majorant(log_lam, beta, start, peak, width)
    log_rel = math.log(rel)
    while True:
        first = max(start, centre - width)
        last = centre + width
        ells = np.arange(first, last + 1, dtype=float)
        lt = ells * log_lam - special.gammaln(ells * beta)
        acc = float(special.logsumexp(lt))
        tails = []
        ok = True
        if first > start:
            s_left = lt[1] - lt[0]
            if s_left <= 0:
                ok = False
            else:
                tails.append(lt[0] - s_left - math.log1p(-math.exp(-s_left)))
        s_right = lt[-1] - lt[-2]
        if s_right >= 0:
            ok = False
        else:
            tails.append(lt[-1] + s_right - math.log1p(-math.exp(s_right)))
        if ok and all(tl - acc < log_rel for tl in tails):
            return float(special.logsumexp([acc] + tails))
        width *= 2
        if width > max_terms:
            raise RuntimeError("series did not converge")
        if width > _WINDOW_LIMIT:
            return _coarse_log_majorant(log_lam, beta, start, peak, width)


_WINDOW_LIMIT = 1 << 20


def _coarse_log_majorant(log_lam, beta, start, peak, width):
    # concavity: every term is below the peak value, and beyond a point the
    # tangent line there dominates, giving a geometric tail
    def f(ell):
        return ell * log_lam - math.lgamma(ell * beta)

    def fp(ell):
        return log_lam - beta * float(special.digamma(ell * beta))

    top = f(max(peak, start))
    right = math.floor(peak) + width
    parts = [top + math.log(right - start + 1)]
    s_right = fp(right)
    parts.append(f(right) - math.log1p(-math.exp(s_right)) if s_right < 0 else math.inf)
    # evaluating f near 1e17 loses about |f| * eps in absolute terms
    return float(special.logsumexp(parts)) + 64 * abs(top) * 2.0 ** -52


@dataclass(frozen=True)
class SeriesConstants:
    C: float
    Ctilde: float
    Cbar: float
    log_Lambda: float
    log_S: float
    beta: float
    c: float

    @property
    def Lambda(self) -> float:
        return math.exp(self.log_Lambda) if self.log_Lambda > -math.inf else 0.0

    @property
    def S(self) -> float:
        return _safe_exp(self.log_S)


def _safe_exp(v: float) -> float:
    if v == -math.inf:
        return 0.0
    return math.exp(v) if v < 709.0 else math.inf


def series_constants(field: CoefficientField, c: Optional[float] = None) -> SeriesConstants:
    """``C, C~, C-bar, Lambda, S`` for the Gaussian rate ``c`` (default ``1/(8M)``).

    The envelope multiplier ``C`` is maximised with the decay that remains
    after ``c`` is taken out of the parametrix rate ``1/(4M)``.
    """
    from .parametrix import constant_C

    c = 1.0 / (8 * field.M) if c is None else c
    decay = 1.0 / (4 * field.M) - c
    if decay <= 0:
        raise ValueError("Gaussian rate must be below 1/(4M)")
    beta = field.alpha / 2
    n = field.n
    C = constant_C(field, decay=decay)
    ctilde = (4 * math.pi / c) ** (n / 2)
    cbar = 1.0 / ctilde
    if C == 0.0:
        return SeriesConstants(0.0, ctilde, cbar, -math.inf, -math.inf, beta, c)
    log_lam = math.log(C) + math.log(ctilde) + math.lgamma(beta)
    log_tail = log_series_majorant(log_lam, beta)
    log_S = float(np.logaddexp(math.log(C), math.log(cbar) + log_tail))
    return SeriesConstants(C, ctilde, cbar, log_lam, log_S, beta, c)


def series_majorant_S(field: CoefficientField) -> float:
    """``S = C + C-bar sum_{l>=2} Lambda^l / Gamma(l beta)``; may be ``inf`` if it overflows."""
    return series_constants(field).S


def tail_envelope(sc: SeriesConstants, n: int, first: int, dt, rho, keep_power: bool = False):
    """Majorant of ``sum_{l >= first} |Phi_l|`` at ``(dt, rho)``.

    With ``keep_power`` each term keeps its own ``dt^(l beta)``, otherwise
    ``dt^beta`` is used for all (valid for ``dt <= 1``).
    """
    dt = np.asarray(dt, dtype=float)
    rho = np.asarray(rho, dtype=float)
    if sc.log_Lambda == -math.inf:
        return np.zeros(np.broadcast_shapes(dt.shape, rho.shape))
    base = -(n / 2 + 1) * np.log(dt) - sc.c * rho ** 2 + math.log(sc.Cbar)
    if keep_power:
        log_lam_eff = sc.log_Lambda + sc.beta * np.log(dt)
        tails = np.vectorize(lambda ll: log_series_majorant(ll, sc.beta, start=first))(log_lam_eff)
        return np.exp(base + tails)
    tail = log_series_majorant(sc.log_Lambda, sc.beta, start=first)
    return np.exp(base + sc.beta * np.log(dt) + tail)


def iterate_envelope(sc: SeriesConstants, n: int, ell: int, dt, rho, keep_power=False):
    """``C-bar Lambda^l / Gamma(l beta) dt^(-n/2-1+beta) e^{-c rho^2}`` (``l >= 2``)."""
    dt = np.asarray(dt, dtype=float)
    if sc.log_Lambda == -math.inf:
        return np.zeros_like(dt)
    power = ell * sc.beta if keep_power else sc.beta
    log_v = (math.log(sc.Cbar) + ell * sc.log_Lambda - math.lgamma(ell * sc.beta)
             + (-n / 2 - 1 + power) * np.log(dt) - sc.c * np.asarray(rho) ** 2)
    return np.exp(log_v)


# ---------------------------------------------------------------------------
# Levi expansion for one base point
# ---------------------------------------------------------------------------
class LeviExpansion:
    """Levi iterates, their sum and the fundamental solution for one base ``(xi, tau)``.

    Parameters
    ----------
    field : CoefficientField
    xi, tau : base point
    t_max : float
        Length of the time window ``(tau, tau + t_max]`` covered by the grids.
    quad : QuadratureScheme
    tol : float
        Iteration stops once the newest iterate is below ``tol`` times the
        first one in sup norm (scaled grid values).
    ell_max : int
        Hard cap on the number of iterates.
    keep_operator : bool
        Keep the dense iteration operator after the iterates are formed
        (otherwise it is rebuilt on demand).
    """

    def __init__(self, field: CoefficientField, xi, tau: float, t_max: float,
                 quad: Optional[QuadratureScheme] = None, tol: float = 1e-4, ell_max: int = 12,
                 keep_operator: bool = False):
        if t_max <= 0:
            raise ValueError("t_max must be positive")
        if ell_max < 1:
            raise ValueError("ell_max must be at least 1")
        self.field = field
        self.xi = np.atleast_1d(np.asarray(xi, dtype=float)).reshape(field.n)
        self.tau = float(tau)
        self.t_max = float(t_max)
        self.quad = quad or QuadratureScheme.for_field(field)
        self.tol = tol
        self.ell_max = ell_max
        self.power = field.n / 2 + 1 - field.alpha / 2
        self.spread = field.M
        self._operator = None
        self._build_grid()
        self._iterate()
        if not keep_operator:
            self._operator = None

    # -- grid -------------------------------------------------------------
    def _build_grid(self):
        q = self.quad
        n = self.field.n
        kt, jn = q.grid_time_nodes, q.grid_space_nodes
        stretch = q.grid_time_stretch
        w_top = math.log(self.t_max) + stretch
        w0 = math.log(self.t_max * q.grid_rmin_ratio) + stretch * math.sqrt(q.grid_rmin_ratio)
        dw = (w_top - w0) / (kt - 1)
        ymax = q.spatial_radius_factor * math.sqrt(2.0 * self.spread)
        dy = 2 * ymax / (jn - 1)
        size = kt * jn ** n
        self.template = GridKernel(self.xi, self.tau, w0, dw, -ymax, dy,
                                   np.zeros((kt, jn ** n)), self.power, "template",
                                   stretch, self.t_max)
        self.size = size
        eta, sigma = self.template.node_points()
        self._node_eta, self._node_sigma = eta, sigma
        r = self.template.r_nodes
        ps, z = phi1_batch(self.field, eta, sigma[:, None], self.xi, self.tau)
        self.h1 = ps * z * r[:, None] ** self.power

    def _assemble(self) -> np.ndarray:
        """Dense operator mapping scaled ``Phi_l`` grid values to ``Phi_{l+1}``."""
        if self.size > MAX_OPERATOR_SIZE:
            raise QuadratureError(
                f"iterate grid has {self.size} nodes, above the dense limit {MAX_OPERATOR_SIZE}; "
                "reduce grid_time_nodes / grid_space_nodes")
        field = self.field
        n = field.n
        tpl = self.template
        op = np.zeros((self.size, self.size))
        r_nodes = tpl.r_nodes
        m_per = tpl.values.shape[1]
        for k in range(tpl.kt):
            eta = self._node_eta[k]                          # (m, n)
            sig = self._node_sigma[k]
            zeta, s, after, before, w = convolution_nodes(
                eta, np.full(m_per, sig), self.xi, self.tau, self.quad, self.spread)
            a_t = field.eval_a(eta, sig)
            b_t = field.eval_b(eta, sig)
            q_t = field.eval_q(eta, sig)
            shape = w.shape                                  # (m, Ns, Q)
            ss = np.broadcast_to(s[:, :, None], shape)
            a_s = field.eval_a(zeta, ss)
            ainv, det = batch_inverse(a_s)
            p = w.size
            bshape = shape + (n,)
            ps, z = _accel.phi1_kernel(
                (eta[:, None, None, :] - zeta).reshape(p, n),
                np.broadcast_to(before[:, :, None], shape).reshape(p),
                np.broadcast_to(a_t[:, None, None], shape + (n, n)).reshape(p, n, n),
                np.broadcast_to(b_t[:, None, None], bshape).reshape(p, n),
                np.broadcast_to(q_t[:, None, None], shape).reshape(p),
                a_s.reshape(p, n, n), ainv.reshape(p, n, n), (1.0 / det).reshape(p))
            rs = np.broadcast_to(after[:, :, None], shape).reshape(p)
            weight = w.reshape(p) * ps * z * rs ** (-self.power) * r_nodes[k] ** self.power
            rows = k * m_per + np.repeat(np.arange(m_per), shape[1] * shape[2])
            y = (zeta.reshape(p, n) - self.xi) / np.sqrt(rs)[:, None]
            if not np.all(np.isfinite(weight)):
                raise QuadratureError(f"non-finite Phi_1 weight while assembling time slice {k}")
            _accel.scatter_rows(op, rows, weight, tpl.time_coordinate(rs), y, tpl.grid)
        return op

    @property
    def operator(self) -> np.ndarray:
        if self._operator is None:
            self._operator = self._assemble()
        return self._operator

    def _iterate(self):
        h = [self.h1]
        scale = float(np.abs(self.h1).max())
        self.converged = True
        if scale == 0.0:
            self.scaled_iterates = h
            self.phi_scaled = self.h1.copy()
            return
        flat = self.h1.ravel()
        op = self.operator
        self.converged = False
        while len(h) < self.ell_max:
            flat = op @ flat
            h.append(flat.reshape(self.h1.shape))
            if np.abs(flat).max() <= self.tol * scale:
                self.converged = True
                break
        if not self.converged:
            warnings.warn(f"Levi series not converged after {self.ell_max} iterates "
                          f"(last/first = {np.abs(flat).max() / scale:.2e})", RuntimeWarning,
                          stacklevel=3)
        self.scaled_iterates = h
        self.phi_scaled = np.sum(h, axis=0)

    # -- results ----------------------------------------------------------
    @property
    def terms_used(self) -> int:
        return len(self.scaled_iterates)

    @property
    def is_trivial(self) -> bool:
        return not np.any(self.h1)

    def iterates(self) -> list:
        return [self.template.with_values(h, f"Phi_{i + 1}")
                for i, h in enumerate(self.scaled_iterates)]

    def phi_kernel(self) -> GridKernel:
        return self.template.with_values(self.phi_scaled, "Phi")

    def resolvent_kernel(self) -> GridKernel:
        """``Phi`` from a direct solve of the discrete Volterra equation ``(I - A) Phi = Phi_1``."""
        if self.is_trivial:
            return self.phi_kernel()
        sol = np.linalg.solve(np.eye(self.size) - self.operator, self.h1.ravel())
        return self.template.with_values(sol.reshape(self.h1.shape), "Phi (resolvent)")

    def _targets(self, x, t):
        n = self.field.n
        x = np.asarray(x, dtype=float)
        if n == 1 and (x.ndim == 0 or x.shape[-1] != 1):
            x = x[..., None]
        shape = np.broadcast_shapes(x.shape[:-1], np.shape(t))
        x = np.broadcast_to(x, shape + (n,)).reshape(-1, n)
        t = np.broadcast_to(np.asarray(t, float), shape).reshape(-1)
        if np.any(t - self.tau > self.t_max * (1 + 1e-9)):
            raise QuadratureError("target time beyond the expansion window")
        if np.any(t <= self.tau):
            raise ValueError("target times must exceed the base time")
        return x, t, shape

    def convolve_grid(self, scaled_values, x, t, kind: str = "phi1", chunk: int = 4096):
        """``int int f(x, t; zeta, s) g(zeta, s)`` with ``g`` on the grid.

        ``kind`` selects ``f``: ``"phi1"`` for ``Phi_1`` (gives the next
        iterate at arbitrary points) or ``"z"`` for the parametrix (gives
        the correction term of ``E``).
        """
        x, t, shape = self._targets(x, t)
        field = self.field
        n = field.n
        tpl = self.template
        out = np.empty(len(t))
        per = self.quad.time_nodes * self.quad.spatial_nodes_per_axis ** n
        step = max(1, chunk * 64 // per)
        for i0 in range(0, len(t), step):
            xs, ts = x[i0:i0 + step], t[i0:i0 + step]
            zeta, s, after, before, w = convolution_nodes(xs, ts, self.xi, self.tau,
                                                          self.quad, self.spread)
            wshape = w.shape
            p = w.size
            ss = np.broadcast_to(s[:, :, None], wshape)
            rs = np.broadcast_to(after[:, :, None], wshape).reshape(p)
            y = (zeta.reshape(p, n) - self.xi) / np.sqrt(rs)[:, None]
            g = _accel.gather_values(scaled_values, tpl.time_coordinate(rs), y, tpl.grid) \
                * rs ** (-self.power)
            a_s = field.eval_a(zeta, ss)
            ainv, det = batch_inverse(a_s)
            dx = (xs[:, None, None, :] - zeta).reshape(p, n)
            dts = np.broadcast_to(before[:, :, None], wshape).reshape(p)
            if kind == "z":
                f = _accel.z_kernel(dx, dts, ainv.reshape(p, n, n), (1.0 / det).reshape(p))
            else:
                a_t = field.eval_a(xs, ts)
                b_t = field.eval_b(xs, ts)
                q_t = field.eval_q(xs, ts)
                ps, z = _accel.phi1_kernel(
                    dx, dts,
                    np.broadcast_to(a_t[:, None, None], wshape + (n, n)).reshape(p, n, n),
                    np.broadcast_to(b_t[:, None, None], wshape + (n,)).reshape(p, n),
                    np.broadcast_to(q_t[:, None, None], wshape).reshape(p),
                    a_s.reshape(p, n, n), ainv.reshape(p, n, n), (1.0 / det).reshape(p))
                f = ps * z
            out[i0:i0 + step] = (w.reshape(p) * f * g).reshape(wshape[0], -1).sum(axis=1)
        return out.reshape(shape)

    def phi1_at(self, x, t):
        x, t, shape = self._targets(x, t)
        ps, z = phi1_batch(self.field, x, t, self.xi, self.tau)
        return (ps * z).reshape(shape)

    def iterate_at(self, ell: int, x, t):
        """``Phi_ell`` at arbitrary points: analytic for ``ell = 1``, one convolution otherwise."""
        if ell == 1:
            return self.phi1_at(x, t)
        if ell - 2 >= len(self.scaled_iterates):
            raise ValueError(f"iterate {ell - 1} is not available")
        return self.convolve_grid(self.scaled_iterates[ell - 2], x, t, "phi1")

    def phi_at(self, x, t):
        """``Phi = sum Phi_l`` at arbitrary points (each term evaluated directly)."""
        total = self.phi1_at(x, t)
        if self.is_trivial or len(self.scaled_iterates) == 1:
            return total
        prev = np.sum(self.scaled_iterates[:-1], axis=0)
        return total + self.convolve_grid(prev, x, t, "phi1")

    def correction(self, x, t):
        if self.is_trivial:
            x, t, shape = self._targets(x, t)
            return np.zeros(shape)
        return self.convolve_grid(self.phi_scaled, x, t, "z")

    def E(self, x, t):
        """Fundamental solution ``E(x, t; xi, tau) = Z + Z * Phi``."""
        x, t, shape = self._targets(x, t)
        z = z_batch(self.field, x, t, self.xi, self.tau)
        dt = t - self.tau
        degenerate = dt < DEGENERATE_DT
        out = z.copy()
        if np.any(degenerate):
            warnings.warn(f"{int(degenerate.sum())} queries with t - tau < {DEGENERATE_DT:g}: "
                          "returning the parametrix alone", DegenerateIntervalWarning, stacklevel=2)
        live = ~degenerate
        if np.any(live) and not self.is_trivial:
            out[live] += self.convolve_grid(self.phi_scaled, x[live], t[live], "z")
        return out.reshape(shape)


# ---------------------------------------------------------------------------
# module-level operations
# ---------------------------------------------------------------------------
def levi_iterates(field: CoefficientField, base, t_max: float,
                  quad: Optional[QuadratureScheme] = None, ell_max: int = 12,
                  tol: float = 0.0) -> list:
    """``Phi_1 .. Phi_ell_max`` on grids in ``(eta, sigma)`` for a fixed base ``(xi, tau)``.

    With the default ``tol = 0`` exactly ``ell_max`` iterates are produced
    (fewer only when ``Phi_1`` vanishes identically).
    """
    xi, tau = base
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        exp = LeviExpansion(field, xi, tau, t_max, quad, tol=tol, ell_max=ell_max)
    return exp.iterates()


@dataclass
class SeriesResult:
    value: float
    tail_bound: float
    terms_used: int
    converged: bool
    empirical_converged: bool
    terms: list = dc_field(default_factory=list)


def phi_series(field: CoefficientField, qy: KernelQuery, quad: Optional[QuadratureScheme] = None,
               tol: float = 1e-4, ell_max: int = 12,
               expansion: Optional[LeviExpansion] = None) -> SeriesResult:
    """Partial sum of ``Phi`` at one query with the analytic Stirling tail bound.

    Terms are added until the majorant of the remaining tail drops below
    ``tol`` or the iterates themselves have decayed (relative ``tol``), up
    to ``ell_max`` terms. ``converged`` reports whether the analytic tail
    criterion was met; when it was not, the returned ``tail_bound`` is the
    one achieved.
    """
    if qy.dt > 1.0:
        raise ValueError("phi_series is restricted to t - tau <= 1")
    exp = expansion or LeviExpansion(field, qy.xi, qy.tau, qy.dt, quad, tol=tol, ell_max=ell_max)
    sc = series_constants(field)
    terms = []
    value = 0.0
    tail = math.inf
    analytic = False
    for ell in range(1, exp.terms_used + 1):
        term = float(exp.iterate_at(ell, qy.x[None, :], qy.t)[0])
        terms.append(term)
        value += term
        tail = float(tail_envelope(sc, qy.n, ell + 1, qy.dt, qy.rho))
        if tail < tol:
            analytic = True
            break
    return SeriesResult(value, tail, len(terms), analytic, exp.converged, terms)


def fundamental_solution(field: CoefficientField, qy: KernelQuery,
                         quad: Optional[QuadratureScheme] = None, tol: float = 1e-4,
                         ell_max: int = 12) -> float:
    """``E(x, t; xi, tau)`` by direct assembly from the Levi series."""
    if qy.dt < DEGENERATE_DT:
        warnings.warn(f"t - tau = {qy.dt:g} below {DEGENERATE_DT:g}: returning the parametrix alone",
                      DegenerateIntervalWarning, stacklevel=2)
        return float(z_batch(field, qy.x, qy.t, qy.xi, qy.tau))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        exp = LeviExpansion(field, qy.xi, qy.tau, qy.dt, quad, tol=tol, ell_max=ell_max)
    if not exp.converged:
        raise SeriesTruncationError(f"Levi series not converged within {ell_max} terms")
    return float(exp.E(qy.x[None, :], qy.t)[0])


def lattice(lo, hi, step: float):
    """Tensor midpoint lattice on the box ``[lo, hi]``: points ``(P, n)`` and cell volume."""
    lo = np.atleast_1d(np.asarray(lo, float))
    hi = np.atleast_1d(np.asarray(hi, float))
    if np.any(hi <= lo):
        return np.empty((0, lo.shape[0])), 0.0
    counts = np.maximum(np.ceil((hi - lo) / step).astype(int), 2)
    axes = [lo[i] + (hi[i] - lo[i]) * (np.arange(c) + 0.5) / c for i, c in enumerate(counts)]
    grids = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([g.ravel() for g in grids], axis=-1)
    return pts, float(np.prod((hi - lo) / counts))


def composition_lattice(field: CoefficientField, xi, x_targets, tau, sigma, t,
                        quad: QuadratureScheme):
    """Spatial lattice for ``int E(x, t; eta, sigma) E(eta, sigma; xi, tau) d eta``.

    The box is the intersection of the windows around ``xi`` (width set by
    ``sigma - tau``) and around the hull of the targets (width ``t - sigma``).
    """
    k = quad.spatial_radius_factor
    xi = np.atleast_1d(np.asarray(xi, float))
    xt = np.atleast_2d(np.asarray(x_targets, float))
    r_src = k * math.sqrt(2 * field.M * (sigma - tau))
    r_dst = k * math.sqrt(2 * field.M * (t - sigma))
    lo = np.maximum(xi - r_src, xt.min(axis=0) - r_dst)
    hi = np.minimum(xi + r_src, xt.max(axis=0) + r_dst)
    width = math.sqrt(2 * field.kappa * min(sigma - tau, t - sigma))
    return lattice(lo, hi, quad.lattice_step * width)


@dataclass
class ReproducingResult:
    lhs: float
    rhs: float
    rel_residual: float


def reproducing_check(field: CoefficientField, qy: KernelQuery, sigma: float,
                      quad: Optional[QuadratureScheme] = None, tol: float = 1e-4,
                      ell_max: int = 12) -> ReproducingResult:
    """Compare ``int E(x,t;eta,sigma) E(eta,sigma;xi,tau) d eta`` with ``E(x,t;xi,tau)``."""
    if not qy.tau < sigma < qy.t:
        raise ValueError("sigma must lie strictly between tau and t")
    quad = quad or QuadratureScheme.for_field(field)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        direct = LeviExpansion(field, qy.xi, qy.tau, qy.dt, quad, tol, ell_max)
        rhs = float(direct.E(qy.x[None, :], qy.t)[0])
        eta, vol = composition_lattice(field, qy.xi, qy.x[None, :], qy.tau, sigma, qy.t, quad)
        first = direct.E(eta, sigma)
        second = np.empty(len(eta))
        for i, e in enumerate(eta):
            exp = LeviExpansion(field, e, sigma, qy.t - sigma, quad, tol, ell_max)
            second[i] = exp.E(qy.x[None, :], qy.t)[0]
    lhs = float(np.sum(first * second) * vol)
    return ReproducingResult(lhs, rhs, abs(lhs - rhs) / abs(rhs))
