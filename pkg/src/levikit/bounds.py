"""Explicit constants of the two-sided Gaussian bound, the envelopes, and long-time composition.

The constants can be astronomically large or small (``S`` easily exceeds
``1e100`` for moderate Hoelder constants, which drives ``delta`` below the
smallest double), so every constant is carried as a logarithm alongside a
float that may be ``inf`` or ``0``. Envelope checks work in log space.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field as dc_field
from typing import Iterable, Optional

import numpy as np

from .coeffs import CoefficientField, batch_inverse
from .levi import (
    DEGENERATE_DT,
    LeviExpansion,
    QuadratureScheme,
    _safe_exp,
    lattice,
    series_constants,
)
from .parametrix import KernelQuery

__all__ = [
    "BoundConstants",
    "compute_constants",
    "constants_report",
    "upper_envelope",
    "lower_envelope",
    "log_upper_envelope",
    "log_lower_envelope",
    "epsilon_upper_constants",
    "precise_upper_envelope",
    "precise_gamma",
    "fit_precise_upper",
    "ScaledQuery",
    "log_kernel_short_time",
    "check_two_sided",
    "TwoSidedReport",
    "build_chain",
    "chain_length",
    "compose_long_time",
    "LongTimeKernel",
    "HorizonFallbackWarning",
    "kernel_values",
    "resolve_horizon",
]


class HorizonFallbackWarning(UserWarning):
    pass


def _log(v: float) -> float:
    return math.log(v) if v > 0 else -math.inf


@dataclass(frozen=True)
class BoundConstants:
    n: int
    kappa: float
    M: float
    beta: float
    c: float
    d: float
    C: float
    Ctilde: float
    Cbar: float
    Lambda: float
    S: float
    Chat: float
    mu: float
    delta: float
    nu: float
    C0: float
    aleph0: float
    aleph1: float
    aleph2: float
    aleph3: float
    log_S: float
    log_Chat: float
    log_delta: float
    log_aleph1: float
    log_aleph2: float

    @property
    def d_closed_form(self) -> float:
        """``d`` written out in closed form; equals ``4 |ln nu| / kappa``."""
        n, kappa, M = self.n, self.kappa, self.M
        inner = (math.e * 2 ** (3 * n) * (M / kappa) ** (n / 2) * math.gamma(n / 2 + 1))
        return 4 * math.log(inner) / kappa

    @property
    def horizon(self) -> float:
        """Direct-assembly horizon ``min(delta, 1)``."""
        return min(self.delta, 1.0)

    def scaled(self, **changes) -> "BoundConstants":
        """Copy with some fields replaced (log companions follow the floats)."""
        from dataclasses import replace
        if "aleph2" in changes and "log_aleph2" not in changes:
            changes["log_aleph2"] = _log(changes["aleph2"])
        if "aleph1" in changes and "log_aleph1" not in changes:
            changes["log_aleph1"] = _log(changes["aleph1"])
        return replace(self, **changes)


def compute_constants(field: CoefficientField, c: Optional[float] = None) -> BoundConstants:
    """Every constant of the two-sided bound for ``field``.

    ``c`` overrides the Gaussian rate ``1/(8M)`` of the upper bound; the
    lower-bound constants do not depend on it except through ``S``.
    """
    n, kappa, M = field.n, field.kappa, field.M
    sc = series_constants(field, c)
    c = sc.c
    beta = sc.beta
    log_B = -math.log(beta)                     # B(1, beta) = 1 / beta
    log_head = -(n / 2) * math.log(4 * kappa * math.pi)
    log_corr = sc.log_S + log_B - (n / 2) * math.log(kappa * c)
    log_Chat = float(np.logaddexp(log_head, log_corr))
    mu = math.exp(-1) / (2 * (4 * math.pi * M) ** (n / 2))
    if sc.log_S == -math.inf:
        log_delta = 0.0
    else:
        log_delta = min(0.0, (-1 - (n / 2) * math.log(4 * math.pi * M) + (n / 2) * math.log(kappa * c)
                              - math.log(2) - sc.log_S - log_B) / beta)
    nu = kappa ** (n / 2) / (math.e * M ** (n / 2) * 2 ** (3 * n) * math.gamma(n / 2 + 1))
    d = 4 * abs(math.log(nu)) / kappa
    C0 = min(mu, kappa ** (-n / 2) * math.exp(-abs(math.log(nu))))
    log_ct = math.log(sc.Ctilde)
    up = log_ct + log_Chat
    aleph3 = max(0.0, up)
    log_aleph2 = -log_ct + aleph3
    low = log_ct + math.log(C0)
    aleph0 = math.exp(-log_ct + min(0.0, low))
    if low >= 0:
        aleph1, log_aleph1 = 0.0, -math.inf
    else:
        log_aleph1 = math.log(-low) - log_delta
        aleph1 = _safe_exp(log_aleph1)
    return BoundConstants(
        n=n, kappa=kappa, M=M, beta=beta, c=c, d=d, C=sc.C, Ctilde=sc.Ctilde, Cbar=sc.Cbar,
        Lambda=sc.Lambda, S=sc.S, Chat=_safe_exp(log_Chat), mu=mu, delta=_safe_exp(log_delta),
        nu=nu, C0=C0, aleph0=aleph0, aleph1=aleph1, aleph2=_safe_exp(log_aleph2), aleph3=aleph3,
        log_S=sc.log_S, log_Chat=log_Chat, log_delta=log_delta, log_aleph1=log_aleph1,
        log_aleph2=log_aleph2)


_FORMULAS = {
    "beta": "alpha / 2",
    "c": "1 / (8 M)",
    "d": "4 |ln nu| / kappa",
    "C": "(4 kappa pi)^(-n/2) max_lam [N1 (1/(2 kappa) + lam^2/(4 kappa^2)) (1+lam^2)^(alpha/2) "
         "+ N2 (lam/kappa + 1)] exp(-c lam^2)",
    "Ctilde": "(4 pi / c)^(n/2)",
    "Cbar": "1 / Ctilde",
    "Lambda": "C Ctilde Gamma(beta)",
    "S": "C + Cbar sum_{l>=2} Lambda^l / Gamma(l beta)",
    "Chat": "(4 kappa pi)^(-n/2) + S B(1, beta) / (kappa c)^(n/2)",
    "mu": "e^-1 / (2 (4 pi M)^(n/2))",
    "delta": "min(1, [e^-1 (4 pi M)^(-n/2) (kappa c)^(n/2) / (2 S B(1, beta))]^(1/beta))",
    "nu": "kappa^(n/2) / (e M^(n/2) 2^(3n) Gamma(n/2 + 1))",
    "C0": "min(mu, kappa^(-n/2) e^(-|ln nu|))",
    "aleph0": "Ctilde^-1 exp(min(0, ln(Ctilde C0)))",
    "aleph1": "-min(0, ln(Ctilde C0) / delta)",
    "aleph2": "Ctilde^-1 exp(max(0, ln(Ctilde Chat)))",
    "aleph3": "max(0, ln(Ctilde Chat))",
}


def constants_report(k: BoundConstants) -> dict:
    """JSON-ready mapping ``name -> {value, log, formula}``."""
    out = {}
    logs = {"S": k.log_S, "Chat": k.log_Chat, "delta": k.log_delta,
            "aleph1": k.log_aleph1, "aleph2": k.log_aleph2}
    for name, formula in _FORMULAS.items():
        val = getattr(k, name)
        entry = {"value": _json_float(val), "formula": formula}
        if name in logs:
            entry["log"] = _json_float(logs[name])
        out[name] = entry
    out["d_closed_form"] = {"value": k.d_closed_form,
                        "formula": "4 ln[e 2^(3n) (M/kappa)^(n/2) Gamma(n/2+1)] / kappa"}
    return out


def _json_float(v: float):
    if math.isfinite(v):
        return v
    return "inf" if v > 0 else ("-inf" if v < 0 else "nan")


def dumps_report(k: BoundConstants) -> str:
    return json.dumps(constants_report(k), indent=2, sort_keys=True)


# ---------------------------------------------------------------------------
# envelopes
# ---------------------------------------------------------------------------
def _dt_r2(qy: KernelQuery):
    if not qy.t > qy.tau:
        raise ValueError("envelope needs t > tau")
    return qy.dt, float(np.sum((qy.x - qy.xi) ** 2))


def log_upper_envelope(k: BoundConstants, log_dt, rho2):
    """``log`` of the upper envelope given ``log(t - tau)`` and ``rho^2 = |x - xi|^2 / (t - tau)``."""
    log_dt = np.asarray(log_dt, dtype=float)
    return k.log_aleph2 + k.aleph3 * np.exp(log_dt) - (k.n / 2) * log_dt - k.c * np.asarray(rho2)


def log_lower_envelope(k: BoundConstants, log_dt, rho2):
    log_dt = np.asarray(log_dt, dtype=float)
    with np.errstate(over="ignore"):
        growth = np.exp(k.log_aleph1 + log_dt) if k.log_aleph1 > -math.inf else 0.0
    return math.log(k.aleph0) - growth - (k.n / 2) * log_dt - k.d * np.asarray(rho2)


def upper_envelope(k: BoundConstants, qy: KernelQuery) -> float:
    dt, r2 = _dt_r2(qy)
    return _safe_exp(float(log_upper_envelope(k, math.log(dt), r2 / dt)))


def lower_envelope(k: BoundConstants, qy: KernelQuery) -> float:
    dt, r2 = _dt_r2(qy)
    v = float(log_lower_envelope(k, math.log(dt), r2 / dt))
    return math.exp(v) if v > -745 else 0.0


def epsilon_upper_constants(field: CoefficientField, eps: float):
    """``(c_eps, aleph2_eps, aleph3_eps)`` for the upper bound with rate ``eps / (4M)``."""
    if not 0 < eps < 1:
        raise ValueError("eps must lie in (0, 1)")
    c_eps = eps / (4 * field.M)
    k = compute_constants(field, c=c_eps)
    return c_eps, k.aleph2, k.aleph3


def precise_gamma(alpha: float) -> float:
    return (4 * alpha + 8) / (3 * alpha + 4)


def precise_upper_envelope(field: CoefficientField, qy: KernelQuery, c1: float, c2: float) -> float:
    """Leading parametrix bound times ``1 + c1 dt^(alpha/2) exp(c2 (dt + rho^gamma))``.

    Only for fields without drift and potential; valid for every ``t - tau``.
    """
    if not field.drift_free:
        raise ValueError("the refined upper bound needs b = 0 and q = 0")
    if c1 <= 0 or c2 <= 0:
        raise ValueError("c1 and c2 must be positive")
    return float(_precise(field, np.array([qy.dt]), np.array([qy.rho]), c1, c2)[0])


def _precise(field, dt, rho, c1, c2):
    n, kappa, M, alpha = field.n, field.kappa, field.M, field.alpha
    g = precise_gamma(alpha)
    lead = (4 * kappa * math.pi * dt) ** (-n / 2) * np.exp(-rho ** 2 / (4 * M))
    return lead * (1 + c1 * dt ** (alpha / 2) * np.exp(c2 * (dt + rho ** g)))


@dataclass
class PreciseFit:
    c1: float
    c2: float
    safety: float
    train_worst_log_margin: float


def fit_precise_upper(field: CoefficientField, dt, rho, E, c2_grid=None,
                      safety: float = 2.0, floor: float = 1e-6) -> PreciseFit:
    """Fit ``(c1, c2)`` so the refined envelope dominates the training values ``E``.

    For each ``c2`` on a grid the smallest admissible ``c1`` is the maximum
    of ``(E / lead - 1) / (dt^(alpha/2) e^{c2 (dt + rho^gamma)})``; the pair
    minimising the mean log-overshoot is kept and ``c1`` is multiplied by
    ``safety`` to leave room for unseen queries.
    """
    dt = np.asarray(dt, float)
    rho = np.asarray(rho, float)
    E = np.asarray(E, float)
    c2_grid = np.geomspace(1e-3, 10.0, 61) if c2_grid is None else np.asarray(c2_grid)
    n, kappa, M, alpha = field.n, field.kappa, field.M, field.alpha
    g = precise_gamma(alpha)
    lead = (4 * kappa * math.pi * dt) ** (-n / 2) * np.exp(-rho ** 2 / (4 * M))
    excess = E / lead - 1.0
    best = None
    for c2 in c2_grid:
        grow = dt ** (alpha / 2) * np.exp(c2 * (dt + rho ** g))
        c1 = max(floor, float(np.max(excess / grow)))
        env = lead * (1 + c1 * grow)
        score = float(np.mean(np.log(env / E)))
        if best is None or score < best[0]:
            best = (score, c1, float(c2))
    _, c1, c2 = best
    env = _precise(field, dt, rho, c1, c2)
    return PreciseFit(c1 * safety, c2, safety, float(np.min(np.log(env / E))))


# ---------------------------------------------------------------------------
# two-sided certification
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class ScaledQuery:
    """A query given by ``log(t - tau)`` and ``y = (x - xi) / sqrt(t - tau)``.

    Lets the short-time regime be sampled when ``t - tau`` is below the
    smallest positive double.
    """

    xi: np.ndarray
    tau: float
    log_dt: float
    y: np.ndarray

    @property
    def rho2(self) -> float:
        return float(np.sum(np.asarray(self.y) ** 2))


def log_kernel_short_time(field: CoefficientField, sq: ScaledQuery) -> float:
    """``log E`` for ``t - tau`` below the degenerate threshold, where ``E`` is the parametrix.

    ``log Z = 1/2 log det a^-1 - n/2 log(4 pi dt) - <a^-1 y, y> / 4`` with
    ``a`` frozen at the source point.
    """
    if sq.log_dt >= math.log(DEGENERATE_DT):
        raise ValueError("scaled evaluation is reserved for t - tau below the degenerate threshold")
    xi = np.atleast_1d(np.asarray(sq.xi, float))
    ainv, det = batch_inverse(field.eval_a(xi, sq.tau))
    y = np.atleast_1d(np.asarray(sq.y, float))
    quad = float(y @ ainv @ y)
    return float(-0.5 * math.log(det) - (field.n / 2) * (math.log(4 * math.pi) + sq.log_dt)
                 - quad / 4)


@dataclass
class TwoSidedEntry:
    log_dt: float
    rho2: float
    log_E: float
    margin_low: float        # log E - log lower
    margin_high: float       # log upper - log E

    @property
    def ok(self) -> bool:
        return self.margin_low >= 0 and self.margin_high >= 0


@dataclass
class TwoSidedReport:
    entries: list = dc_field(default_factory=list)

    @property
    def violations(self) -> list:
        return [e for e in self.entries if not e.ok]

    @property
    def worst_low(self) -> float:
        return min(e.margin_low for e in self.entries)

    @property
    def worst_high(self) -> float:
        return min(e.margin_high for e in self.entries)

    @property
    def passed(self) -> bool:
        return not self.violations

    def summary(self) -> dict:
        return {"queries": len(self.entries), "violations": len(self.violations),
                "worst_margin_low": _json_float(self.worst_low),
                "worst_margin_high": _json_float(self.worst_high)}


def check_two_sided(field: CoefficientField, E_values: Iterable, k: BoundConstants) -> TwoSidedReport:
    """Check ``lower <= E <= upper`` per query; margins are log-ratios.

    ``E_values`` holds ``(KernelQuery, E)`` pairs or ``(ScaledQuery, log E)``
    pairs. A non-positive ``E`` is a violation of the lower bound.
    """
    report = TwoSidedReport()
    for qy, val in E_values:
        if isinstance(qy, ScaledQuery):
            log_dt, rho2, log_e = qy.log_dt, qy.rho2, float(val)
        else:
            log_dt = math.log(qy.dt)
            rho2 = qy.rho ** 2
            log_e = math.log(val) if val > 0 else -math.inf
        lo = float(log_lower_envelope(k, log_dt, rho2))
        hi = float(log_upper_envelope(k, log_dt, rho2))
        m_low = log_e - lo if lo > -math.inf else math.inf
        if log_e == -math.inf:
            m_low = -math.inf
        report.entries.append(TwoSidedEntry(log_dt, rho2, log_e, m_low, hi - log_e))
    return report


# ---------------------------------------------------------------------------
# chains and long-time composition
# ---------------------------------------------------------------------------
def chain_length(x, xi, dt: float, kappa: float) -> int:
    """Smallest ``m >= 1`` with ``4 |x - xi|^2 / m <= kappa dt``."""
    r2 = float(np.sum((np.atleast_1d(np.asarray(x, float)) - np.atleast_1d(np.asarray(xi, float))) ** 2))
    return max(1, math.ceil(4 * r2 / (kappa * dt) - 1e-12))


def build_chain(x, xi, m: int) -> list:
    """Points ``x_k = x + (k/m)(xi - x)``, ``k = 0..m``."""
    if m < 1:
        raise ValueError("chain needs m >= 1")
    x = np.atleast_1d(np.asarray(x, float))
    xi = np.atleast_1d(np.asarray(xi, float))
    return [x + (k / m) * (xi - x) for k in range(m + 1)]


class LongTimeKernel:
    """``E(., .; xi, tau)`` beyond the direct horizon via the reproducing property.

    Intermediate levels ``sigma_k = tau + k * step`` carry the density
    ``v_k(eta) = E(eta, sigma_k; xi, tau)`` on a spatial lattice; level
    ``k+1`` is obtained from level ``k`` by quadrature against kernels based
    at the lattice points. A query at time ``t`` is closed from the level
    ``k`` with ``t - sigma_k`` in ``(horizon - step, horizon]``.

    Parameters
    ----------
    horizon : longest time span assembled directly.
    step : level spacing (default ``horizon / 2``); ``step = horizon``
        gives the equal-slice scheme.
    cutoff : lattice points whose density weight is below ``cutoff`` times
        the largest are dropped.
    x_hull : points whose convex hull bounds every later target.
    """

    def __init__(self, field: CoefficientField, xi, tau: float, t_end: float, horizon: float,
                 x_hull, quad: Optional[QuadratureScheme] = None, tol: float = 1e-4,
                 ell_max: int = 12, step: Optional[float] = None, cutoff: float = 1e-12):
        if horizon <= 0 or t_end <= tau:
            raise ValueError("need a positive horizon and t_end > tau")
        self.field = field
        self.xi = np.atleast_1d(np.asarray(xi, float))
        self.tau = float(tau)
        self.t_end = float(t_end)
        self.horizon = float(horizon)
        self.step = float(step) if step is not None else self.horizon / 2
        self.quad = quad or QuadratureScheme.for_field(field)
        self.tol, self.ell_max = tol, ell_max
        self.cutoff = cutoff
        hull = np.atleast_2d(np.asarray(x_hull, float))
        self.hull = (hull.min(axis=0), hull.max(axis=0))
        span = self.t_end - self.tau
        top = max(0, math.ceil((span - self.horizon) / self.step - 1e-12))
        self.levels = [self.tau + k * self.step for k in range(1, top + 1)]
        self._lattices = []
        self._densities = []
        self.builds = 0
        self._run()

    def _expansion(self, base, sigma):
        self.builds += 1
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            return LeviExpansion(self.field, base, sigma, self.horizon, self.quad,
                                 self.tol, self.ell_max)

    def _lattice(self, sigma):
        k = self.quad.spatial_radius_factor
        M, kappa = self.field.M, self.field.kappa
        r_src = k * math.sqrt(2 * M * (sigma - self.tau))
        r_dst = k * math.sqrt(2 * M * max(self.t_end - sigma, 0.0))
        lo = np.maximum(self.xi - r_src, self.hull[0] - r_dst)
        hi = np.minimum(self.xi + r_src, self.hull[1] + r_dst)
        width = math.sqrt(2 * kappa * min(sigma - self.tau, self.step))
        return lattice(lo, hi, self.quad.lattice_step * width)

    def _run(self):
        self.direct = self._expansion(self.xi, self.tau)
        self._bases = []          # per level: (weights, expansions)
        for k, sigma in enumerate(self.levels):
            pts, vol = self._lattice(sigma)
            if k == 0:
                dens = self.direct.E(pts, sigma) if len(pts) else np.zeros(0)
            else:
                dens = self._push(k - 1, pts, np.full(len(pts), sigma))
            # bases carrying a negligible share of the density are not expanded
            mass = np.abs(dens) * vol
            keep = mass > self.cutoff * max(float(mass.max(initial=0.0)), 1e-300)
            pts, dens = pts[keep], dens[keep]
            self._lattices.append((pts, vol))
            self._densities.append(dens)
            self._bases.append((dens * vol, [self._expansion(p, sigma) for p in pts]))

    def _push(self, k, x, t):
        """``sum_eta w_eta E(x, t; eta, sigma_k)`` over the lattice of level ``k``."""
        weights, exps = self._bases[k]
        acc = np.zeros(len(t))
        for e, w in zip(exps, weights):
            acc += w * e.E(x, t)
        return acc

    def level_for(self, t: float) -> int:
        """Index of the closing level for time ``t`` (``-1`` means direct)."""
        span = t - self.tau
        if span <= self.horizon * (1 + 1e-12):
            return -1
        return min(len(self.levels), math.ceil((span - self.horizon) / self.step - 1e-12)) - 1

    def E(self, x, t) -> np.ndarray:
        n = self.field.n
        x = np.asarray(x, float)
        if n == 1 and (x.ndim == 0 or x.shape[-1] != 1):
            x = x[..., None]
        shape = np.broadcast_shapes(x.shape[:-1], np.shape(t))
        x = np.broadcast_to(x, shape + (n,)).reshape(-1, n)
        t = np.broadcast_to(np.asarray(t, float), shape).reshape(-1)
        if np.any(t > self.t_end * (1 + 1e-12)) or np.any(t <= self.tau):
            raise ValueError("query time outside (tau, t_end]")
        lv = np.array([self.level_for(tt) for tt in t])
        out = np.empty(len(t))
        for k in np.unique(lv):
            sel = lv == k
            if k == -1:
                out[sel] = self.direct.E(x[sel], t[sel])
            else:
                out[sel] = self._push(int(k), x[sel], t[sel])
        return out.reshape(shape)


def compose_long_time(field: CoefficientField, qy: KernelQuery, quad: Optional[QuadratureScheme] = None,
                      tol: float = 1e-4, horizon: Optional[float] = None, slices: Optional[int] = None,
                      max_slices: int = 64, ell_max: int = 12) -> float:
    """``E`` at one query by splitting ``[tau, t]`` into ``m`` equal slices.

    ``m`` is the smallest count with slice length at most ``horizon``
    (default ``min(delta, 1)``) unless ``slices`` is given. When that count
    exceeds ``max_slices`` the horizon falls back to 1 with a warning.
    """
    if horizon is None:
        horizon = compute_constants(field).horizon
    if slices is None:
        slices = max(1, math.ceil(qy.dt / horizon - 1e-12)) if horizon > 0 else math.inf
        if slices > max_slices:
            warnings.warn(f"horizon {horizon:.3g} needs {slices} slices; falling back to horizon 1",
                          HorizonFallbackWarning, stacklevel=2)
            slices = max(1, math.ceil(qy.dt - 1e-12))
    if slices < 1:
        raise ValueError("slices must be >= 1")
    dt_slice = qy.dt / slices
    if slices == 1:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            exp = LeviExpansion(field, qy.xi, qy.tau, qy.dt, quad, tol, ell_max)
        return float(exp.E(qy.x[None, :], qy.t)[0])
    lt = LongTimeKernel(field, qy.xi, qy.tau, qy.t, dt_slice * (1 + 1e-9), qy.x[None, :], quad,
                        tol, ell_max, step=dt_slice)
    return float(lt.E(qy.x[None, :], qy.t)[0])


def resolve_horizon(k: BoundConstants, span: float, horizon: Optional[float] = None,
                    max_slices: int = 64) -> float:
    """Direct-assembly horizon for a time span, falling back to 1 when ``min(delta, 1)`` is unusable."""
    if horizon is not None and not horizon > 0:
        raise ValueError("horizon must be positive")
    h = k.horizon if horizon is None else float(horizon)
    if h < DEGENERATE_DT or span / h > max_slices:
        warnings.warn(f"horizon {h:.3g} needs more than {max_slices} slices over {span:.3g}; "
                      "falling back to horizon 1", HorizonFallbackWarning, stacklevel=2)
        h = 1.0
    return h


def kernel_values(field: CoefficientField, xi, tau: float, x, t, quad=None, tol: float = 1e-4,
                  horizon: Optional[float] = None, constants: Optional[BoundConstants] = None):
    """``E(x, t; xi, tau)`` for a batch sharing one source point.

    Spans up to the horizon are assembled directly; longer ones go through
    :class:`LongTimeKernel`.
    """
    t = np.asarray(t, float)
    span = float(t.max() - tau)
    k = constants or compute_constants(field)
    h = resolve_horizon(k, span, horizon)
    x = np.asarray(x, float)
    if span <= h:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            exp = LeviExpansion(field, xi, tau, span, quad, tol)
        return exp.E(x, t)
    lt = LongTimeKernel(field, xi, tau, tau + span, h, x.reshape(-1, field.n), quad, tol)
    return lt.E(x, t)
