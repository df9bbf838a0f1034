"""Command-line interface.

Subcommands: eval, series, constants, check-identities, check-bounds,
oracle-compare, lemma21. Exit status 0 on success, 1 when a check fails,
2 on usage or configuration errors.
"""

from __future__ import annotations

import argparse
import csv
import io
import itertools
import json
import math
import re
import sys
import warnings
from dataclasses import dataclass, field as dc_field, fields as dc_fields
from typing import Optional

import numpy as np

from . import __version__
from .bounds import (
    BoundConstants,
    ScaledQuery,
    check_two_sided,
    compute_constants,
    constants_report,
    epsilon_upper_constants,
    kernel_values,
    log_kernel_short_time,
    log_lower_envelope,
    log_upper_envelope,
)
from .coeffs import CoefficientField, SpdMatrix, validate_assumptions
from .exprparse import ExprError, parse as parse_expr
from .kernels import GenGaussKernel, gen_gauss, gen_gauss_derivatives, heat_residual, kernel_mass
from .levi import (
    DEGENERATE_DT,
    LeviExpansion,
    QuadratureScheme,
    beta_convolution_reference,
    beta_integrand_pieces,
    iterate_envelope,
    series_constants,
    spacetime_convolve,
    tail_envelope,
)
from .oracle import compare, fd_solve
from .parametrix import (
    KernelQuery,
    check_lemma_pa1,
    phi1_batch,
    phi1_envelope,
    z_batch,
    z_lower_envelope,
    z_upper_envelope,
)

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------
_QUAD_KEYS = {f.name: f.type for f in dc_fields(QuadratureScheme)}
_SCALAR_KEYS = {"n", "alpha", "kappa", "M", "N1", "N2", "tau"}
_A_KEY = re.compile(r"^a\[(\d+)\]\[(\d+)\]$")
_B_KEY = re.compile(r"^b\[(\d+)\]$")


@dataclass
class Config:
    field: CoefficientField
    quad: QuadratureScheme
    xi: np.ndarray
    tau: float
    path: str = ""
    extra: dict = dc_field(default_factory=dict)


def _number(text, where):
    try:
        return float(text)
    except ValueError:
        raise ConfigError(f"{where}: expected a number, got {text!r}") from None


def parse_config(text: str, path: str = "<config>") -> Config:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    scalars = {}
    a_exprs, b_exprs = {}, {}
    q_expr = None
    quad_kw = {}
    xi_text = None
    region = None
    lines = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        where = f"{path}:{lineno}"
        if "=" not in line:
            raise ConfigError(f"{where}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if not value:
            raise ConfigError(f"{where}: empty value for {key!r}")
        if key in lines:
            raise ConfigError(f"{where}: duplicate key {key!r} (first on line {lines[key]})")
        lines[key] = lineno
        if key in _SCALAR_KEYS:
            scalars[key] = _number(value, where)
        elif (m := _A_KEY.match(key)):
            a_exprs[(int(m.group(1)), int(m.group(2)))] = (value, where)
        elif (m := _B_KEY.match(key)):
            b_exprs[int(m.group(1))] = (value, where)
        elif key == "q":
            q_expr = (value, where)
        elif key == "xi":
            xi_text = (value, where)
        elif key == "region":
            parts = [p.strip() for p in value.split(",")]
            if len(parts) != 4:
                raise ConfigError(f"{where}: region needs 'x_lo, x_hi, t_lo, t_hi'")
            region = tuple(_number(p, where) for p in parts)
        elif key in _QUAD_KEYS:
            v = _number(value, where)
            quad_kw[key] = int(v) if _QUAD_KEYS[key] in (int, "int") else v
        else:
            raise ConfigError(f"{where}: unknown key {key!r}")
    for req in ("n", "alpha", "kappa", "M", "N1", "N2"):
        if req not in scalars:
            raise ConfigError(f"{path}: missing required key {req!r}")
    n = scalars["n"]
    if n != int(n) or n < 1:
        raise ConfigError(f"{path}:{lines['n']}: n must be a positive integer")
    n = int(n)
    for (i, j), (_, where) in a_exprs.items():
        if not (1 <= i <= n and 1 <= j <= n):
            raise ConfigError(f"{where}: a[{i}][{j}] is outside a {n}x{n} matrix")
        if (j, i) in a_exprs and i != j and a_exprs[(j, i)][0] != a_exprs[(i, j)][0]:
            raise ConfigError(f"{where}: a[{i}][{j}] and a[{j}][{i}] differ; a must be symmetric")
    for i, (_, where) in b_exprs.items():
        if not 1 <= i <= n:
            raise ConfigError(f"{where}: b[{i}] is outside dimension {n}")
    for text, where in [*a_exprs.values(), *b_exprs.values(), *([q_expr] if q_expr else [])]:
        try:
            parse_expr(text, n)
        except ExprError as exc:
            raise ConfigError(f"{where}: {exc}") from None
    constants = dict(kappa=scalars["kappa"], M=scalars["M"], N1=scalars["N1"],
                     N2=scalars["N2"], alpha=scalars["alpha"])
    if region is not None:
        constants["region"] = region
    try:
        fld = CoefficientField.from_expressions(
            n, {k: v for k, (v, _) in a_exprs.items()}, {k: v for k, (v, _) in b_exprs.items()},
            None if q_expr is None else q_expr[0], **constants)
    except ExprError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    except ValueError as exc:
        where = path
        for key in ("kappa", "M", "N1", "N2", "alpha"):
            if key in str(exc):
                where = f"{path}:{lines[key]}"
                break
        raise ConfigError(f"{where}: {exc}") from None
    quad_kw.setdefault("time_grading_exponent", 4.0 / fld.alpha)
    try:
        quad = QuadratureScheme(**quad_kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from None
    xi = np.zeros(n)
    if xi_text is not None:
        parts = [p for p in xi_text[0].replace(",", " ").split()]
        if len(parts) != n:
            raise ConfigError(f"{xi_text[1]}: xi needs {n} components")
        xi = np.array([_number(p, xi_text[1]) for p in parts])
    return Config(fld, quad, xi, scalars.get("tau", 0.0), path)


def load_config(path: str) -> Config:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    return parse_config(text, path)


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------
def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _emit(args, payload: dict, lines: list) -> None:
    if args.json:
        sys.stdout.write(json.dumps(payload, indent=2, sort_keys=True, default=_jsonable) + "\n")
    else:
        sys.stdout.write("\n".join(lines) + "\n")


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    raise TypeError(f"not serialisable: {type(v)}")


def _clean(v: float):
    v = float(v)
    if math.isfinite(v):
        return v
    return "inf" if v > 0 else ("-inf" if v < 0 else "nan")


def random_queries(n: int, xi, tau: float, count: int, seed: int, t_max: float,
                   rho_max: float = 3.0):
    """``(x, t)`` with ``t - tau`` uniform in ``(0, t_max]`` and ``rho`` uniform in ``[0, rho_max]``."""
    rng = np.random.default_rng(seed)
    dt = t_max * (1.0 - rng.random(count))
    rho = rho_max * rng.random(count)
    d = rng.standard_normal((count, n))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    x = np.asarray(xi) + (rho * np.sqrt(dt))[:, None] * d
    return x, tau + dt


def _upper_constants(args, cfg: Config, k: BoundConstants) -> BoundConstants:
    if args.eps is None:
        return k
    c_eps, a2, a3 = epsilon_upper_constants(cfg.field, args.eps)
    ke = compute_constants(cfg.field, c=c_eps)
    return k.scaled(c=c_eps, aleph2=a2, aleph3=a3, log_aleph2=ke.log_aleph2)


def _csv_rows(n, x, t, xi, tau, E, log_lo, log_hi):
    header = ([f"x_{i + 1}" for i in range(n)] + ["t"] + [f"xi_{i + 1}" for i in range(n)]
              + ["tau", "E", "lower_env", "upper_env", "margin_low", "margin_high"])
    rows = []
    for p in range(len(t)):
        e = float(E[p])
        le = math.log(e) if e > 0 else -math.inf
        rows.append([_fmt(v) for v in x[p]] + [_fmt(t[p])] + [_fmt(v) for v in xi]
                    + [_fmt(tau), _fmt(e), _fmt(math.exp(log_lo[p]) if log_lo[p] > -745 else 0.0),
                       _fmt(math.exp(log_hi[p]) if log_hi[p] < 709 else math.inf),
                       _fmt(le - log_lo[p]), _fmt(log_hi[p] - le)])
    return header, rows


def _parse_cell(text: str):
    v = float(text)
    return v if math.isfinite(v) else text


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------
def cmd_constants(args, cfg: Config) -> int:
    k = compute_constants(cfg.field)
    report = constants_report(k)
    if args.eps is not None:
        c_eps, a2, a3 = epsilon_upper_constants(cfg.field, args.eps)
        report["eps"] = {"eps": args.eps, "c_eps": c_eps, "aleph2_eps": _clean(a2),
                         "aleph3_eps": _clean(a3)}
    lines = [f"{name:>10s} = {_fmt(e['value']) if not isinstance(e['value'], str) else e['value']}"
             + (f"   (log {_fmt(e['log'])})" if "log" in e else "")
             for name, e in report.items() if name != "eps"]
    if args.eps is not None:
        lines.append(f"eps = {args.eps}: c_eps = {_fmt(report['eps']['c_eps'])}, "
                     f"aleph2 = {report['eps']['aleph2_eps']}, aleph3 = {report['eps']['aleph3_eps']}")
    _emit(args, report, lines)
    return EXIT_OK


def cmd_eval(args, cfg: Config) -> int:
    f = cfg.field
    n = f.n
    if args.x is not None:
        x = np.array(args.x, float).reshape(1, n)
        t = np.array([args.t if args.t is not None else cfg.tau + 0.5])
    else:
        x, t = random_queries(n, cfg.xi, cfg.tau, args.queries, args.seed, args.tmax)
    if np.any(t <= cfg.tau):
        raise ConfigError("query times must exceed tau")
    k = compute_constants(f)
    ku = _upper_constants(args, cfg, k)
    E = kernel_values(f, cfg.xi, cfg.tau, x, t, cfg.quad, args.tol, args.horizon, k)
    log_dt = np.log(t - cfg.tau)
    rho2 = np.sum((x - cfg.xi) ** 2, axis=1) / (t - cfg.tau)
    lo = log_lower_envelope(k, log_dt, rho2)
    hi = log_upper_envelope(ku, log_dt, rho2)
    header, rows = _csv_rows(n, x, t, cfg.xi, cfg.tau, E, lo, hi)
    if args.csv:
        _write_csv(args.csv, header, rows)
    payload = {"queries": [dict(zip(header, map(_parse_cell, r))) for r in rows]}
    lines = [",".join(header)] + [",".join(r) for r in rows]
    if args.csv and not args.json:
        lines = [f"wrote {len(rows)} rows to {args.csv}"]
    _emit(args, payload, lines)
    return EXIT_OK if np.all(E > 0) else EXIT_FAIL


def cmd_series(args, cfg: Config) -> int:
    f = cfg.field
    n = f.n
    x = np.array(args.x if args.x is not None else cfg.xi + 0.5, float).reshape(n)
    t = args.t if args.t is not None else cfg.tau + 0.5
    qy = KernelQuery(x, t, cfg.xi, cfg.tau)
    if qy.dt > 1:
        raise ConfigError("series diagnostics need t - tau <= 1")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        exp = LeviExpansion(f, cfg.xi, cfg.tau, qy.dt, cfg.quad, args.tol, args.ell_max)
    sc = series_constants(f)
    k = compute_constants(f)
    rows = []
    ok = True
    for ell in range(1, exp.terms_used + 1):
        val = float(exp.iterate_at(ell, x[None, :], t)[0])
        if ell == 1:
            env = float(phi1_envelope(f, sc.C, qy.dt, qy.rho))
        else:
            env = float(iterate_envelope(sc, n, ell, qy.dt, qy.rho))
        tail = float(tail_envelope(sc, n, ell + 1, qy.dt, qy.rho))
        ok &= abs(val) <= env
        rows.append({"ell": ell, "value": val, "envelope": _clean(env), "tail_bound": _clean(tail)})
    phi = float(exp.phi_at(x[None, :], t)[0])
    phi_env = k.S * qy.dt ** (-n / 2 - 1 + k.beta) * math.exp(-k.c * qy.rho ** 2)
    ok &= abs(phi) <= phi_env
    payload = {"query": {"x": x.tolist(), "t": t, "xi": cfg.xi.tolist(), "tau": cfg.tau},
               "iterates": rows, "phi": phi, "phi_envelope": _clean(phi_env),
               "terms_used": exp.terms_used, "empirically_converged": exp.converged,
               "analytic_tail_reached": bool(rows and rows[-1]["tail_bound"] != "inf"
                                             and float(rows[-1]["tail_bound"]) < args.tol)}
    lines = [f"query x={x.tolist()} t={t} xi={cfg.xi.tolist()} tau={cfg.tau}",
             f"{'l':>3s} {'Phi_l':>14s} {'envelope':>12s} {'tail bound':>12s}"]
    lines += [f"{r['ell']:>3d} {r['value']:>14.6e} {_fmt(r['envelope']):>12s} {_fmt(r['tail_bound']):>12s}"
              for r in rows]
    lines += [f"Phi = {phi!r}, envelope {_fmt(_clean(phi_env))}",
              f"terms used {exp.terms_used}, empirical convergence {exp.converged}, "
              f"analytic tail below tol: {payload['analytic_tail_reached']}"]
    _emit(args, payload, lines)
    return EXIT_OK if ok else EXIT_FAIL


def cmd_check_identities(args, cfg: Config) -> int:
    f = cfg.field
    n = f.n
    rng = np.random.default_rng(args.seed)
    lo, hi, t0, t1 = f.region
    count = args.queries
    xs = rng.uniform(lo, hi, (count, n))
    ts = rng.uniform(t0, t1, count)
    mats = f.eval_a(xs, ts)
    worst_res = 0.0
    worst_fd = 0.0
    for p in range(min(count, 200)):
        k = GenGaussKernel(SpdMatrix(np.linalg.inv(mats[p])))
        y = rng.standard_normal(n)
        tt = float(rng.uniform(0.2, 2.0))
        g = gen_gauss(k, y, tt)
        worst_res = max(worst_res, abs(float(heat_residual(k, y, tt))) / g)
        grad, hess, dt = gen_gauss_derivatives(k, y, tt)
        h = 1e-5
        fd_dt = (gen_gauss(k, y, tt + h) - gen_gauss(k, y, tt - h)) / (2 * h)
        scale = max(abs(float(dt)), g / tt)
        worst_fd = max(worst_fd, abs(fd_dt - float(dt)) / scale)
        for i in range(n):
            e = np.zeros(n)
            e[i] = h
            fd_g = (gen_gauss(k, y + e, tt) - gen_gauss(k, y - e, tt)) / (2 * h)
            worst_fd = max(worst_fd, abs(fd_g - grad[i]) / max(abs(grad[i]), g))
    k0 = GenGaussKernel(SpdMatrix(np.linalg.inv(mats[0])))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        mass = kernel_mass(k0, 1.0, nodes=200 if n == 1 else 160, radius_factor=12.0)
    mass_tol = 1e-6 if n == 1 else 1e-5
    lemma = check_lemma_pa1(f, count, args.seed)
    qx, qt = random_queries(n, cfg.xi, cfg.tau, count, args.seed + 1, 1.0, 4.0)
    dt = qt - cfg.tau
    rho = np.linalg.norm(qx - cfg.xi, axis=1) / np.sqrt(dt)
    z = z_batch(f, qx, qt, cfg.xi, cfg.tau)
    sandwich = bool(np.all(z <= z_upper_envelope(f, dt, rho) * (1 + 1e-12))
                    and np.all(z >= z_lower_envelope(f, dt, rho) * (1 - 1e-12)))
    ps, zz = phi1_batch(f, qx, qt, cfg.xi, cfg.tau)
    C = series_constants(f).C
    phi_ok = bool(np.all(np.abs(ps * zz) <= phi1_envelope(f, C, dt, rho) * (1 + 1e-12)))
    assumptions = validate_assumptions(f, sample_count=min(count, 2000), rng_seed=args.seed)
    checks = {
        "heat_residual": {"value": worst_res, "bound": 1e-10, "passed": worst_res <= 1e-10},
        "derivatives_vs_fd": {"value": worst_fd, "bound": 1e-6, "passed": worst_fd <= 1e-6},
        "kernel_mass": {"value": mass, "bound": mass_tol, "passed": abs(mass - 1) <= mass_tol},
        "inverse_bounds": {"value": [lemma.inverse_ratio, lemma.entry_ratio, lemma.form_ratio],
                      "passed": lemma.passed},
        "z_sandwich": {"passed": sandwich},
        "phi1_envelope": {"passed": phi_ok},
        "assumptions": {"passed": assumptions.passed,
                        "detail": {k: v["passed"] for k, v in assumptions.as_dict().items()}},
    }
    ok = all(c["passed"] for c in checks.values())
    lines = [f"{name:<20s} {'PASS' if c['passed'] else 'FAIL'}"
             + (f"  value={_fmt(c['value'])}" if "value" in c and not isinstance(c["value"], list) else "")
             for name, c in checks.items()]
    _emit(args, {"checks": checks, "passed": ok}, lines)
    return EXIT_OK if ok else EXIT_FAIL


def cmd_check_bounds(args, cfg: Config) -> int:
    f = cfg.field
    n = f.n
    k = compute_constants(f)
    ku = _upper_constants(args, cfg, k)
    t_max = args.tmax if args.tmax is not None else k.horizon
    pairs = []
    csv_data = None
    if t_max < DEGENERATE_DT and args.tmax is None:
        # the short-time window is below double precision: sample it in log space
        rng = np.random.default_rng(args.seed)
        log_dt = k.log_delta + np.log1p(-rng.random(args.queries))
        rho = args.rho_max * rng.random(args.queries)
        d = rng.standard_normal((args.queries, n))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        for p in range(args.queries):
            sq = ScaledQuery(cfg.xi, cfg.tau, float(log_dt[p]), rho[p] * d[p])
            pairs.append((sq, log_kernel_short_time(f, sq)))
        mode = "log-space short-time window"
    else:
        x, t = random_queries(n, cfg.xi, cfg.tau, args.queries, args.seed, t_max, args.rho_max)
        E = kernel_values(f, cfg.xi, cfg.tau, x, t, cfg.quad, args.tol, args.horizon, k)
        pairs = [(KernelQuery(x[p], t[p], cfg.xi, cfg.tau), float(E[p])) for p in range(len(t))]
        log_dt = np.log(t - cfg.tau)
        rho2 = np.sum((x - cfg.xi) ** 2, axis=1) / (t - cfg.tau)
        csv_data = (x, t, E, log_lower_envelope(k, log_dt, rho2), log_upper_envelope(ku, log_dt, rho2))
        mode = f"t - tau in (0, {t_max:g}]"
    low = check_two_sided(f, pairs, k)
    high = check_two_sided(f, pairs, ku) if ku is not k else low
    viol = sum(1 for a, b in zip(low.entries, high.entries)
               if a.margin_low < 0 or b.margin_high < 0)
    worst_low = low.worst_low
    worst_high = high.worst_high
    if args.csv and csv_data is not None:
        x, t, E, lo, hi = csv_data
        header, rows = _csv_rows(n, x, t, cfg.xi, cfg.tau, E, lo, hi)
        _write_csv(args.csv, header, rows)
    payload = {"mode": mode, "queries": len(pairs), "violations": viol,
               "worst_margin_low": _clean(worst_low), "worst_margin_high": _clean(worst_high),
               "eps": args.eps}
    lines = [f"mode: {mode}", f"queries: {len(pairs)}", f"violations: {viol}",
             f"worst log-margin to lower envelope: {_fmt(_clean(worst_low))}",
             f"worst log-margin to upper envelope: {_fmt(_clean(worst_high))}"]
    _emit(args, payload, lines)
    return EXIT_OK if viol == 0 else EXIT_FAIL


def cmd_oracle_compare(args, cfg: Config) -> int:
    f = cfg.field
    n = f.n
    if n > 2:
        raise ConfigError("finite-difference comparison supports n = 1, 2")
    span = args.tmax if args.tmax is not None else 0.25
    nx = args.nx or (1200 if n == 1 else 96)
    nt = args.nt or (150 if n == 1 else 60)
    half = 8 * math.sqrt(2 * f.M * span) + 2.0
    box = [(c - half, c + half) for c in cfg.xi]
    sol = fd_solve(f, (cfg.xi, cfg.tau), cfg.tau + span, box, nx, nt)
    pts = sol.points()
    rho = np.linalg.norm(pts - cfg.xi, axis=1) / math.sqrt(span)
    near = np.linalg.norm(pts - cfg.xi, axis=1) < 4 * float(sol.spacing.max())
    sel = rho <= args.rho_max
    E = kernel_values(f, cfg.xi, cfg.tau, pts[sel], np.full(int(sel.sum()), cfg.tau + span),
                      cfg.quad, args.tol, 1.0)
    rep = compare(E, sol.values.ravel()[sel], exclude=near[sel])
    if args.csv:
        sol.to_csv(args.csv)
    passed = rep.max_rel <= args.max_rel and not sol.leaked
    payload = {"t_minus_tau": span, "nx": nx, "nt": nt, **rep.as_dict(),
               "fd_mass": sol.mass, "fd_leakage": sol.leakage, "passed": passed}
    lines = [f"t - tau = {span}, nx = {nx}, nt = {nt}",
             f"max rel err {rep.max_rel:.3e}, mean {rep.mean_rel:.3e} over {rep.count} nodes "
             f"(rho <= {args.rho_max})",
             f"fd mass {sol.mass:.6f}, boundary mass {sol.leakage:.2e}",
             "PASS" if passed else "FAIL"]
    _emit(args, payload, lines)
    return EXIT_OK if passed else EXIT_FAIL


def convolution_sweep(quad: QuadratureScheme, lambdas=(0.125, 1.0, 2.0), exponents=(0.0, 0.25, 0.5),
                  dims=(1, 2), floor: float = 1e-12):
    """Closed-form Gaussian power convolutions against the quadrature at ``quad`` and one refinement."""
    rows = []
    fine = quad.refined()
    for lam, g, d, n in itertools.product(lambdas, exponents, exponents, dims):
        x = np.zeros(n)
        x[0] = 1.0
        qy = KernelQuery(x, 1.0, np.zeros(n), 0.0)
        f, gfac = beta_integrand_pieces(lam, g, d, n)
        ref = beta_convolution_reference(lam, g, d, qy)
        errs = [abs(spacetime_convolve(f, gfac(qy.xi, qy.tau), qy, q, spread=1 / (4 * lam)) / ref - 1)
                for q in (quad, fine)]
        rows.append({"lambda": lam, "gamma": g, "delta": d, "n": n, "reference": ref,
                     "rel_err": errs[0], "rel_err_refined": errs[1],
                     "decreasing": errs[1] < errs[0] or errs[0] <= floor})
    return rows


def cmd_lemma21(args, cfg: Optional[Config]) -> int:
    quad = cfg.quad if cfg is not None else QuadratureScheme()
    rows = convolution_sweep(quad)
    tol = args.tol if args.tol_given else 1e-3
    ok = all(r["rel_err"] <= tol and r["decreasing"] for r in rows)
    lines = [f"{'lambda':>7s} {'gamma':>6s} {'delta':>6s} {'n':>2s} {'rel err':>10s} {'refined':>10s}"]
    lines += [f"{r['lambda']:>7.3f} {r['gamma']:>6.2f} {r['delta']:>6.2f} {r['n']:>2d} "
              f"{r['rel_err']:>10.2e} {r['rel_err_refined']:>10.2e}" for r in rows]
    lines.append(f"worst {max(r['rel_err'] for r in rows):.3e} (tol {tol:g}): {'PASS' if ok else 'FAIL'}")
    _emit(args, {"rows": rows, "tol": tol, "passed": ok}, lines)
    return EXIT_OK if ok else EXIT_FAIL


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------
class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise _UsageError()


class _UsageError(Exception):
    pass


_COMMANDS = {
    "eval": cmd_eval,
    "series": cmd_series,
    "constants": cmd_constants,
    "check-identities": cmd_check_identities,
    "check-bounds": cmd_check_bounds,
    "oracle-compare": cmd_oracle_compare,
    "lemma21": cmd_lemma21,
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="coefficient configuration file")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--tol", type=float, default=None)
    common.add_argument("--queries", type=int, default=100)
    common.add_argument("--json", action="store_true", help="machine-readable output")
    common.add_argument("--csv", metavar="PATH", help="write a CSV table")
    common.add_argument("--horizon", type=float, default=None,
                        help="direct-assembly horizon (default min(delta, 1))")
    common.add_argument("--eps", type=float, default=None, help="use the eps-family upper bound")
    common.add_argument("--tmax", type=float, default=None, help="largest t - tau sampled")
    common.add_argument("--rho-max", type=float, default=3.0)
    common.add_argument("--x", type=float, nargs="+", default=None, help="single query point")
    common.add_argument("--t", type=float, default=None, help="single query time")
    common.add_argument("--ell-max", type=int, default=12)
    common.add_argument("--nx", type=int, default=None)
    common.add_argument("--nt", type=int, default=None)
    common.add_argument("--max-rel", type=float, default=0.05)
    parser = _Parser(prog="levikit", description="Parametrix fundamental solutions and their bounds")
    parser.add_argument("--version", action="version", version=f"levikit {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    for name in _COMMANDS:
        sub.add_parser(name, parents=[common])
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError:
        return EXIT_USAGE
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    args.tol_given = args.tol is not None
    if args.tol is None:
        args.tol = 1e-4
    if args.eps is not None and not 0 < args.eps < 1:
        sys.stderr.write("levikit: error: --eps must lie in (0, 1)\n")
        return EXIT_USAGE
    if args.tmax is None and args.command == "eval":
        args.tmax = 1.0
    try:
        cfg = load_config(args.config) if args.config else None
        if cfg is None and args.command != "lemma21":
            raise ConfigError("--config is required")
        return _COMMANDS[args.command](args, cfg)
    except (ConfigError, ValueError) as exc:
        sys.stderr.write(f"levikit: error: {exc}\n")
        return EXIT_USAGE


def main() -> None:  # pragma: no cover - thin wrapper
    sys.exit(run())
