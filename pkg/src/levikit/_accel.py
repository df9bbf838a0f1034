"""Hot inner loops, in two interchangeable flavours.

Each kernel exists as a pure-numpy implementation and a numba ``@njit``
implementation with identical signatures. The public names at module level
point at the numba versions unless numba is missing or the environment
variable ``LEVIKIT_NO_NUMBA`` is set to a non-empty value other than ``0``.

Kernels
-------
phi1_kernel
    residual factor ``Psi`` and parametrix ``Z`` for flat batches of
    (target, source) pairs.
z_kernel
    the parametrix alone.
scatter_rows
    accumulate ``weight * interpolation-stencil`` into rows of a dense
    operator over a (log r, y) tensor grid.
gather_values
    evaluate the same tensor-grid interpolant at scattered points.

Grid layout shared by the last two: ``Kt`` time nodes uniform in
``w = log r`` starting at ``w0`` with step ``dw``; ``J`` nodes per spatial
axis uniform in ``y`` starting at ``y0`` with step ``dy``; the flat column
index of node ``(k, j_1, .., j_n)`` is ``k * J**n + sum j_i * J**(n-1-i)``.
Below the first time node the first slice is used unchanged; spatial
stencil nodes outside the grid count as zero.
"""

from __future__ import annotations

import math
import os

import numpy as np

__all__ = [
    "BACKEND",
    "phi1_kernel",
    "z_kernel",
    "scatter_rows",
    "gather_values",
    "numpy_impl",
    "numba_impl",
]

FOUR_PI = 4.0 * math.pi


# ---------------------------------------------------------------------------
# numpy flavour
# ---------------------------------------------------------------------------
def _np_phi1(dx, dt, a_t, b_t, q_t, a_s, ainv_s, det_ainv):
    n = dx.shape[-1]
    inv_dt = 1.0 / dt
    d = -0.5 * inv_dt[:, None] * np.einsum("pij,pj->pi", ainv_s, dx)
    dij = -0.5 * inv_dt[:, None, None] * ainv_s + d[:, :, None] * d[:, None, :]
    psi = np.einsum("pij,pij->p", a_t - a_s, dij) + np.einsum("pi,pi->p", d, b_t) + q_t
    quad = np.einsum("pi,pij,pj->p", dx, ainv_s, dx)
    z = np.sqrt(det_ainv) * (FOUR_PI * dt) ** (-0.5 * n) * np.exp(-0.25 * quad * inv_dt)
    return psi, z


def _np_z(dx, dt, ainv_s, det_ainv):
    n = dx.shape[-1]
    quad = np.einsum("pi,pij,pj->p", dx, ainv_s, dx)
    return np.sqrt(det_ainv) * (FOUR_PI * dt) ** (-0.5 * n) * np.exp(-0.25 * quad / dt)


def _np_lagrange4(s):
    return np.stack([
        -(s - 1.0) * (s - 2.0) * (s - 3.0) / 6.0,
        s * (s - 2.0) * (s - 3.0) / 2.0,
        -s * (s - 1.0) * (s - 3.0) / 2.0,
        s * (s - 1.0) * (s - 2.0) / 6.0,
    ], axis=-1)


def _np_time_stencil(logr, w0, dw, kt):
    pos = (logr - w0) / dw
    i0 = np.clip(np.floor(pos).astype(np.int64) - 1, 0, kt - 4)
    s = pos - i0
    wts = _np_lagrange4(s)
    below = pos <= 0.0
    if np.any(below):
        wts[below] = 0.0
        wts[below, 0] = 1.0
        i0 = np.where(below, 0, i0)
    return i0, wts


def _np_space_stencil(y, y0, dy, jn):
    # y: (P, n) -> indices (P, n, 4), weights (P, n, 4), valid mask
    pos = (y - y0) / dy
    j0 = np.floor(pos).astype(np.int64) - 1
    s = pos - j0
    wts = _np_lagrange4(s)
    idx = j0[..., None] + np.arange(4)
    valid = (idx >= 0) & (idx < jn)
    wts = np.where(valid, wts, 0.0)
    idx = np.clip(idx, 0, jn - 1)
    return idx, wts


def _np_stencils(logr, y, w0, dw, kt, y0, dy, jn):
    p, n = y.shape
    i0, tw = _np_time_stencil(logr, w0, dw, kt)
    sidx, sw = _np_space_stencil(y, y0, dy, jn)
    cols = (i0[:, None] + np.arange(4)) * jn ** n
    wts = tw
    for axis in range(n):
        stride = jn ** (n - 1 - axis)
        cols = (cols[:, :, None] + stride * sidx[:, axis, None, :]).reshape(p, -1)
        wts = (wts[:, :, None] * sw[:, axis, None, :]).reshape(p, -1)
    return cols, wts


def _np_scatter_rows(out, row, weight, logr, y, w0, dw, kt, y0, dy, jn):
    cols, wts = _np_stencils(logr, y, w0, dw, kt, y0, dy, jn)
    ncol = out.shape[1]
    flat = (row[:, None] * ncol + cols).ravel()
    contrib = (weight[:, None] * wts).ravel()
    keep = contrib != 0.0
    out += np.bincount(flat[keep], weights=contrib[keep], minlength=out.size).reshape(out.shape)


def _np_gather_values(values, logr, y, w0, dw, kt, y0, dy, jn):
    cols, wts = _np_stencils(logr, y, w0, dw, kt, y0, dy, jn)
    return np.einsum("pk,pk->p", values.ravel()[cols], wts)


numpy_impl = {
    "phi1_kernel": _np_phi1,
    "z_kernel": _np_z,
    "scatter_rows": _np_scatter_rows,
    "gather_values": _np_gather_values,
}


# ---------------------------------------------------------------------------
# numba flavour
# ---------------------------------------------------------------------------
numba_impl = {}
try:
    import numba as _nb
except ImportError:  # pragma: no cover - exercised only without numba
    _nb = None

if _nb is not None:
    njit = _nb.njit(cache=True, fastmath=False)

    @njit
    def _nb_phi1(dx, dt, a_t, b_t, q_t, a_s, ainv_s, det_ainv):
        p, n = dx.shape
        psi = np.empty(p)
        z = np.empty(p)
        d = np.empty(n)
        for k in range(p):
            inv_dt = 1.0 / dt[k]
            quad = 0.0
            for i in range(n):
                acc = 0.0
                for j in range(n):
                    acc += ainv_s[k, i, j] * dx[k, j]
                d[i] = -0.5 * inv_dt * acc
                quad += acc * dx[k, i]
            s = q_t[k]
            for i in range(n):
                s += d[i] * b_t[k, i]
                for j in range(n):
                    dij = -0.5 * inv_dt * ainv_s[k, i, j] + d[i] * d[j]
                    s += (a_t[k, i, j] - a_s[k, i, j]) * dij
            psi[k] = s
            z[k] = math.sqrt(det_ainv[k]) * (FOUR_PI * dt[k]) ** (-0.5 * n) \
                * math.exp(-0.25 * quad * inv_dt)
        return psi, z

    @njit
    def _nb_z(dx, dt, ainv_s, det_ainv):
        p, n = dx.shape
        z = np.empty(p)
        for k in range(p):
            quad = 0.0
            for i in range(n):
                acc = 0.0
                for j in range(n):
                    acc += ainv_s[k, i, j] * dx[k, j]
                quad += acc * dx[k, i]
            z[k] = math.sqrt(det_ainv[k]) * (FOUR_PI * dt[k]) ** (-0.5 * n) \
                * math.exp(-0.25 * quad / dt[k])
        return z

    @njit
    def _nb_lagrange4(s, out):
        out[0] = -(s - 1.0) * (s - 2.0) * (s - 3.0) / 6.0
        out[1] = s * (s - 2.0) * (s - 3.0) / 2.0
        out[2] = -s * (s - 1.0) * (s - 3.0) / 2.0
        out[3] = s * (s - 1.0) * (s - 2.0) / 6.0

    @njit
    def _nb_point_stencil(logr_k, y_k, w0, dw, kt, y0, dy, jn, cols, wts, tw, sw, j0):
        """Fill ``cols``/``wts`` (length 4**(n+1)); return the count used.

        ``tw``, ``sw`` and ``j0`` are caller-owned scratch buffers. Entries
        falling outside the spatial grid get weight zero.
        """
        n = y_k.shape[0]
        pos = (logr_k - w0) / dw
        if pos <= 0.0:
            i0 = 0
            tw[0] = 1.0
            tw[1] = 0.0
            tw[2] = 0.0
            tw[3] = 0.0
        else:
            i0 = int(math.floor(pos)) - 1
            if i0 < 0:
                i0 = 0
            if i0 > kt - 4:
                i0 = kt - 4
            _nb_lagrange4(pos - i0, tw)
        stride = 1
        for ax in range(n):
            stride *= jn
        m = 0
        for it in range(4):
            cols[m] = (i0 + it) * stride
            wts[m] = tw[it]
            m += 1
        for ax in range(n):
            stride //= jn
            yp = (y_k[ax] - y0) / dy
            jb = int(math.floor(yp)) - 1
            _nb_lagrange4(yp - jb, tw)
            # expand in place, back to front, so unread entries survive
            for idx in range(m - 1, -1, -1):
                bc = cols[idx]
                bw = wts[idx]
                for js in range(3, -1, -1):
                    jj = jb + js
                    dst = idx * 4 + js
                    if jj < 0 or jj >= jn:
                        cols[dst] = 0
                        wts[dst] = 0.0
                    else:
                        cols[dst] = bc + jj * stride
                        wts[dst] = bw * tw[js]
            m *= 4
        return m

    @njit
    def _nb_scatter_rows(out, row, weight, logr, y, w0, dw, kt, y0, dy, jn):
        p, n = y.shape
        total = 4 ** (n + 1)
        cols = np.empty(total, dtype=np.int64)
        wts = np.empty(total)
        tw = np.empty(4)
        sw = np.empty((n, 4))
        j0 = np.empty(n, dtype=np.int64)
        for k in range(p):
            wk = weight[k]
            if wk == 0.0:
                continue
            m = _nb_point_stencil(logr[k], y[k], w0, dw, kt, y0, dy, jn, cols, wts, tw, sw, j0)
            r = row[k]
            for c in range(m):
                if wts[c] != 0.0:
                    out[r, cols[c]] += wk * wts[c]

    @njit
    def _nb_gather_values(values, logr, y, w0, dw, kt, y0, dy, jn):
        p, n = y.shape
        flat = values.ravel()
        total = 4 ** (n + 1)
        cols = np.empty(total, dtype=np.int64)
        wts = np.empty(total)
        tw = np.empty(4)
        sw = np.empty((n, 4))
        j0 = np.empty(n, dtype=np.int64)
        res = np.empty(p)
        for k in range(p):
            m = _nb_point_stencil(logr[k], y[k], w0, dw, kt, y0, dy, jn, cols, wts, tw, sw, j0)
            acc = 0.0
            for c in range(m):
                acc += flat[cols[c]] * wts[c]
            res[k] = acc
        return res

    numba_impl = {
        "phi1_kernel": _nb_phi1,
        "z_kernel": _nb_z,
        "scatter_rows": _nb_scatter_rows,
        "gather_values": _nb_gather_values,
    }


def _use_numba() -> bool:
    flag = os.environ.get("LEVIKIT_NO_NUMBA", "")
    return bool(numba_impl) and flag in ("", "0")


BACKEND = "numba" if _use_numba() else "numpy"
_impl = numba_impl if BACKEND == "numba" else numpy_impl


def _flat(a, shape=None):
    a = np.asarray(a, dtype=float)
    if shape is not None:
        a = np.broadcast_to(a, shape)
    return np.ascontiguousarray(a)


def phi1_kernel(dx, dt, a_t, b_t, q_t, a_s, ainv_s, det_ainv, impl=None):
    """``(Psi, Z)`` for flat batches: ``dx (P, n)``, matrices ``(P, n, n)``."""
    dx = _flat(dx)
    p, n = dx.shape
    args = (dx, _flat(dt, (p,)), _flat(a_t, (p, n, n)), _flat(b_t, (p, n)), _flat(q_t, (p,)),
            _flat(a_s, (p, n, n)), _flat(ainv_s, (p, n, n)), _flat(det_ainv, (p,)))
    return (impl or _impl)["phi1_kernel"](*args)


def z_kernel(dx, dt, ainv_s, det_ainv, impl=None):
    dx = _flat(dx)
    p, n = dx.shape
    return (impl or _impl)["z_kernel"](dx, _flat(dt, (p,)), _flat(ainv_s, (p, n, n)),
                                       _flat(det_ainv, (p,)))


def scatter_rows(out, row, weight, logr, y, grid, impl=None):
    """Accumulate ``weight[k] * stencil(logr[k], y[k])`` into ``out[row[k], :]``."""
    w0, dw, kt, y0, dy, jn = grid
    y = _flat(y)
    (impl or _impl)["scatter_rows"](out, np.ascontiguousarray(row, dtype=np.int64),
                                    _flat(weight), _flat(logr), y,
                                    float(w0), float(dw), int(kt), float(y0), float(dy), int(jn))


def gather_values(values, logr, y, grid, impl=None):
    w0, dw, kt, y0, dy, jn = grid
    y = _flat(y)
    return (impl or _impl)["gather_values"](_flat(values), _flat(logr), y, float(w0), float(dw),
                                           int(kt), float(y0), float(dy), int(jn))
