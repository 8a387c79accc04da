"""Vectorized quadrature helpers.

Everything here works on whole arrays of integration problems at once, which
is what makes transform inversion affordable: the integrands are numpy
functions and we never call back into Python per node.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# 15-point Kronrod rule with its embedded 7-point Gauss rule (QUADPACK qk15).
_XGK = np.array([
    0.991455371120812639206854697526329,
    0.949107912342758524526189684047851,
    0.864864423359769072789712788640926,
    0.741531185599394439863864773280788,
    0.586087235467691130294144845693013,
    0.405845151377397166906606412076961,
    0.207784955007898467600689403773245,
    0.000000000000000000000000000000000,
])
_WGK = np.array([
    0.022935322010529224963732008058970,
    0.063092092629978553290700663189204,
    0.104790010322250183839876322541518,
    0.140653259715525918745189590510238,
    0.169004726639267902826583426598550,
    0.190350578064785409913256402421014,
    0.204432940075298892414161999234649,
    0.209482141084727828012999174891714,
])
_WG = np.array([
    0.129484966168869693270611432679082,
    0.279705391489276667901467771423780,
    0.381830050505118944950369775488975,
    0.417959183673469387755102040816327,
])

KRONROD_NODES = np.concatenate([-_XGK[:-1], _XGK[::-1]])
KRONROD_WEIGHTS = np.concatenate([_WGK[:-1], _WGK[::-1]])
# Gauss nodes sit at the odd positions of the Kronrod grid.
GAUSS_WEIGHTS = np.zeros(15)
GAUSS_WEIGHTS[1::2] = np.concatenate([_WG[:-1], _WG[::-1]])


def gk15(f, a, b):
    """Apply the (G7, K15) pair on every interval ``[a[i], b[i]]``.

    ``f`` must accept an array of shape ``(m, 15)``. Returns the Kronrod
    estimates and the absolute difference to the Gauss estimates.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    half = 0.5 * (b - a)
    mid = 0.5 * (b + a)
    x = mid[:, None] + half[:, None] * KRONROD_NODES[None, :]
    fx = f(x)
    k = (fx * KRONROD_WEIGHTS).sum(axis=1) * half
    g = (fx * GAUSS_WEIGHTS).sum(axis=1) * half
    return k, np.abs(k - g)


@dataclass(frozen=True)
class QuadResult:
    value: complex | float
    error: float
    intervals: int
    converged: bool


def adaptive_gk(f, edges, atol=1e-12, rtol=1e-10, max_intervals=200_000):
    """Globally adaptive Gauss-Kronrod integration over consecutive intervals.

    ``edges`` is a sorted 1-d array of breakpoints; the integral over
    ``[edges[0], edges[-1]]`` is returned. Intervals whose error estimate is
    above their share of the tolerance are bisected, all at once, until the
    summed error estimate meets ``max(atol, rtol * |I|)``.
    """
    edges = np.asarray(edges, dtype=float)
    a, b = edges[:-1], edges[1:]
    done_val = 0.0
    done_err = 0.0
    val, err = gk15(f, a, b)
    while True:
        total = done_val + val.sum()
        total_err = done_err + err.sum()
        tol = max(atol, rtol * abs(total))
        if total_err <= tol or a.size == 0:
            return QuadResult(total, float(total_err), a.size, True)
        share = tol * (b - a) / max(np.sum(b - a), 1e-300)
        bad = err > 0.5 * share
        if not bad.any():
            bad = err >= err.max()
        if 2 * np.count_nonzero(bad) > max_intervals:
            return QuadResult(total, float(total_err), a.size, False)
        done_val = done_val + val[~bad].sum()
        done_err = done_err + err[~bad].sum()
        a_bad, b_bad = a[bad], b[bad]
        m = 0.5 * (a_bad + b_bad)
        a = np.concatenate([a_bad, m])
        b = np.concatenate([m, b_bad])
        val, err = gk15(f, a, b)


def adaptive_gk_cells(f, edges, atol=1e-12, max_level=30, max_intervals=100_000):
    """Integrate ``f`` over each cell ``[edges[k], edges[k+1]]`` separately.

    Every cell is refined by bisection until its own error estimate is below
    ``atol``. Returns ``(values, errors, converged)`` with one entry per cell;
    ``converged`` is False when ``max_level`` bisections or ``max_intervals``
    live intervals were not enough.
    """
    edges = np.asarray(edges, dtype=float)
    ncell = edges.size - 1
    a, b = edges[:-1], edges[1:]
    owner = np.arange(ncell)
    width0 = b - a
    vals = np.zeros(ncell, dtype=complex)
    errs = np.zeros(ncell)
    converged = True
    level = 0
    while a.size:
        v, e = gk15(f, a, b)
        # tolerance share proportional to the interval's part of its cell
        share = atol * (b - a) / width0[owner]
        ok = (e <= share) | (level >= max_level)
        if level >= max_level and not np.all(e <= share):
            converged = False
        np.add.at(vals, owner[ok], v[ok])
        np.add.at(errs, owner[ok], e[ok])
        if 2 * np.count_nonzero(~ok) > max_intervals:
            # keep the current estimates rather than bisecting past the cap
            np.add.at(vals, owner[~ok], v[~ok])
            np.add.at(errs, owner[~ok], e[~ok])
            return vals, errs, False
        a, b, owner = a[~ok], b[~ok], owner[~ok]
        m = 0.5 * (a + b)
        a, b = np.concatenate([a, m]), np.concatenate([m, b])
        owner = np.concatenate([owner, owner])
        level += 1
    return vals, errs, converged


def exp_sinh_rule(h=1.0 / 16, u_max=6.0):
    """Nodes and weights of the exp-sinh rule for integrals over (0, inf).

    With ``r = exp(pi/2 * sinh(u))`` the trapezoidal rule in ``u`` converges
    double-exponentially for integrands analytic near the positive axis,
    including algebraic endpoint singularities at 0.
    """
    u = np.arange(-u_max, u_max + 0.5 * h, h)
    s = 0.5 * np.pi * np.sinh(u)
    r = np.exp(s)
    w = h * 0.5 * np.pi * np.cosh(u) * r
    keep = (r > 1e-300) & (r < 1e300)
    return r[keep], w[keep]


def wynn_epsilon(partial_sums):
    """Wynn's epsilon extrapolation of a sequence of partial sums.

    Returns ``(limit, error_estimate)``. The estimate is the distance between
    the two highest-order even columns; a short or stagnant sequence falls
    back to the last partial sum.
    """
    s = np.asarray(partial_sums)
    n = s.size
    if n < 3:
        return s[-1], np.inf
    e_prev = np.zeros(n + 1, dtype=s.dtype)
    e_cur = s.copy()
    best = [s[-1]]
    for k in range(1, n):
        diff = e_cur[1:] - e_cur[:-1]
        with np.errstate(divide="ignore", invalid="ignore"):
            e_next = e_prev[1:n - k + 1] + 1.0 / diff
        if not np.all(np.isfinite(e_next)):
            break
        e_prev, e_cur = e_cur, e_next
        if k % 2 == 0:
            best.append(e_cur[-1])
        if e_cur.size < 2:
            break
    if len(best) < 2:
        return s[-1], abs(s[-1] - s[-2])
    return best[-1], abs(best[-1] - best[-2])
