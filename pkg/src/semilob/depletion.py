"""Law of the queue depletion time and of the time to the next price move.

A queue of size ``n`` evolves by +1/-1 steps driven by a two-state Markov
renewal process. Its depletion time ``sigma`` has the transform

    E[exp(-z sigma) | q0 = n, V0 = +1] = c(z) * lam(z)**(n-1)
    E[exp(-z sigma) | q0 = n, V0 = -1] = d(z) * lam(z)**(n-1)

where ``lam`` is the small root of

    m11 X**2 - (1 + Delta) X + m_1_1 = 0,   Delta = m11 m_1_1 - m_11 m1_1,

and ``mij = P(i,j) E[exp(-z T) | i -> j]``. At ``z = -1j*x`` this is the
characteristic function, which we invert numerically (Gil-Pelaez) to obtain
cdfs and densities.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import config
from .kernel import (Deterministic, EmpiricalStep, KernelSide, NumericalError, clog1p,
                     validate_side)
from .quadrature import adaptive_gk_cells, exp_sinh_rule, wynn_epsilon

BALANCED = "balanced"
STRICT = "strict"


# ---------------------------------------------------------------------------
# transform solution
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TransformSolution:
    """Solution of the coupled recurrences at an array of arguments ``z``.

    Attributes
    ----------
    z : ndarray
        Complex arguments.
    m : dict
        ``m(z, i, j)`` keyed by ``(i, j)``.
    delta : ndarray
        Coupling coefficient ``m11 m_1_1 - m_11 m1_1``.
    root : ndarray
        Selected root (modulus <= 1); equals ``root_degenerate`` where
        ``degenerate`` is True.
    root_plus : ndarray
        The other quadratic root (``inf`` where degenerate).
    root_degenerate : ndarray
        ``m_1_1 / (1 - m1_1 m_11)``, the root used when ``m11 = 0``.
    c, d : ndarray
        Boundary coefficients: the transform for ``n = 1`` started after a
        +1 (``c``) or a -1 (``d``) event.
    degenerate : ndarray of bool
        Where ``|m11|`` fell below the degeneracy threshold.
    one_minus_root, one_minus_c, one_minus_d : ndarray
        ``1 - root``, ``1 - c`` and ``1 - d`` evaluated without cancellation,
        so that ``1 - E[exp(-z sigma)]`` keeps its relative accuracy as
        ``z -> 0``.
    """

    z: np.ndarray
    m: dict
    delta: np.ndarray
    root: np.ndarray
    root_plus: np.ndarray
    root_degenerate: np.ndarray
    c: np.ndarray
    d: np.ndarray
    degenerate: np.ndarray
    one_minus_root: np.ndarray = None
    one_minus_c: np.ndarray = None
    one_minus_d: np.ndarray = None

    def residual(self):
        """``|R(root)|`` of the characteristic quadratic."""
        m11, mmm = self.m[(1, 1)], self.m[(-1, -1)]
        lam = self.root
        return np.abs(m11 * lam**2 - (1 + self.delta) * lam + mmm)

    def value(self, n, v0=None, conditioning=None):
        """Transform of ``sigma`` for queue size(s) ``n``.

        ``n`` broadcasts against ``z``. With ``conditioning`` set to +1 or
        -1 the initial event type is fixed instead of mixed over ``v0``.
        """
        n = np.asarray(n)
        if np.any(n < 1):
            raise ValueError("queue size must be >= 1")
        if conditioning is None:
            coef = self.c * v0 + self.d * (1.0 - v0)
        elif int(conditioning) == 1:
            coef = self.c
        elif int(conditioning) == -1:
            coef = self.d
        else:
            raise ValueError("conditioning must be +1, -1 or None")
        return coef * self.root ** (n - 1)

    def complement(self, n, v0=None, conditioning=None):
        """``1 - value(n, ...)``, accurate for small ``|z|``."""
        n = np.asarray(n)
        if np.any(n < 1):
            raise ValueError("queue size must be >= 1")
        if conditioning is None:
            coef = self.c * v0 + self.d * (1.0 - v0)
            one_minus_coef = self.one_minus_c * v0 + self.one_minus_d * (1.0 - v0)
        elif int(conditioning) == 1:
            coef, one_minus_coef = self.c, self.one_minus_c
        elif int(conditioning) == -1:
            coef, one_minus_coef = self.d, self.one_minus_d
        else:
            raise ValueError("conditioning must be +1, -1 or None")
        with np.errstate(divide="ignore", invalid="ignore"):
            tail = -np.expm1((n - 1) * clog1p(-self.one_minus_root))
        tail = np.where(n == 1, 0.0, tail)
        return one_minus_coef + coef * tail


def transform_solution(kernel: KernelSide, z, degeneracy_tol=None) -> TransformSolution:
    """Solve for ``Delta``, the roots and ``c, d`` at complex arguments ``z``.

    Both roots are computed in cancellation-free form; the one of modulus
    <= 1 is selected (for ``t != 0`` exactly one of them is inside the unit
    disc). ``d`` is obtained from the ``-1`` row of the recurrence at
    ``n = 0`` (``d = m_11 c lam + m_1_1``), which stays finite as
    ``m11 -> 0``; the textbook form ``(m_11 c + Delta) / m11`` is
    algebraically equal wherever ``m11 != 0``.
    """
    if degeneracy_tol is None:
        degeneracy_tol = config.TOLERANCES.degeneracy
    z = np.asarray(z, dtype=complex)
    m, eps = kernel.m_pair(z)
    m11, m1m, mm1, mmm = m[(1, 1)], m[(1, -1)], m[(-1, 1)], m[(-1, -1)]
    e11, e1m, em1, emm = eps[(1, 1)], eps[(1, -1)], eps[(-1, 1)], eps[(-1, -1)]
    p, q = kernel.p11, kernel.pm1m1
    delta = m11 * mmm - mm1 * m1m
    # 1 + Delta and the discriminant written around z = 0 in eps = P - m, so
    # the O(1) parts cancel analytically rather than in floating point (the
    # discriminant vanishes at z = 0 in the balanced case).
    delta_eps = e11 * emm - e1m * em1
    shift = delta_eps - q * e11 + (1.0 - q) * e1m - p * emm + (1.0 - p) * em1
    b = (p + q) + shift
    linear = (2.0 * (2.0 - p - q) * (q * e11 + p * emm)
              + 2.0 * (p + q) * ((1.0 - q) * e1m + (1.0 - p) * em1))
    disc_shift = linear + 2.0 * (p + q) * delta_eps + shift * shift - 4.0 * e11 * emm
    disc = (p - q) ** 2 + disc_shift
    sq = np.sqrt(disc)
    # pick the sign that avoids cancellation in b +/- sq
    sgn = np.where((np.conj(b) * sq).real >= 0, 1.0, -1.0)
    qq = b + sgn * sq
    degenerate = np.abs(m11) < degeneracy_tol
    with np.errstate(divide="ignore", invalid="ignore"):
        r_small = 2.0 * mmm / qq
        r_big = np.where(degenerate, np.inf, qq / (2.0 * np.where(degenerate, 1.0, m11)))
        lam_tilde = mmm / (1.0 - m1m * mm1)
        # 1 - r_small = (qq - 2 m_1_1) / qq; its O(1) part (p - q) + sgn*sq
        # cancels for small z and is rewritten as disc_shift / (sgn*sq + q - p)
        den = sgn * sq + (q - p)
        head = np.where(np.abs(den) >= 0.5 * (np.abs(sq) + abs(q - p)),
                        disc_shift / den, (p - q) + sgn * sq)
        one_minus_small = (head + shift + 2.0 * emm) / qq
    swap = np.abs(r_big) < np.abs(r_small)
    root = np.where(swap, r_big, r_small)
    root_plus = np.where(swap, r_small, r_big)
    root = np.where(degenerate, lam_tilde, root)
    one_minus_root = np.where(swap | degenerate, 1.0 - root, one_minus_small)
    if np.any(np.abs(root) > 1.0 + 1e-9):
        bad = np.asarray(z)[np.abs(root) > 1.0 + 1e-9].ravel()[:3]
        raise NumericalError(f"root selection failed: no root of modulus <= 1 at z={bad}")
    den_c = 1.0 - root * m11
    c = m1m / den_c
    d = mm1 * c * root + mmm
    # complements accurate near z = 0, written in eps = P - m
    one_minus_c = (p * one_minus_root + root * e11 + e1m) / den_c
    one_minus_clam = one_minus_c + c * one_minus_root
    one_minus_d = (1.0 - q) * one_minus_clam + emm + em1 * c * root
    return TransformSolution(z, m, delta, root, root_plus, lam_tilde, c, d, degenerate,
                             one_minus_root, one_minus_c, one_minus_d)


def sigma_transform(kernel, z, n, conditioning=None):
    """``E[exp(-z sigma) | q0 = n]`` at complex ``z`` with ``Re z >= 0``."""
    sol = transform_solution(kernel, z)
    return sol.value(n, kernel.v0, conditioning)


def sigma_laplace(kernel, s, n, conditioning=None):
    """Laplace transform ``E[exp(-s sigma) | q0 = n]`` for real ``s >= 0``."""
    s = np.asarray(s, dtype=float)
    if np.any(s < 0):
        raise ValueError("s must be >= 0")
    return sigma_transform(kernel, s, n, conditioning).real


def sigma_cf(kernel, t, n, conditioning=None):
    """Characteristic function ``E[exp(1j t sigma) | q0 = n]`` for real ``t``.

    Negative ``t`` are handled through ``phi(-t) = conj(phi(t))``.
    """
    t = np.asarray(t, dtype=float)
    val = sigma_transform(kernel, -1j * np.abs(t), n, conditioning)
    return np.where(t < 0, np.conj(val), val)


# ---------------------------------------------------------------------------
# tail classification
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DepletionLaw:
    """Tail description of the depletion time of one side.

    ``P[sigma > t | q0 = n]`` behaves like ``alpha(n) / sqrt(t)`` in the
    balanced case and is quoted as ``beta(n) / t`` in the strict case, where
    ``beta(n)`` is the first-order coefficient of the Laplace transform
    (``L(s, n) = 1 - beta(n) s + o(s)``), i.e. ``E[sigma | q0 = n]``.
    Both coefficients are affine in ``n``.
    """

    kernel: KernelSide = field(repr=False)
    tail_class: str
    p: float
    u1: float = math.nan
    u2: float = math.nan
    u3: float = math.nan
    near_boundary: bool = False

    @property
    def exponent(self):
        """Decay exponent of the quoted survival asymptote."""
        return 0.5 if self.tail_class == BALANCED else 1.0

    def alpha(self, n, alternate=False):
        """Balanced-case coefficient (computed with ``p = P(1,1)``).

        The default is the coefficient of ``sqrt(s)`` in the expansion of the
        Laplace transform at 0, whose ``v0`` term carries the factor
        ``(2p - 1) / (1 - p)``. ``alternate=True`` uses ``(2p - 1) / (p - 1)``
        instead, a sign variant that disagrees with the transform whenever
        ``p != 1/2`` and ``v0(1) != 0`` and can turn negative for ``p`` near 1.
        """
        return balanced_alpha(self.kernel, n, alternate=alternate)

    def beta(self, n, alternate=False):
        """Strict-case coefficient ``v0(1) u1 + v0(-1) u2 + (n - 1) u3``."""
        if self.tail_class != STRICT:
            raise ValueError("beta is only defined for P(1,1) < P(-1,-1)")
        u1, u2, u3 = strict_u(self.kernel, alternate=alternate)
        n = np.asarray(n, dtype=float)
        v1 = self.kernel.v0
        return v1 * u1 + (1 - v1) * u2 + (n - 1) * u3

    def coefficient(self, n):
        return self.alpha(n) if self.tail_class == BALANCED else self.beta(n)

    def survival_asymptote(self, t, n):
        """Leading term of ``P[sigma > t | q0 = n]`` as quoted for this class."""
        t = np.asarray(t, dtype=float)
        return self.coefficient(n) / t**self.exponent

    def affine_coefficients(self):
        """``(A, B)`` with coefficient(n) = A + B n."""
        c0 = float(self.coefficient(0))
        return c0, float(self.coefficient(1)) - c0


def balanced_alpha(kernel, n, alternate=False):
    """``alpha(n)`` with ``P[sigma > t | q0 = n] ~ alpha(n) / sqrt(t)`` (balanced kernels)."""
    p = kernel.p11
    if not 0 < p < 1:
        raise ValueError("alpha needs 0 < p < 1")
    factor = (2 * p - 1) / (p - 1) if alternate else (2 * p - 1) / (1 - p)
    n = np.asarray(n, dtype=float)
    return ((n + factor * kernel.v0) / (p * math.sqrt(math.pi))
            * math.sqrt(p * (1 - p)) * math.sqrt(p * kernel.h1 + (1 - p) * kernel.h2))


def strict_u(kernel, alternate=False):
    """Return ``(u1, u2, u3)`` for a kernel with ``P(1,1) < P(-1,-1)``.

    ``u3 = -lam'(0)`` is the mean time to move the queue down by one level,
    ``u1 = -c'(0)`` and ``u2 = -d'(0)`` the mean depletion times of a unit
    queue started after a +1 / -1 event (``u2 == u3``: every level is left
    through a -1 event). With ``alternate=True``, ``u3`` is replaced by
    ``h(1,1) + (1-p)/(q-p) (q h1 + (1-q) h2)``, a variant that does not
    match the transform (nor the memoryless special case).
    """
    p, q = kernel.p11, kernel.pm1m1
    if not p < q:
        raise ValueError("strict coefficients need P(1,1) < P(-1,-1)")
    h11, h1m, hmm = kernel.h(1, 1), kernel.h(1, -1), kernel.h(-1, -1)
    tail = q * kernel.h1 + (1 - q) * kernel.h2
    if alternate:
        u3 = h11 + (1 - p) / (q - p) * tail
    else:
        u3 = (p * (1 - q) * h11 + q * (1 - p) * hmm + (1 - p) * (1 - q) * kernel.h2) / (q - p)
    u1 = h1m + p / (1 - p) * (u3 + h11)
    u2 = -h11 + (1 - q) / (1 - p) * (u3 + h11) + tail
    return u1, u2, u3


def classify_tail(kernel, tol=None, boundary_band=None) -> DepletionLaw:
    """Classify a validated kernel as balanced or strict and attach coefficients.

    ``|P(1,1) - P(-1,-1)| <= tol`` counts as balanced. Kernels within
    ``boundary_band`` of the boundary carry both coefficient sets and are
    marked ``near_boundary``.
    """
    tol = config.TOLERANCES.balanced if tol is None else tol
    band = config.TOLERANCES.boundary_band if boundary_band is None else boundary_band
    errors = [e for e in validate_side(kernel) if e.startswith("error")]
    if errors:
        raise ValueError("invalid kernel: " + "; ".join(errors))
    gap = kernel.pm1m1 - kernel.p11
    near = abs(gap) <= band
    if abs(gap) <= tol:
        return DepletionLaw(kernel, BALANCED, kernel.p11, near_boundary=near)
    u1, u2, u3 = strict_u(kernel)
    return DepletionLaw(kernel, STRICT, kernel.p11, u1, u2, u3, near_boundary=near)


def characteristic_time(kernel):
    """Mean time between two events, a natural time unit for the side."""
    return 0.5 * sum(kernel.P[(i, j)] * kernel.h(i, j) for i in (1, -1) for j in (1, -1))


# ---------------------------------------------------------------------------
# numerical inversion
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class InversionResult:
    """Values of an inverted cdf/density with per-point diagnostics.

    ``clamp`` is how far the raw value had to be moved to land in the valid
    range; ``low_confidence`` marks points whose error estimate exceeds the
    requested tolerance.
    """

    t: np.ndarray
    value: np.ndarray
    error: np.ndarray
    x_max: np.ndarray
    cells: np.ndarray
    clamp: np.ndarray
    low_confidence: np.ndarray

    @property
    def any_low_confidence(self):
        return bool(np.any(self.low_confidence))


def _gp_single(cf, t, kind, tol, min_cells, max_cells, t_scale=None):
    """Gil-Pelaez integral for one ``t`` by oscillation cells + extrapolation.

    ``kind == "cdf"``: returns ``int_0^inf Im(exp(-i t x) phi(x)) / x dx``;
    ``kind == "pdf"``: returns ``int_0^inf Re(exp(-i t x) phi(x)) dx``.
    The first cell is integrated in ``u = sqrt(x)``, which removes the
    ``x**-0.5`` behaviour of the cdf integrand for heavy-tailed laws.
    """
    width = math.pi / t

    if kind == "cdf":
        def g(x):
            return (np.exp(-1j * t * x) * cf(x)).imag / x
    else:
        def g(x):
            return (np.exp(-1j * t * x) * cf(x)).real

    def g_u(u):
        return 2.0 * u * g(u * u)

    cell_tol = 0.1 * tol
    # the first cell spans every scale of phi when t is small: split it
    # geometrically (in u) so each scale gets its own tolerance share
    u_top = math.sqrt(width)
    x_lo = 1e-3 * min(width, 1.0 / t_scale) if t_scale else 1e-10 * width
    u_lo = math.sqrt(x_lo)
    n_geo = max(1, int(math.ceil(math.log2(u_top / u_lo))))
    u_edges = np.concatenate([[0.0], u_top * 2.0 ** -np.arange(n_geo, -1, -1)])
    first, e_first, ok0 = adaptive_gk_cells(g_u, u_edges, atol=cell_tol / u_edges.size)
    sums = [first.real.sum()]
    errs = [e_first.sum()]
    ok = ok0
    k = 1
    n_cells = min_cells
    prev = None
    while True:
        edges = width * np.arange(k, n_cells + 1)
        v, e, okc = adaptive_gk_cells(g, edges, atol=cell_tol)
        ok = ok and okc
        sums.extend(v.real)
        errs.extend(e)
        k = n_cells
        partial = np.cumsum(sums)
        quad_err = float(np.sum(errs))
        tail_terms = np.abs(np.asarray(sums[-4:]))
        if tail_terms.max() < 0.01 * tol:
            return partial[-1], quad_err, n_cells, ok
        window = partial[-min(40, partial.size - 1):]
        lim, werr = wynn_epsilon(window)
        err = float(abs(werr)) + quad_err
        if prev is not None:
            err = max(err, abs(lim - prev))
            if err < tol:
                return lim, err, n_cells, ok
        if n_cells >= max_cells:
            return lim, err, n_cells, False
        prev = lim
        n_cells = min(2 * n_cells, max_cells)


def _invert(cf, t_eval, kind, tol, min_cells, max_cells, t_scale=None):
    t_eval = np.atleast_1d(np.asarray(t_eval, dtype=float))
    if np.any(t_eval <= 0):
        raise ValueError("t_eval must be > 0")
    vals = np.empty(t_eval.shape)
    errs = np.empty(t_eval.shape)
    xmax = np.empty(t_eval.shape)
    cells = np.empty(t_eval.shape, dtype=int)
    conv = np.empty(t_eval.shape, dtype=bool)
    for idx, t in np.ndenumerate(t_eval):
        I, err, nc, ok = _gp_single(cf, float(t), kind, tol, min_cells, max_cells, t_scale)
        vals[idx] = I
        errs[idx] = err
        cells[idx] = nc
        xmax[idx] = nc * math.pi / t
        conv[idx] = ok and err <= tol
    return vals, errs, xmax, cells, conv


def invert_cdf(cf, t_eval, tol=None, min_cells=None, max_cells=None,
               t_scale=None) -> InversionResult:
    """Distribution function from a characteristic function (Gil-Pelaez).

    ``F(t) = 1/2 - (1/pi) int_0^inf Im(exp(-i t x) phi(x)) / x dx``. The
    integral is split at the half-periods ``k pi / t`` of the oscillating
    factor; each cell is integrated adaptively and the sequence of partial
    sums is extrapolated with Wynn's epsilon algorithm, cell count doubling
    until two successive limits agree.

    Parameters
    ----------
    cf : callable
        Vectorized ``x -> phi(x)`` for ``x >= 0``.
    t_eval : array_like
        Positive evaluation times.
    """
    tc = config.TOLERANCES
    tol = tc.inversion if tol is None else tol
    vals, errs, xmax, cells, conv = _invert(
        cf, t_eval, "cdf", tol, min_cells or tc.min_cells, max_cells or tc.max_cells,
        t_scale)
    raw = 0.5 - vals / math.pi
    err = errs / math.pi
    F = np.clip(raw, 0.0, 1.0)
    return InversionResult(np.atleast_1d(np.asarray(t_eval, float)), F, err, xmax, cells,
                           np.abs(F - raw), ~conv)


def invert_pdf(cf, t_eval, tol=None, min_cells=None, max_cells=None,
               t_scale=None) -> InversionResult:
    """Density ``f(t) = (1/pi) int_0^inf Re(exp(-i t x) phi(x)) dx``.

    Same cell/extrapolation scheme as :func:`invert_cdf`; the tolerance is
    absolute on the density.
    """
    tc = config.TOLERANCES
    tol = tc.inversion if tol is None else tol
    vals, errs, xmax, cells, conv = _invert(
        cf, t_eval, "pdf", tol, min_cells or tc.min_cells, max_cells or tc.max_cells,
        t_scale)
    raw = vals / math.pi
    f = np.maximum(raw, 0.0)
    return InversionResult(np.atleast_1d(np.asarray(t_eval, float)), f, errs / math.pi,
                           xmax, cells, np.abs(f - raw), ~conv)


# ---------------------------------------------------------------------------
# lattice laws (deterministic / empirical durations)
# ---------------------------------------------------------------------------

def lattice_step(kernel, max_denominator=10_000):
    """Common lattice spacing of all durations, or None for continuous laws."""
    points = []
    for d in kernel.distinct_durations():
        if isinstance(d, Deterministic):
            points.append(d.value)
        elif isinstance(d, EmpiricalStep):
            points.extend(d.support)
        else:
            return None
    fracs = [Fraction(p).limit_denominator(max_denominator) for p in points if p > 0]
    if not fracs or any(abs(float(f) - p) > 1e-12 * max(1.0, p)
                        for f, p in zip(fracs, [p for p in points if p > 0])):
        return None
    num = 0
    den = 1
    for f in fracs:
        den = den * f.denominator // math.gcd(den, f.denominator)
    for f in fracs:
        num = math.gcd(num, f.numerator * (den // f.denominator))
    return num / den


def lattice_pmf(kernel, n, step=None, size=2**16, conditioning=None):
    """``P[sigma = k * step | q0 = n]`` for ``k < size`` by discrete Fourier inversion.

    Sampling the characteristic function at ``size`` equispaced points of a
    full period gives the pmf aliased with period ``size``; the aliasing
    error per point is bounded by ``P[sigma >= size * step]`` spread over the
    aliased copies, i.e. far below the tolerance for the sizes used here.
    """
    step = lattice_step(kernel) if step is None else step
    if step is None:
        raise ValueError("kernel durations do not live on a lattice")
    x = 2.0 * np.pi * np.arange(size) / (size * step)
    phi = sigma_transform(kernel, -1j * x, n, conditioning)
    pmf = np.fft.fft(phi).real / size
    return np.clip(pmf, 0.0, None), step


# ---------------------------------------------------------------------------
# convenience wrappers on a kernel
# ---------------------------------------------------------------------------

def _cf_of(kernel, n):
    return lambda x: sigma_transform(kernel, -1j * x, n)


def sigma_cdf(kernel, t, n, tol=None) -> InversionResult:
    """``P[sigma <= t | q0 = n]`` for the given kernel (lattice-aware)."""
    t = np.atleast_1d(np.asarray(t, dtype=float))
    step = lattice_step(kernel)
    if step is not None:
        size = _lattice_size(t, step)
        pmf, _ = lattice_pmf(kernel, n, step, size)
        cdf = np.cumsum(pmf)
        k = np.floor(t / step + 1e-9).astype(int)
        val = np.where(k < 0, 0.0, cdf[np.clip(k, 0, size - 1)])
        z = np.zeros(t.shape)
        return InversionResult(t, np.clip(val, 0, 1), z, z + 2 * np.pi / step,
                               np.full(t.shape, size), z, np.zeros(t.shape, bool))
    return invert_cdf(_cf_of(kernel, n), t, tol, t_scale=characteristic_time(kernel))


def sigma_survival(kernel, t, n, tol=None) -> InversionResult:
    r = sigma_cdf(kernel, t, n, tol)
    return InversionResult(r.t, 1.0 - r.value, r.error, r.x_max, r.cells, r.clamp,
                           r.low_confidence)


def sigma_pdf(kernel, t, n, tol=None) -> InversionResult:
    if lattice_step(kernel) is not None:
        raise ValueError("lattice laws have no density; use lattice_pmf")
    return invert_pdf(_cf_of(kernel, n), t, tol, t_scale=characteristic_time(kernel))


def _lattice_size(t, step):
    need = int(np.max(t) / step) + 1 if t.size else 1
    size = 2**14
    while size < 64 * need:
        size *= 2
    return size


# ---------------------------------------------------------------------------
# time to the next price move
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TauSurvival:
    """``P[tau > t]`` with the asymptotic regime of its tail."""

    t: np.ndarray
    value: np.ndarray
    error: np.ndarray
    low_confidence: np.ndarray
    exponent: float
    coefficient: float

    def asymptote(self, t=None):
        t = self.t if t is None else np.asarray(t, dtype=float)
        return self.coefficient / t**self.exponent


def tau_tail(bid_law: DepletionLaw, ask_law: DepletionLaw, n_b, n_a):
    """Exponent and coefficient of ``P[tau > t] ~ C / t**e``."""
    e = ask_law.exponent + bid_law.exponent
    return e, float(ask_law.coefficient(n_a) * bid_law.coefficient(n_b))


def tau_survival(bid_law, ask_law, t, n_b, n_a, tol=None) -> TauSurvival:
    """``P[tau > t | q0 = (n_b, n_a)]``: product of the two sides' survivals."""
    if n_b < 1 or n_a < 1:
        raise ValueError("queue sizes must be >= 1")
    sa = sigma_survival(ask_law.kernel, t, n_a, tol)
    sb = sigma_survival(bid_law.kernel, t, n_b, tol)
    e, coef = tau_tail(bid_law, ask_law, n_b, n_a)
    err = sa.error * sb.value + sb.error * sa.value
    return TauSurvival(sa.t, sa.value * sb.value, err, sa.low_confidence | sb.low_confidence,
                       e, coef)


# ---------------------------------------------------------------------------
# frequency-domain functionals of two independent depletion times
# ---------------------------------------------------------------------------

def _half_line(fun, scale, tol):
    """``int_0^inf fun(x) dx`` by the exp-sinh rule at two step sizes.

    The integrand must be smooth in ``log x``; algebraic behaviour at both
    ends is fine. The error estimate is the difference between the two
    step sizes.
    """
    vals = []
    for h in (1.0 / 16, 1.0 / 32):
        r, w = exp_sinh_rule(h=h, u_max=6.0)
        x = r * scale
        keep = (x > 1e-200) & (x < 1e200)
        with np.errstate(over="ignore", under="ignore", invalid="ignore"):
            fx = fun(x[keep])
        fx = np.where(np.isfinite(fx), fx, 0.0)
        vals.append(float(np.sum(fx * w[keep]) * scale))
    err = abs(vals[1] - vals[0])
    return vals[1], err, err <= tol


def prob_ask_first(bid: KernelSide, ask: KernelSide, n_b, n_a, tol=1e-9):
    """``P[sigma_a < sigma_b]`` from the two characteristic functions.

    With ``D = sigma_b - sigma_a`` (characteristic function
    ``phi_b(x) conj(phi_a(x))``) and no atom at zero,
    ``P[D > 0] = 1/2 + (1/pi) int_0^inf Im(phi_b conj(phi_a)) / x dx``.
    Returns ``(value, error_estimate, converged)``.
    """
    scale = 1.0 / max(characteristic_time(bid), characteristic_time(ask))

    def fun(x):
        pa = sigma_transform(ask, -1j * x, n_a)
        pb = sigma_transform(bid, -1j * x, n_b)
        return (pb * np.conj(pa)).imag / x

    I, err, ok = _half_line(fun, scale, tol)
    return 0.5 + I / math.pi, err / math.pi, ok


def mean_min(bid: KernelSide, ask: KernelSide, n_b, n_a, tol=1e-9):
    """``E[min(sigma_a, sigma_b)] = int_0^inf S_a S_b dt`` by Parseval.

    The Fourier transform of a survival function ``S`` on ``[0, inf)`` is
    ``(phi(x) - 1) / (i x)``, so the time integral of ``S_a S_b`` equals
    ``(1/pi) int_0^inf Re[(phi_a - 1) conj(phi_b - 1)] / x**2 dx``.
    Infinite when both sides are balanced.
    """
    scale = 1.0 / max(characteristic_time(bid), characteristic_time(ask))

    def fun(x):
        ca = transform_solution(ask, -1j * x).complement(n_a, ask.v0)
        cb = transform_solution(bid, -1j * x).complement(n_b, bid.v0)
        return (ca * np.conj(cb)).real / (x * x)

    I, err, ok = _half_line(fun, scale, tol)
    return I / math.pi, err / math.pi, ok
