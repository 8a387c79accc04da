"""The price process: direction and timing of successive one-tick moves.

After every price change both queues restart from sizes drawn from ``f``
(after an up-move) or ``f~`` (after a down-move), so the increments
``X_n = +/- delta`` form a two-state Markov chain whose transition
probabilities are mixtures of

    p1_up(n_b, n_a) = P[sigma_a < sigma_b | q0 = (n_b, n_a)],

the probability that the ask queue depletes first. From the chain we get the
stationary up-probability, the asymptotic drift and variance of the price,
and (with the mean or tail scale of the times between moves) the constants
of its diffusion limit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import config
from .depletion import (
    BALANCED,
    STRICT,
    _half_line,
    characteristic_time,
    classify_tail,
    invert_cdf,
    invert_pdf,
    lattice_pmf,
    lattice_step,
    sigma_cdf,
    transform_solution,
)
from .kernel import KernelSide, ReinitDistribution
from .quadrature import exp_sinh_rule

MIXED = "mixed"


class RegimeError(ValueError):
    """Raised when the requested constants do not exist in the detected regime."""


class SupportError(ValueError):
    """A reinitialization law reaches queue sizes the p_up table does not cover."""


# ---------------------------------------------------------------------------
# probability that the next move is up
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class P1Up:
    value: float
    error: float
    low_confidence: bool
    method: str


def _common_step(bid, ask):
    sb, sa = lattice_step(bid), lattice_step(ask)
    if sb is None or sa is None:
        return None
    fb = Fraction(sb).limit_denominator(10_000)
    fa = Fraction(sa).limit_denominator(10_000)
    den = fb.denominator * fa.denominator // math.gcd(fb.denominator, fa.denominator)
    num = math.gcd(fb.numerator * (den // fb.denominator), fa.numerator * (den // fa.denominator))
    return num / den


def _is_lattice(kernel):
    return lattice_step(kernel) is not None


def _lattice_survivals(bid, ask, n_b_values, n_a_values, size=2**18):
    """Survival sequences ``P[sigma > k step]`` for each requested queue size."""
    step = _common_step(bid, ask)
    surv_b = {n: 1.0 - np.cumsum(lattice_pmf(bid, n, step, size)[0]) for n in n_b_values}
    surv_a = {}
    pmf_a = {}
    for n in n_a_values:
        pmf = lattice_pmf(ask, n, step, size)[0]
        pmf_a[n] = pmf
        surv_a[n] = 1.0 - np.cumsum(pmf)
    return step, surv_b, surv_a, pmf_a


def _lattice_p1_up(bid, ask, n_b, n_a, tol):
    step, sb, sa, pa = _lattice_survivals(bid, ask, [n_b], [n_a])
    # up iff sigma_a < sigma_b strictly (simultaneous depletions go to the bid)
    value = float(np.dot(pa[n_a], sb[n_b]))
    err = float(abs(sa[n_a][-1]) + abs(sb[n_b][-1]))
    return P1Up(min(max(value, 0.0), 1.0), err, err > tol, "lattice")


def _freq_nodes(scale):
    nodes = []
    for h in (1.0 / 16, 1.0 / 32):
        r, w = exp_sinh_rule(h=h, u_max=6.0)
        x = r * scale
        keep = (x > 1e-200) & (x < 1e200)
        nodes.append((x[keep], w[keep] * scale))
    return nodes


def _freq_scale(bid, ask):
    return 1.0 / max(characteristic_time(bid), characteristic_time(ask))


def p1_up(bid: KernelSide, ask: KernelSide, n_b: int, n_a: int, method="frequency",
          tol=None) -> P1Up:
    """Probability that the ask queue depletes before the bid queue.

    Parameters
    ----------
    bid, ask : KernelSide
        Kernels of the two sides.
    n_b, n_a : int
        Queue sizes right after the last price change.
    method : {"frequency", "time"}
        ``"frequency"`` integrates ``Im(phi_b conj(phi_a)) / x`` over the
        half line; ``"time"`` integrates ``f_a(t) P[sigma_b > t]`` on a
        geometric time grid with a power-law tail closure. Both durations on
        a lattice always use the exact discrete sum.
    """
    if n_b < 1 or n_a < 1:
        raise ValueError("queue sizes must be >= 1")
    tol = config.TOLERANCES.functional if tol is None else tol
    if _is_lattice(bid) and _is_lattice(ask):
        return _lattice_p1_up(bid, ask, n_b, n_a, tol)
    if _is_lattice(bid) or _is_lattice(ask):
        raise ValueError("p1_up needs both sides continuous or both on a lattice")
    if method == "frequency":
        table = p1_up_table(bid, ask, pairs=[(n_b, n_a)], tol=tol)
        return P1Up(float(table.values[n_b - 1, n_a - 1]), float(table.errors[n_b - 1, n_a - 1]),
                    bool(table.low_confidence[n_b - 1, n_a - 1]), "frequency")
    if method == "time":
        return _p1_up_time(bid, ask, n_b, n_a)
    raise ValueError(f"unknown method {method!r}")


def _p1_up_time(bid, ask, n_b, n_a, tail_cut=1e-4, points_per_decade=24):
    """``int_0^inf f_a(t) S_b(t) dt`` on a geometric grid (cross-check route)."""
    law_a, law_b = classify_tail(ask), classify_tail(bid)
    ea, eb = law_a.exponent, law_b.exponent
    t0 = min(characteristic_time(bid), characteristic_time(ask))
    t_lo = 1e-4 * t0
    cf_a = _cf(ask, n_a)
    cf_b = _cf(bid, n_b)
    tscale_a, tscale_b = characteristic_time(ask), characteristic_time(bid)
    # extend the grid decade by decade until the tail estimate is small
    t_hi = 100.0 * max(tscale_a, tscale_b)
    while True:
        ndec = math.log10(t_hi / t_lo)
        npts = int(math.ceil(ndec * points_per_decade)) | 1
        t = np.geomspace(t_lo, t_hi, npts)
        Sb_end = 1.0 - invert_cdf(cf_b, [t_hi], t_scale=tscale_b).value[0]
        Sa_end = 1.0 - invert_cdf(cf_a, [t_hi], t_scale=tscale_a).value[0]
        tail = ea / (ea + eb) * Sa_end * Sb_end
        if tail < tail_cut or t_hi > 1e12 * t0:
            break
        t_hi *= 10.0
    fa = invert_pdf(cf_a, t, t_scale=tscale_a)
    Fb = invert_cdf(cf_b, t, t_scale=tscale_b)
    Fa_lo = invert_cdf(cf_a, [t_lo], t_scale=tscale_a)
    g = fa.value * (1.0 - Fb.value) * t
    # Simpson in log t
    h = math.log(t[1] / t[0])
    body = h / 3.0 * (g[0] + g[-1] + 4.0 * g[1:-1:2].sum() + 2.0 * g[2:-1:2].sum())
    head = Fa_lo.value[0]
    value = head + body + tail
    # error: inversion errors, Simpson step halving, head and tail sizes
    coarse = 2 * h / 3.0 * (g[0] + g[-1] + 4.0 * g[2:-2:4].sum() + 2.0 * g[4:-2:4].sum()) \
        if npts >= 9 else body
    err = (float(np.sum(fa.error * t) * h + np.max(Fb.error)) + abs(body - coarse) / 15.0
           + head * Fb.value[0] + tail)
    low = bool(fa.any_low_confidence or Fb.any_low_confidence)
    return P1Up(float(min(max(value, 0.0), 1.0)), err, low, "time")


def _cf(kernel, n):
    return lambda x: transform_solution(kernel, -1j * x).value(n, kernel.v0)


@dataclass(frozen=True)
class P1UpTable:
    """``p1_up(n_b, n_a)`` on a square ``n_max x n_max`` grid.

    ``values[n_b - 1, n_a - 1]``; cells not requested are NaN.
    """

    n_max: int
    values: np.ndarray
    errors: np.ndarray
    low_confidence: np.ndarray
    method: str

    def __call__(self, n_b, n_a):
        if not (1 <= n_b <= self.n_max and 1 <= n_a <= self.n_max):
            raise SupportError(f"({n_b}, {n_a}) outside the p1_up table; extend N_max "
                               f"beyond {self.n_max}")
        v = self.values[n_b - 1, n_a - 1]
        if np.isnan(v):
            raise SupportError(f"({n_b}, {n_a}) was not tabulated; extend the table")
        return float(v)

    def check_covers(self, dist: ReinitDistribution):
        for (n_b, n_a), w in dist.items():
            if w > 0:
                self(n_b, n_a)

    def to_list(self):
        rows = []
        for i, j in zip(*np.nonzero(~np.isnan(self.values))):
            rows.append([int(i) + 1, int(j) + 1, float(self.values[i, j]),
                         float(self.errors[i, j]), bool(self.low_confidence[i, j])])
        return rows


def p1_up_table(bid: KernelSide, ask: KernelSide, n_max=None, pairs=None, tol=None) -> P1UpTable:
    """Tabulate ``p1_up`` on all pairs up to ``n_max`` (or on the given pairs).

    The transform solutions of each side are computed once on the quadrature
    nodes; every ``(n_b, n_a)`` then costs only a power of the root.
    """
    tol = config.TOLERANCES.functional if tol is None else tol
    if pairs is None:
        if n_max is None:
            raise ValueError("give n_max or pairs")
        pairs = [(i, j) for i in range(1, n_max + 1) for j in range(1, n_max + 1)]
    pairs = [(int(b), int(a)) for b, a in pairs]
    if any(b < 1 or a < 1 for b, a in pairs):
        raise ValueError("queue sizes must be >= 1")
    size = max(max(b, a) for b, a in pairs)
    n_max = size if n_max is None else max(n_max, size)
    vals = np.full((n_max, n_max), np.nan)
    errs = np.full((n_max, n_max), np.nan)
    low = np.zeros((n_max, n_max), dtype=bool)
    if _is_lattice(bid) and _is_lattice(ask):
        nbs = sorted({b for b, _ in pairs})
        nas = sorted({a for _, a in pairs})
        _, sb, sa, pa = _lattice_survivals(bid, ask, nbs, nas)
        for b, a in pairs:
            vals[b - 1, a - 1] = min(max(float(np.dot(pa[a], sb[b])), 0.0), 1.0)
            errs[b - 1, a - 1] = abs(sa[a][-1]) + abs(sb[b][-1])
            low[b - 1, a - 1] = errs[b - 1, a - 1] > tol
        return P1UpTable(n_max, vals, errs, low, "lattice")
    if _is_lattice(bid) or _is_lattice(ask):
        raise ValueError("p1_up needs both sides continuous or both on a lattice")
    estimates = []
    for x, w in _freq_nodes(_freq_scale(bid, ask)):
        sol_a = transform_solution(ask, -1j * x)
        sol_b = transform_solution(bid, -1j * x)
        est = {}
        for b, a in pairs:
            pa = sol_a.value(a, ask.v0)
            pb = sol_b.value(b, bid.v0)
            fx = (pb * np.conj(pa)).imag / x
            fx = np.where(np.isfinite(fx), fx, 0.0)
            est[(b, a)] = float(np.sum(fx * w))
        estimates.append(est)
    for b, a in pairs:
        I = estimates[1][(b, a)]
        e = abs(I - estimates[0][(b, a)])
        vals[b - 1, a - 1] = min(max(0.5 + I / math.pi, 0.0), 1.0)
        errs[b - 1, a - 1] = e / math.pi
        low[b - 1, a - 1] = e / math.pi > tol
    return P1UpTable(n_max, vals, errs, low, "frequency")


# ---------------------------------------------------------------------------
# mean time between price moves
# ---------------------------------------------------------------------------

def mean_tau(bid: KernelSide, ask: KernelSide, n_b: int, n_a: int, tol=None):
    """``E[tau | q0 = (n_b, n_a)]`` with ``tau = min(sigma_a, sigma_b)``.

    Returns ``(value, error, low_confidence)``; infinite when both sides are
    balanced. Continuous laws use the Parseval identity on the two
    characteristic functions; lattice laws sum the product of survivals.
    """
    tol = config.TOLERANCES.functional if tol is None else tol
    if classify_tail(bid).tail_class == BALANCED and classify_tail(ask).tail_class == BALANCED:
        return math.inf, 0.0, False
    if _is_lattice(bid) and _is_lattice(ask):
        step, sb, sa, _ = _lattice_survivals(bid, ask, [n_b], [n_a])
        # P[min > k step] is constant on [k step, (k+1) step)
        prod = sa[n_a] * sb[n_b]
        val = step * (1.0 + float(np.sum(prod[:-1])))
        err = step * float(prod[-1]) * sa[n_a].size
        return val, err, err > tol * max(1.0, val)
    if _is_lattice(bid) or _is_lattice(ask):
        raise ValueError("mean_tau needs both sides continuous or both on a lattice")
    scale = _freq_scale(bid, ask)

    def fun(x):
        ca = transform_solution(ask, -1j * x).complement(n_a, ask.v0)
        cb = transform_solution(bid, -1j * x).complement(n_b, bid.v0)
        return (ca * np.conj(cb)).real / (x * x)

    I, err, _ = _half_line(fun, scale, tol)
    val, err = I / math.pi, err / math.pi
    return val, err, err > tol * max(1.0, abs(val))


def mean_tau_time(bid, ask, n_b, n_a, points_per_decade=24, tail_cut=1e-6):
    """``int_0^inf P[tau > t] dt`` from inverted survivals (cross-check route).

    Beyond the last grid point the survival product is closed with the
    power law of the detected tail classes (exponent ``e_a + e_b > 1``).
    """
    law_a, law_b = classify_tail(ask), classify_tail(bid)
    e = law_a.exponent + law_b.exponent
    if e <= 1.0:
        return math.inf, 0.0, False
    t0 = min(characteristic_time(bid), characteristic_time(ask))
    t_lo = 1e-4 * t0
    t_hi = 100.0 * max(characteristic_time(bid), characteristic_time(ask))
    while True:
        npts = int(math.ceil(math.log10(t_hi / t_lo) * points_per_decade)) | 1
        t = np.geomspace(t_lo, t_hi, npts)
        Sa = 1.0 - sigma_cdf(ask, t, n_a).value
        Sb = 1.0 - sigma_cdf(bid, t, n_b).value
        tail = Sa[-1] * Sb[-1] * t_hi / (e - 1.0)
        if tail < tail_cut or t_hi > 1e12 * t0:
            break
        t_hi *= 10.0
    g = Sa * Sb * t
    h = math.log(t[1] / t[0])
    body = h / 3.0 * (g[0] + g[-1] + 4.0 * g[1:-1:2].sum() + 2.0 * g[2:-1:2].sum())
    return float(t_lo + body + tail), float(tail), False


# ---------------------------------------------------------------------------
# the increment chain
# ---------------------------------------------------------------------------

def stationary_up(p_cont, p_cont_prime):
    """``pi* = (p' - 1) / (p + p' - 2)``, the stationary probability of an up-move."""
    den = p_cont + p_cont_prime - 2.0
    if den == 0.0:
        raise ValueError("p_cont = p'_cont = 1: the chain is not irreducible")
    return (p_cont_prime - 1.0) / den


def sigma2_closed_form(p_cont, p_cont_prime, delta=1.0):
    """Asymptotic variance per move of the centred price, in closed form."""
    pi = stationary_up(p_cont, p_cont_prime)
    den = (p_cont + p_cont_prime - 2.0) ** 2
    return 4.0 * delta**2 * ((1.0 - p_cont_prime + pi * (p_cont_prime - p_cont)) / den
                             - pi * (1.0 - pi))


def poisson_solution(P, b, pi):
    """``g = (P + Pi* - I)^{-1} b``: the solution of ``(P - I) g = b`` with ``Pi* g = 0``."""
    Pi = np.tile([pi, 1.0 - pi], (2, 1))
    return np.linalg.solve(P + Pi - np.eye(2), b)


def poisson_closed_form(p_cont, p_cont_prime, delta=1.0):
    """Closed-form ``(g(+delta), g(-delta))`` of the Poisson equation."""
    pi = stationary_up(p_cont, p_cont_prime)
    s = delta * (2.0 * pi - 1.0)
    den = p_cont + p_cont_prime - 2.0
    g_up = delta * (p_cont_prime - p_cont + 2.0 * (1.0 - pi)) / den - s
    g_down = delta * (p_cont_prime - p_cont - 2.0 * pi) / den - s
    return np.array([g_up, g_down])


def sigma2_martingale(p_cont, p_cont_prime, delta=1.0):
    """The same variance as ``sum_i pi*(i) v(i)`` from the martingale decomposition.

    ``v(i)`` is the second moment of the increment ``b(i) - g(X_k) + g(i)``
    of the martingale part given ``X_{k-1} = i``. Returns ``(sigma2, g, v)``.
    """
    pi = stationary_up(p_cont, p_cont_prime)
    s = delta * (2.0 * pi - 1.0)
    P = np.array([[p_cont, 1.0 - p_cont], [1.0 - p_cont_prime, p_cont_prime]])
    b = np.array([delta - s, -delta - s])
    g = poisson_solution(P, b, pi)
    switch = np.array([1.0 - p_cont, 1.0 - p_cont_prime])
    jump = np.array([g[1] - g[0], g[0] - g[1]])
    v = b**2 + switch * jump**2 - 2.0 * b * switch * jump
    return float(pi * v[0] + (1.0 - pi) * v[1]), g, v


@dataclass(frozen=True)
class PriceChainParams:
    """The two-state Markov renewal process of price increments.

    States are ordered ``(+delta, -delta)`` in every vector and matrix.
    """

    delta: float
    p_cont: float
    p_cont_prime: float
    P: np.ndarray
    pi_star: float
    s_star: float
    sigma2: float
    sigma2_martingale: float
    g: np.ndarray
    g_closed: np.ndarray
    b: np.ndarray
    v: np.ndarray
    Pi_star: np.ndarray
    regime: str
    tail_exponent: float
    tau_star: float | None = None
    m_up: float | None = None
    m_down: float | None = None
    m_tau: float | None = None
    p1_table: P1UpTable | None = field(default=None, repr=False)
    low_confidence: bool = False
    notes: tuple = ()
    bid: KernelSide | None = field(default=None, repr=False)
    ask: KernelSide | None = field(default=None, repr=False)
    f: ReinitDistribution | None = field(default=None, repr=False)
    f_tilde: ReinitDistribution | None = field(default=None, repr=False)

    def poisson_residual(self):
        return float(np.max(np.abs((self.P - np.eye(2)) @ self.g - self.b)))

    def sojourn_cdf(self, t, direction=1):
        """``P[tau_n <= t | X_{n-1} = direction * delta]``: mixture of ``tau`` cdfs."""
        if self.bid is None:
            raise ValueError("kernels not attached")
        dist = self.f if direction > 0 else self.f_tilde
        t = np.atleast_1d(np.asarray(t, dtype=float))
        out = np.zeros(t.shape)
        for (n_b, n_a), w in dist.items():
            Sa = 1.0 - sigma_cdf(self.ask, t, n_a).value
            Sb = 1.0 - sigma_cdf(self.bid, t, n_b).value
            out += w * (1.0 - Sa * Sb)
        return out

    def to_dict(self):
        d = {
            "delta": self.delta,
            "p_cont": self.p_cont,
            "p_cont_prime": self.p_cont_prime,
            "pi_star": self.pi_star,
            "s_star": self.s_star,
            "sigma2": self.sigma2,
            "sigma2_martingale": self.sigma2_martingale,
            "regime": self.regime,
            "tail_exponent": self.tail_exponent,
            "g": [float(x) for x in self.g],
            "g_closed": [float(x) for x in self.g_closed],
            "poisson_residual": self.poisson_residual(),
            "low_confidence": self.low_confidence,
            "notes": list(self.notes),
        }
        if self.regime == BALANCED:
            d["tau_star"] = self.tau_star
        else:
            d["m_tau"] = self.m_tau
            d["m_up"] = self.m_up
            d["m_down"] = self.m_down
        if self.p1_table is not None:
            d["p1_up_table"] = self.p1_table.to_list()
        return d


def detect_regime(bid: KernelSide, ask: KernelSide):
    """``(regime, tail exponent of tau)`` from the two sides' tail classes."""
    cb, ca = classify_tail(bid).tail_class, classify_tail(ask).tail_class
    exponent = classify_tail(bid).exponent + classify_tail(ask).exponent
    if cb == ca == BALANCED:
        return BALANCED, exponent
    if cb == ca == STRICT:
        return STRICT, exponent
    return MIXED, exponent


def chain_from_probabilities(p_cont, p_cont_prime, delta=1.0, regime=STRICT, tail_exponent=2.0,
                             **extra) -> PriceChainParams:
    """Chain parameters from the two continuation probabilities alone."""
    if not (0.0 <= p_cont <= 1.0 and 0.0 <= p_cont_prime <= 1.0):
        raise ValueError("continuation probabilities must lie in [0, 1]")
    pi = stationary_up(p_cont, p_cont_prime)
    P = np.array([[p_cont, 1.0 - p_cont], [1.0 - p_cont_prime, p_cont_prime]])
    s = delta * (2.0 * pi - 1.0)
    s2m, g, v = sigma2_martingale(p_cont, p_cont_prime, delta)
    return PriceChainParams(
        delta=delta, p_cont=p_cont, p_cont_prime=p_cont_prime, P=P, pi_star=pi, s_star=s,
        sigma2=sigma2_closed_form(p_cont, p_cont_prime, delta), sigma2_martingale=s2m,
        g=g, g_closed=poisson_closed_form(p_cont, p_cont_prime, delta),
        b=np.array([delta - s, -delta - s]), v=v, Pi_star=np.tile([pi, 1.0 - pi], (2, 1)),
        regime=regime, tail_exponent=tail_exponent, **extra)


def chain_params(bid: KernelSide, ask: KernelSide, f: ReinitDistribution,
                 f_tilde: ReinitDistribution, delta=1.0, table: P1UpTable | None = None,
                 tol=None, with_means=True) -> PriceChainParams:
    """Assemble the increment chain and its regime constants.

    ``table`` may be a precomputed :func:`p1_up_table`; a reinitialization law
    reaching outside it raises :class:`SupportError`. In the balanced regime
    ``tau_star = sum alpha_b(n) alpha_a(p) f*(n, p)`` is filled in; in the
    strict regime the mean sojourns ``m(+delta), m(-delta)`` and ``m_tau``.
    The mixed regime gets neither (see :func:`diffusion_constants`).
    """
    support = sorted({p for p, w in f.items() if w > 0} | {p for p, w in f_tilde.items() if w > 0})
    if table is None:
        table = p1_up_table(bid, ask, pairs=support, tol=tol)
    table.check_covers(f)
    table.check_covers(f_tilde)
    p_cont = sum(w * table(nb, na) for (nb, na), w in f.items())
    p_cont_prime = sum(w * (1.0 - table(nb, na)) for (nb, na), w in f_tilde.items())
    low = bool(any(table.low_confidence[nb - 1, na - 1] for nb, na in support))
    regime, exponent = detect_regime(bid, ask)
    pi = stationary_up(p_cont, p_cont_prime)
    extra = {}
    notes = []
    if regime == BALANCED:
        law_b, law_a = classify_tail(bid), classify_tail(ask)
        fstar = {}
        for (nb, na), w in f.items():
            fstar[(nb, na)] = fstar.get((nb, na), 0.0) + pi * w
        for (nb, na), w in f_tilde.items():
            fstar[(nb, na)] = fstar.get((nb, na), 0.0) + (1.0 - pi) * w
        extra["tau_star"] = float(sum(w * law_b.alpha(nb) * law_a.alpha(na)
                                      for (nb, na), w in fstar.items()))
    elif regime == STRICT and with_means:
        means = {}
        for nb, na in support:
            val, _, lc = mean_tau(bid, ask, nb, na, tol)
            means[(nb, na)] = val
            low = low or lc
        m_up = sum(w * means[p] for p, w in f.items())
        m_down = sum(w * means[p] for p, w in f_tilde.items())
        extra.update(m_up=float(m_up), m_down=float(m_down),
                     m_tau=float(pi * m_up + (1.0 - pi) * m_down))
    elif regime == MIXED:
        notes.append("mixed balanced/strict regime: tau tail exponent 3/2; "
                     "diffusion constants are not provided for this regime")
    return chain_from_probabilities(
        p_cont, p_cont_prime, delta, regime=regime, tail_exponent=exponent,
        p1_table=table, low_confidence=low, notes=tuple(notes),
        bid=bid, ask=ask, f=f, f_tilde=f_tilde, **extra)


def pn_up(params: PriceChainParams, p1, n):
    """Probability that the ``n``-th move is up, given the first one is up w.p. ``p1``."""
    if np.any(np.asarray(n) < 1):
        raise ValueError("n must be >= 1")
    rho = params.p_cont + params.p_cont_prime - 1.0
    n = np.asarray(n)
    with np.errstate(invalid="ignore"):
        factor = np.where(n == 1, 1.0, rho ** np.maximum(n - 1, 0).astype(float))
    out = np.where(n == 1, p1, params.pi_star + factor * (p1 - params.pi_star))
    return float(out) if out.ndim == 0 else out


def increment_moments(params: PriceChainParams, p1, n):
    """``(E[X_n], cov(X_{n+1}, X_n))`` given the first-move probability ``p1``."""
    p = pn_up(params, p1, n)
    rho = params.p_cont + params.p_cont_prime - 1.0
    d = params.delta
    return d * (2.0 * p - 1.0), 4.0 * d * d * p * (1.0 - p) * rho


@dataclass(frozen=True)
class DiffusionConstants:
    """Scaling constants of the price's diffusion limit.

    ``time_scale`` is ``tau_star`` (balanced; time runs as ``n log n``) or
    ``m_tau`` (strict; time runs as ``n``). ``drift`` and ``volatility`` are
    ``s*/time_scale`` and ``sigma/sqrt(time_scale)``.
    """

    regime: str
    s_star: float
    sigma2: float
    time_scale: float
    drift: float
    volatility: float


def diffusion_constants(params: PriceChainParams, allow_mixed=False) -> DiffusionConstants:
    """Drift and volatility of the rescaled price in the detected regime.

    Raises :class:`RegimeError` in the mixed regime unless ``allow_mixed`` is
    set, in which case the finite-mean constants (``m_tau``) are used.
    """
    if params.regime == BALANCED:
        scale = params.tau_star
    elif params.regime == STRICT or (params.regime == MIXED and allow_mixed):
        scale = params.m_tau
        if scale is None:
            if params.bid is None:
                raise RegimeError("mean sojourns were not computed")
            means = {}
            for (nb, na) in {p for p, _ in params.f.items()} | {p for p, _ in params.f_tilde.items()}:
                means[(nb, na)] = mean_tau(params.bid, params.ask, nb, na)[0]
            m_up = sum(w * means[p] for p, w in params.f.items())
            m_down = sum(w * means[p] for p, w in params.f_tilde.items())
            scale = params.pi_star * m_up + (1.0 - params.pi_star) * m_down
    else:
        raise RegimeError("regime not covered: one side balanced and one strict "
                          "(tau tail exponent 3/2); no diffusion constants are derived for it")
    return DiffusionConstants(params.regime, params.s_star, params.sigma2, float(scale),
                              params.s_star / scale, math.sqrt(max(params.sigma2, 0.0) / scale))
