"""Model primitives: book events, inter-arrival laws, Markov renewal kernels.

Durations are in milliseconds. Every family is parametrized by a *scale*
``theta`` (never a rate), matching the densities

    Gamma:    x**(k-1) * exp(-x/theta) / (Gamma(k) * theta**k)
    Weibull:  k/theta * (x/theta)**(k-1) * exp(-(x/theta)**k)

so ``Exponential(theta)`` has mean ``theta`` and Laplace transform
``1 / (1 + theta*z)``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from .quadrature import exp_sinh_rule


class EventType(enum.IntEnum):
    """Book event type: +1 adds an order to a queue, -1 removes one."""

    LIMIT = 1
    REMOVE = -1


EVENT_TYPES = (EventType.LIMIT, EventType.REMOVE)


class NumericalError(RuntimeError):
    """A numerical routine did not reach its tolerance."""

    def __init__(self, message, achieved=None):
        super().__init__(message)
        self.achieved = achieved


def clog1p(z):
    """``log(1 + z)`` for complex ``z``, accurate for small ``|z|``.

    ``numpy.log1p`` evaluates ``log(1 + z)`` directly for complex input and
    loses relative accuracy near 0; here the modulus uses the real ``log1p``
    of ``2x + x^2 + y^2`` and the phase ``atan2(y, 1 + x)``.
    """
    z = np.asarray(z, dtype=complex)
    x, y = z.real, z.imag
    return 0.5 * np.log1p(x * (2.0 + x) + y * y) + 1j * np.arctan2(y, 1.0 + x)


# exp-sinh rules for quadrature-based transforms: the fine one is needed when
# the density decays faster than exponentially (rotated integrand is then
# less smooth in the exp-sinh variable)
_ES_FINE = exp_sinh_rule(h=1.0 / 32, u_max=6.0)
_ES_COARSE = exp_sinh_rule(h=1.0 / 16, u_max=6.0)
_ES_VERY_FINE = exp_sinh_rule(h=1.0 / 64, u_max=6.5)


def rotated_laplace(pdf, z, scale, tail_power=1.0, rule=None, complement=False):
    """Laplace transform ``int_0^inf exp(-z t) pdf(t) dt`` by contour rotation.

    The ray of integration is turned to ``t = exp(-1j*rot) * r``. If the
    density decays like ``exp(-(t/scale)**tail_power)``, turning by
    ``rot = arg(z) / (tail_power + 1)`` splits the phase evenly between
    ``exp(-z t)`` and the density, so neither factor oscillates fast and both
    still decay. An exp-sinh rule then integrates to near machine precision
    with one fixed set of nodes, which lets us evaluate many ``z`` at once.

    Parameters
    ----------
    pdf : callable
        Density, analytic in the sector ``|arg t| < pi / (2 * tail_power)``
        and accepting complex arrays.
    z : array_like of complex
        Transform arguments with ``Re(z) >= 0``.
    scale : float
        Characteristic time of the density, used to centre the rule.
    tail_power : float
        Exponent of the density's log-decay (Weibull shape; 1 for Gamma).
    rule : tuple of ndarray, optional
        exp-sinh nodes and weights; by default the coarse rule for
        ``tail_power <= 1`` and the fine one otherwise.
    complement : bool
        Also return ``1 - E[exp(-z T)]``, integrated directly as
        ``-expm1(-z t)`` against the density so that it keeps full relative
        accuracy for small ``|z|``.
    """
    if rule is None:
        if tail_power <= 1.0:
            rule = _ES_COARSE
        elif tail_power <= 2.0:
            rule = _ES_FINE
        else:
            rule = _ES_VERY_FINE
    es_r, es_w = rule
    z = np.atleast_1d(np.asarray(z, dtype=complex))
    out = np.ones(z.shape, dtype=complex)
    comp = np.zeros(z.shape, dtype=complex)
    nz = z != 0
    if not nz.any():
        return (out, comp) if complement else out
    zz = z[nz]
    psi = np.angle(zz)
    # only turn as far as exp(-z t) actually oscillates over the density's support
    extent = scale * 40.0 ** (1.0 / tail_power)
    frac = np.abs(zz) * extent / (1.0 + np.abs(zz) * extent)
    rot = frac * psi / (tail_power + 1.0)
    c = np.exp(-1j * rot)
    decay = np.abs(zz) * np.cos(psi - rot)
    # centre the rule between the density's body and the end of its support
    s0 = 1.0 / (decay + 1.0 / math.sqrt(scale * extent))
    r = s0[:, None] * es_r[None, :]
    t = c[:, None] * r
    w = es_w[None, :] * s0[:, None]
    with np.errstate(over="ignore", under="ignore", invalid="ignore"):
        dens = pdf(t) * c[:, None]
        vals = np.exp(-zz[:, None] * t) * dens
    vals = np.where(np.isfinite(vals), vals, 0.0)
    out[nz] = (vals * w).sum(axis=1)
    if not complement:
        return out
    with np.errstate(over="ignore", under="ignore", invalid="ignore"):
        cvals = -np.expm1(-zz[:, None] * t) * dens
    cvals = np.where(np.isfinite(cvals), cvals, 0.0)
    # the rule is centred on exp(-z t) pdf(t); once |z| scale is not small
    # it no longer resolves the bare density, and 1 - LT is accurate anyway
    small = np.abs(zz) * scale < 0.5
    comp[nz] = np.where(small, (cvals * w).sum(axis=1), 1.0 - out[nz])
    return out, comp


class DurationDistribution:
    """Base class of inter-arrival laws on [0, inf)."""

    family: str = ""

    def cdf(self, t):
        raise NotImplementedError

    def sf(self, t):
        return 1.0 - self.cdf(t)

    def laplace(self, z):
        """``E[exp(-z T)]`` for an array of complex ``z`` with ``Re z >= 0``."""
        raise NotImplementedError

    def laplace_pair(self, z):
        """``(E[exp(-z T)], 1 - E[exp(-z T)])``, the second accurate near ``z = 0``."""
        lt = self.laplace(z)
        return lt, 1.0 - lt

    def mean(self):
        raise NotImplementedError

    def second_moment(self):
        raise NotImplementedError

    def to_dict(self):
        raise NotImplementedError

    def atom_at_zero(self):
        return float(self.cdf(0.0))


@dataclass(frozen=True)
class Exponential(DurationDistribution):
    scale: float
    family = "exponential"

    def __post_init__(self):
        _check_positive(scale=self.scale)

    def cdf(self, t):
        t = np.asarray(t, dtype=float)
        return np.where(t < 0, 0.0, -np.expm1(-np.maximum(t, 0.0) / self.scale))

    def pdf(self, t):
        return np.exp(-t / self.scale) / self.scale

    def laplace(self, z):
        z = np.asarray(z, dtype=complex)
        return 1.0 / (1.0 + self.scale * z)

    def laplace_pair(self, z):
        z = np.asarray(z, dtype=complex)
        den = 1.0 + self.scale * z
        return 1.0 / den, self.scale * z / den

    def mean(self):
        return self.scale

    def second_moment(self):
        return 2.0 * self.scale**2

    def to_dict(self):
        return {"family": self.family, "scale": self.scale}


@dataclass(frozen=True)
class Weibull(DurationDistribution):
    shape: float
    scale: float
    family = "weibull"

    def __post_init__(self):
        _check_positive(shape=self.shape, scale=self.scale)

    def cdf(self, t):
        t = np.maximum(np.asarray(t, dtype=float), 0.0)
        return -np.expm1(-((t / self.scale) ** self.shape))

    def pdf(self, t):
        k, th = self.shape, self.scale
        u = t / th
        return k / th * u ** (k - 1) * np.exp(-(u**k))

    def laplace(self, z):
        z = np.asarray(z, dtype=complex)
        shape = z.shape
        if self.shape == 1.0:
            return 1.0 / (1.0 + self.scale * z)
        return rotated_laplace(self.pdf, z.ravel(), self.scale, self.shape).reshape(shape)

    def laplace_pair(self, z):
        z = np.asarray(z, dtype=complex)
        if self.shape == 1.0:
            den = 1.0 + self.scale * z
            return 1.0 / den, self.scale * z / den
        lt, comp = rotated_laplace(self.pdf, z.ravel(), self.scale, self.shape,
                                   complement=True)
        return lt.reshape(z.shape), comp.reshape(z.shape)

    def mean(self):
        return self.scale * math.gamma(1.0 + 1.0 / self.shape)

    def second_moment(self):
        return self.scale**2 * math.gamma(1.0 + 2.0 / self.shape)

    def to_dict(self):
        return {"family": self.family, "shape": self.shape, "scale": self.scale}


@dataclass(frozen=True)
class Gamma(DurationDistribution):
    shape: float
    scale: float
    family = "gamma"

    def __post_init__(self):
        _check_positive(shape=self.shape, scale=self.scale)

    def cdf(self, t):
        t = np.maximum(np.asarray(t, dtype=float), 0.0)
        return special.gammainc(self.shape, t / self.scale)

    def pdf(self, t):
        k, th = self.shape, self.scale
        return np.exp((k - 1) * np.log(t) - t / th - special.gammaln(k) - k * np.log(th))

    def laplace(self, z):
        z = np.asarray(z, dtype=complex)
        return (1.0 + self.scale * z) ** (-self.shape)

    def laplace_pair(self, z):
        z = np.asarray(z, dtype=complex)
        log_lt = -self.shape * clog1p(self.scale * z)
        return np.exp(log_lt), -np.expm1(log_lt)

    def mean(self):
        return self.shape * self.scale

    def second_moment(self):
        return self.shape * (self.shape + 1.0) * self.scale**2

    def to_dict(self):
        return {"family": self.family, "shape": self.shape, "scale": self.scale}


@dataclass(frozen=True)
class Deterministic(DurationDistribution):
    value: float
    family = "deterministic"

    def __post_init__(self):
        if not self.value > 0:
            raise ValueError("deterministic duration must be > 0 (no atom at zero)")

    def cdf(self, t):
        return np.where(np.asarray(t, dtype=float) >= self.value, 1.0, 0.0)

    def laplace(self, z):
        return np.exp(-np.asarray(z, dtype=complex) * self.value)

    def laplace_pair(self, z):
        zc = -np.asarray(z, dtype=complex) * self.value
        return np.exp(zc), -np.expm1(zc)

    def mean(self):
        return self.value

    def second_moment(self):
        return self.value**2

    def to_dict(self):
        return {"family": self.family, "value": self.value}


@dataclass(frozen=True, eq=False)
class EmpiricalStep(DurationDistribution):
    """Discrete law on sorted support points (a step-function cdf)."""

    support: tuple
    masses: tuple
    family = "empirical"

    def __post_init__(self):
        s = np.asarray(self.support, dtype=float)
        m = np.asarray(self.masses, dtype=float)
        if s.shape != m.shape or s.ndim != 1 or s.size == 0:
            raise ValueError("support and masses must be equal-length 1-d sequences")
        if np.any(np.diff(s) <= 0) or s[0] < 0:
            raise ValueError("support must be sorted, distinct and nonnegative")
        if np.any(m < 0) or abs(m.sum() - 1.0) > 1e-12:
            raise ValueError("masses must be nonnegative and sum to 1")
        if s[0] == 0 and m[0] >= 1.0:
            raise ValueError("all mass at zero violates cdf(0) < 1")
        object.__setattr__(self, "support", tuple(s))
        object.__setattr__(self, "masses", tuple(m))

    def __eq__(self, other):
        return (isinstance(other, EmpiricalStep) and self.support == other.support
                and self.masses == other.masses)

    def __hash__(self):
        return hash((self.support, self.masses))

    def cdf(self, t):
        s = np.asarray(self.support)
        cm = np.cumsum(self.masses)
        idx = np.searchsorted(s, np.asarray(t, dtype=float), side="right")
        return np.where(idx == 0, 0.0, cm[np.maximum(idx - 1, 0)])

    def laplace(self, z):
        z = np.asarray(z, dtype=complex)
        s = np.asarray(self.support)
        m = np.asarray(self.masses)
        return (np.exp(-z[..., None] * s) * m).sum(axis=-1)

    def laplace_pair(self, z):
        z = np.asarray(z, dtype=complex)
        s = np.asarray(self.support)
        m = np.asarray(self.masses)
        zs = -z[..., None] * s
        return (np.exp(zs) * m).sum(axis=-1), (-np.expm1(zs) * m).sum(axis=-1)

    def mean(self):
        return float(np.dot(self.support, self.masses))

    def second_moment(self):
        return float(np.dot(np.square(self.support), self.masses))

    def to_dict(self):
        return {"family": self.family, "support": list(self.support),
                "masses": list(self.masses)}


def _check_positive(**kw):
    for name, v in kw.items():
        if not (v > 0 and np.isfinite(v)):
            raise ValueError(f"{name} must be positive and finite, got {v!r}")


_FAMILIES = {
    "exponential": lambda d: Exponential(float(d["scale"])),
    "weibull": lambda d: Weibull(float(d["shape"]), float(d["scale"])),
    "gamma": lambda d: Gamma(float(d["shape"]), float(d["scale"])),
    "deterministic": lambda d: Deterministic(float(d["value"])),
    "empirical": lambda d: EmpiricalStep(tuple(d["support"]), tuple(d["masses"])),
}
_FAMILY_KEYS = {
    "exponential": {"family", "scale"},
    "weibull": {"family", "shape", "scale"},
    "gamma": {"family", "shape", "scale"},
    "deterministic": {"family", "value"},
    "empirical": {"family", "support", "masses"},
}


def duration_from_dict(d):
    fam = str(d.get("family", "")).lower()
    if fam not in _FAMILIES:
        raise ValueError(f"unknown duration family {d.get('family')!r}")
    extra = set(d) - _FAMILY_KEYS[fam]
    if extra:
        raise ValueError(f"unknown fields for {fam}: {sorted(extra)}")
    return _FAMILIES[fam](d)


def duration_laplace(d, z):
    """Laplace-Stieltjes transform of a duration law at complex ``z``."""
    z = np.asarray(z, dtype=complex)
    if np.any(z.real < -1e-15):
        raise ValueError("transform only defined for Re(z) >= 0")
    return d.laplace(z)


def duration_moments(d):
    """Return ``(mean, second moment)``."""
    return d.mean(), d.second_moment()


def _key(i):
    return 0 if int(i) == 1 else 1


@dataclass(frozen=True)
class KernelSide:
    """Markov renewal kernel of one side of the book.

    ``P[(i, j)]`` is the probability that an event of type ``j`` follows one
    of type ``i``; ``H[(i, j)]`` the law of the time in between; ``v0`` the
    probability that the (unobserved) event type at a reset is +1.
    Both mappings are keyed by ``(i, j)`` with ``i, j`` in {+1, -1}.
    """

    P: dict
    H: dict
    v0: float = 0.5

    def __post_init__(self):
        P = {(int(i), int(j)): float(self.P[(i, j)]) for i, j in self.P}
        H = {(int(i), int(j)): self.H[(i, j)] for i, j in self.H}
        if set(P) != _PAIRS or set(H) != _PAIRS:
            raise ValueError("P and H must be keyed by the four (i, j) pairs in {1,-1}^2")
        object.__setattr__(self, "P", P)
        object.__setattr__(self, "H", H)

    @classmethod
    def from_matrix(cls, p11, pm1m1, durations, v0=0.5):
        """Build from ``P(1,1)``, ``P(-1,-1)`` and durations.

        ``durations`` is either a single law used for all four transitions
        or a mapping keyed by ``(i, j)``.
        """
        P = {(1, 1): p11, (1, -1): 1.0 - p11, (-1, -1): pm1m1, (-1, 1): 1.0 - pm1m1}
        if isinstance(durations, DurationDistribution):
            H = {k: durations for k in P}
        else:
            H = dict(durations)
        return cls(P, H, v0)

    @classmethod
    def memoryless(cls, lam, theta_plus_mu, v0=0.5):
        """Memoryless kernel with limit-order rate ``lam`` and removal rate ``theta_plus_mu``.

        Rows are identical, durations exponential with total rate
        ``lam + theta_plus_mu``.
        """
        total = lam + theta_plus_mu
        d = Exponential(1.0 / total)
        P = {(i, 1): lam / total for i in (1, -1)}
        P.update({(i, -1): theta_plus_mu / total for i in (1, -1)})
        return cls(P, {k: d for k in P}, v0)

    def matrix(self):
        """Transition matrix with rows/columns ordered (+1, -1)."""
        return np.array([[self.P[(1, 1)], self.P[(1, -1)]],
                         [self.P[(-1, 1)], self.P[(-1, -1)]]])

    @property
    def p11(self):
        return self.P[(1, 1)]

    @property
    def pm1m1(self):
        return self.P[(-1, -1)]

    def h(self, i, j):
        return self.H[(int(i), int(j))].mean()

    @property
    def h1(self):
        return self.h(1, 1) + self.h(-1, -1)

    @property
    def h2(self):
        return self.h(-1, 1) + self.h(1, -1)

    def distinct_durations(self):
        seen = []
        for d in self.H.values():
            if not any(d is s or d == s for s in seen):
                seen.append(d)
        return seen

    def m(self, z):
        """All four ``m(z, i, j) = P(i,j) * E[exp(-z T) | i -> j]`` at once.

        Returns a dict keyed by ``(i, j)`` of arrays shaped like ``z``.
        Durations shared between transitions are transformed once.
        """
        z = np.asarray(z, dtype=complex)
        cache = []
        out = {}
        for key in _ORDER:
            d = self.H[key]
            lt = None
            for dd, val in cache:
                if dd is d or dd == d:
                    lt = val
                    break
            if lt is None:
                lt = duration_laplace(d, z)
                cache.append((d, lt))
            out[key] = self.P[key] * lt
        return out

    def m_pair(self, z):
        """``m(z, i, j)`` together with ``eps(z, i, j) = P(i, j) - m(z, i, j)``.

        The second dict is computed from ``1 - E[exp(-z T)]`` directly, so it
        keeps its relative accuracy as ``z -> 0`` where ``m`` tends to ``P``.
        """
        z = np.asarray(z, dtype=complex)
        if np.any(z.real < -1e-15):
            raise ValueError("transform only defined for Re(z) >= 0")
        cache = []
        m, eps = {}, {}
        for key in _ORDER:
            d = self.H[key]
            pair = None
            for dd, val in cache:
                if dd is d or dd == d:
                    pair = val
                    break
            if pair is None:
                pair = d.laplace_pair(z)
                cache.append((d, pair))
            m[key] = self.P[key] * pair[0]
            eps[key] = self.P[key] * pair[1]
        return m, eps

    def to_dict(self):
        return {
            "P": {"1,1": self.P[(1, 1)], "1,-1": self.P[(1, -1)],
                  "-1,1": self.P[(-1, 1)], "-1,-1": self.P[(-1, -1)]},
            "H": {f"{i},{j}": self.H[(i, j)].to_dict() for i, j in _ORDER},
            "v0": self.v0,
        }

    @classmethod
    def from_dict(cls, d):
        extra = set(d) - {"P", "H", "v0"}
        if extra:
            raise ValueError(f"unknown kernel fields: {sorted(extra)}")
        P = {_parse_pair(k): float(v) for k, v in d["P"].items()}
        H = {_parse_pair(k): duration_from_dict(v) for k, v in d["H"].items()}
        return cls(P, H, float(d.get("v0", 0.5)))


_ORDER = ((1, 1), (1, -1), (-1, 1), (-1, -1))
_PAIRS = set(_ORDER)


def _parse_pair(s):
    i, j = (int(x) for x in str(s).split(","))
    return i, j


def kernel_laplace(kernel, z, i, j):
    """``m(z, i, j) = P(i, j) * int exp(-z t) H(i, j, dt)``."""
    return kernel.P[(int(i), int(j))] * duration_laplace(kernel.H[(int(i), int(j))], z)


def kernel_laplace_row(kernel, z, i):
    """``M(z, i) = m(z, i, -1) + m(z, i, 1)``, the transform of ``F(i, .)``."""
    return kernel_laplace(kernel, z, i, -1) + kernel_laplace(kernel, z, i, 1)


def validate_side(kernel, tol=1e-12, allow_boundary=False):
    """Return the list of violated model assumptions (empty when valid).

    Messages starting with ``"error:"`` are fatal for the depletion analytics;
    in particular ``P(1,1) > P(-1,-1)`` makes depletion non-certain. With
    ``allow_boundary`` a transition probability of exactly 0 or 1 is only a
    warning (the event-level construction is still well defined there).
    """
    problems = []
    Pm = kernel.matrix()
    if np.any(~np.isfinite(Pm)):
        problems.append("error: non-finite transition probability")
        return problems
    for r, row in zip((1, -1), Pm):
        if abs(row.sum() - 1.0) > tol:
            problems.append(f"error: row not stochastic (row {r} sums to {row.sum():.12g})")
    if np.any(Pm <= 0) or np.any(Pm >= 1):
        level = "warning" if allow_boundary and np.all((Pm >= 0) & (Pm <= 1)) else "error"
        problems.append(f"{level}: every P(i,j) must lie strictly in (0, 1)")
    if kernel.p11 > kernel.pm1m1 + tol:
        problems.append(f"error: transience: P(1,1) > P(-1,-1) "
                        f"({kernel.p11:.6g} > {kernel.pm1m1:.6g}), depletion not certain")
    if not 0.0 <= kernel.v0 <= 1.0:
        problems.append("error: v0(1) must lie in [0, 1]")
    for i in (1, -1):
        # F(i, 0) = sum_j P(i,j) H(i,j,0) must be < 1
        atom = sum(kernel.P[(i, j)] * kernel.H[(i, j)].atom_at_zero() for j in (1, -1))
        if atom >= 1.0:
            problems.append(f"error: F({i},0) = 1, durations are identically zero")
    for key, d in kernel.H.items():
        if not np.isfinite(d.second_moment()):
            problems.append(f"error: H{key} has infinite second moment")
    return problems


@dataclass(frozen=True, eq=False)
class ReinitDistribution:
    """Joint law of ``(n_b, n_a)`` queue sizes drawn after a price change."""

    pairs: tuple
    masses: tuple
    n_max: int = 50
    _index: dict = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        pairs = tuple((int(a), int(b)) for a, b in self.pairs)
        m = np.asarray(self.masses, dtype=float)
        if len(pairs) != m.size or m.size == 0:
            raise ValueError("pairs and masses must be nonempty and of equal length")
        if len(set(pairs)) != len(pairs):
            raise ValueError("duplicate (n_b, n_a) pairs")
        if any(a < 1 or b < 1 for a, b in pairs):
            raise ValueError("queue sizes must be >= 1")
        if any(a > self.n_max or b > self.n_max for a, b in pairs):
            raise ValueError(f"support exceeds n_max={self.n_max}")
        if np.any(m < 0) or abs(m.sum() - 1.0) > 1e-12:
            raise ValueError("masses must be nonnegative and sum to 1")
        object.__setattr__(self, "pairs", pairs)
        object.__setattr__(self, "masses", tuple(m.tolist()))
        object.__setattr__(self, "_index", {p: w for p, w in zip(pairs, m)})

    @classmethod
    def point(cls, n_b, n_a, n_max=50):
        return cls(((n_b, n_a),), (1.0,), n_max)

    @classmethod
    def from_matrix(cls, mat, n_max=None):
        """From a dense array indexed ``[n_b - 1, n_a - 1]``."""
        mat = np.asarray(mat, dtype=float)
        nb, na = np.nonzero(mat > 0)
        pairs = [(int(i) + 1, int(j) + 1) for i, j in zip(nb, na)]
        return cls(tuple(pairs), tuple(mat[nb, na]),
                   n_max or max(50, *mat.shape))

    def __eq__(self, other):
        return (isinstance(other, ReinitDistribution) and self.pairs == other.pairs
                and self.masses == other.masses and self.n_max == other.n_max)

    def __hash__(self):
        return hash((self.pairs, self.masses, self.n_max))

    def __call__(self, n_b, n_a):
        return self._index.get((int(n_b), int(n_a)), 0.0)

    def items(self):
        return zip(self.pairs, self.masses)

    def swapped(self):
        """The law of ``(n_a, n_b)``: mirror image across the book."""
        return ReinitDistribution(tuple((a, b) for b, a in self.pairs), self.masses, self.n_max)

    def to_list(self):
        return [[b, a, w] for (b, a), w in zip(self.pairs, self.masses)]

    @classmethod
    def from_list(cls, rows, n_max=50):
        return cls(tuple((r[0], r[1]) for r in rows), tuple(r[2] for r in rows), n_max)
