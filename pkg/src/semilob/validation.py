"""Cross-module acceptance checks with their independent oracles.

Every check returns a :class:`CheckResult` holding the measured quantities,
the tolerances they were held to and the wall time. Each check's sizes come
from a :class:`Scale` (:data:`FULL` or the reduced :data:`FAST`); tolerances
can be overridden per check, e.g. ``{"ks": {"max_distance": 0.005}}``.

Oracles used here and nowhere else in the package:

* exact path sums for deterministic durations (characteristic function of
  the depletion time summed over every event path up to a horizon);
* Monte Carlo from :mod:`semilob.simulator` with censoring for heavy tails;
* closed forms of the memoryless (exponential, identical rows) kernel.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import interpolate

from . import calibration as cal
from . import config
from . import depletion as dep
from . import price as pr
from . import simulator as sim
from .kernel import (Deterministic, Exponential, Gamma, KernelSide, ReinitDistribution,
                     Weibull)


@dataclass(frozen=True)
class Scale:
    """Sample sizes of the Monte Carlo and calibration checks."""

    name: str = "full"
    recurrence_kernels: int = 50
    ks_samples: int = 100_000
    tail_runs: int = 1_000_000
    pup_runs: int = 1_000_000
    chain_changes: int = 1_000_000
    battery_changes: int = 200_000
    diffusion_paths: int = 2000
    diffusion_n: float = 5000.0
    calibration_events: int = 1_000_000
    coverage_seeds: int = 20
    coverage_events: int = 20_000
    budget_factor: float = 1.0


FULL = Scale()
#: reduced sizes for quick runs; tolerances below are loosened to match
FAST = Scale("fast", recurrence_kernels=10, ks_samples=20_000, tail_runs=100_000,
             pup_runs=100_000, chain_changes=100_000, battery_changes=50_000,
             diffusion_paths=400, diffusion_n=2000.0, calibration_events=100_000,
             coverage_seeds=10, coverage_events=10_000, budget_factor=1.0)

TOLERANCES = config.ACCEPTANCE
FAST_TOLERANCES = config.ACCEPTANCE_FAST


@dataclass
class CheckResult:
    name: str
    passed: bool
    measured: dict
    tolerance: dict
    seconds: float = 0.0
    notes: list = field(default_factory=list)

    def line(self):
        return f"{'PASS' if self.passed else 'FAIL'} {self.name} ({self.seconds:.1f}s)"

    def to_dict(self):
        return {"name": self.name, "passed": bool(self.passed), "measured": _plain(self.measured),
                "tolerance": self.tolerance, "seconds": round(self.seconds, 3),
                "notes": list(self.notes)}


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def tolerances_for(scale: Scale, overrides=None):
    tol = {k: dict(v) for k, v in TOLERANCES.items()}
    if scale.name == "fast":
        for k, v in FAST_TOLERANCES.items():
            tol[k].update(v)
    for k, v in (overrides or {}).items():
        if k not in tol:
            raise KeyError(f"unknown check {k!r}")
        unknown = set(v) - set(tol[k])
        if unknown:
            raise KeyError(f"unknown tolerance keys for {k}: {sorted(unknown)}")
        tol[k].update(v)
    return tol


# ---------------------------------------------------------------------------
# reference kernels
# ---------------------------------------------------------------------------

def cl_kernel(lam, removal, v0=0.5):
    return KernelSide.memoryless(lam, removal, v0)


def weibull_strict():
    return KernelSide.from_matrix(0.4, 0.6, {(1, 1): Weibull(0.6, 1.0), (1, -1): Weibull(0.5, 2.0),
                                             (-1, 1): Weibull(0.8, 1.0), (-1, -1): Weibull(0.7, 0.5)},
                                  v0=0.4)


def gamma_balanced():
    return KernelSide.from_matrix(0.5, 0.5, {(1, 1): Gamma(0.5, 1.0), (1, -1): Exponential(2.0),
                                             (-1, 1): Gamma(2.0, 1.0), (-1, -1): Exponential(0.5)},
                                  v0=0.3)


def gamma_strict():
    return KernelSide.from_matrix(0.35, 0.6, {(1, 1): Gamma(0.5, 2.0), (1, -1): Exponential(1.0),
                                              (-1, 1): Gamma(2.0, 0.5), (-1, -1): Exponential(0.8)},
                                  v0=0.6)


def deterministic_kernel():
    return KernelSide.from_matrix(0.2, 0.9, {(1, 1): Deterministic(0.5), (1, -1): Deterministic(1.0),
                                             (-1, 1): Deterministic(1.5), (-1, -1): Deterministic(2.0)},
                                  v0=0.35)


def random_kernel(rng):
    """A random valid kernel (recurrent: P(1,1) <= P(-1,-1))."""
    a, b = sorted(rng.uniform(0.05, 0.95, 2))
    if rng.random() < 0.3:
        a = b
    H = {}
    for key in ((1, 1), (1, -1), (-1, 1), (-1, -1)):
        fam = rng.integers(3)
        scale = float(rng.uniform(0.2, 5.0))
        if fam == 0:
            H[key] = Exponential(scale)
        elif fam == 1:
            H[key] = Gamma(float(rng.uniform(0.3, 3.0)), scale)
        else:
            H[key] = Weibull(float(rng.uniform(0.3, 3.0)), scale)
    return KernelSide.from_matrix(float(a), float(b), H, v0=float(rng.uniform(0, 1)))


# ---------------------------------------------------------------------------
# oracles
# ---------------------------------------------------------------------------

def path_sum_cf(kernel, n, t, horizon=60, conditioning=None):
    """Characteristic function of the depletion time by summing over event paths.

    Durations must be deterministic. The weight of every path of at most
    ``horizon`` events that empties the queue is accumulated exactly
    (grouped by current queue size and last event type); the probability
    of the paths still alive at the horizon bounds the truncation error.
    Returns ``(phi, alive_mass)``.
    """
    D = {k: v.value for k, v in kernel.H.items()}
    t = np.atleast_1d(np.asarray(t, dtype=float))
    starts = ((1, kernel.v0), (-1, 1.0 - kernel.v0)) if conditioning is None \
        else ((int(conditioning), 1.0),)
    size = n + horizon + 2
    W = np.zeros((size, 2, t.size), complex)  # [queue, type index, t]
    mass = np.zeros((size, 2))
    for v, w in starts:
        W[n, 0 if v == 1 else 1] += w
        mass[n, 0 if v == 1 else 1] += w
    phase = {k: np.exp(1j * t * d) for k, d in D.items()}
    phi = np.zeros(t.size, complex)
    for _ in range(horizon):
        W2 = np.zeros_like(W)
        m2 = np.zeros_like(mass)
        for iv, v in ((0, 1), (1, -1)):
            for jv, j in ((0, 1), (1, -1)):
                p = kernel.P[(v, j)]
                f = p * phase[(v, j)]
                if j == 1:
                    W2[2:, jv] += W[1:-1, iv] * f
                    m2[2:, jv] += mass[1:-1, iv] * p
                else:
                    W2[:-1, jv] += W[1:, iv] * f
                    m2[:-1, jv] += mass[1:, iv] * p
        phi += W2[0].sum(axis=0)
        W2[0] = 0
        m2[0] = 0
        W, mass = W2, m2
    return phi, float(mass.sum())


def recurrence_residual(kernel, s, n_max=30):
    """Largest residual of the first-step recurrences for ``n = 0..n_max-1``.

    With ``a_n`` / ``b_n`` the transforms started after a +1 / -1 event and
    ``a_0 = b_0 = 1``: ``a_{n+1} = m11 a_{n+2} + m1-1 b_n`` and
    ``b_{n+1} = m-11 a_{n+2} + m-1-1 b_n``.
    """
    sol = dep.transform_solution(kernel, np.asarray(s, dtype=complex))
    m = sol.m
    ns = np.arange(1, n_max + 2)
    a = sol.c[None, :] * sol.root[None, :] ** (ns[:, None] - 1)
    b = sol.d[None, :] * sol.root[None, :] ** (ns[:, None] - 1)
    one = np.ones((1, a.shape[1]))
    a = np.vstack([one, a])   # index = n
    b = np.vstack([one, b])
    ra = a[1:n_max + 1] - m[(1, 1)] * a[2:n_max + 2] - m[(1, -1)] * b[:n_max]
    rb = b[1:n_max + 1] - m[(-1, 1)] * a[2:n_max + 2] - m[(-1, -1)] * b[:n_max]
    return float(max(np.max(np.abs(ra)), np.max(np.abs(rb))))


def interpolated_cdf(kernel, n, t_lo, t_hi, nodes=150):
    """Monotone interpolant of the inverted cdf in ``log t`` and an error estimate.

    The estimate compares the interpolant with one built on every other node
    at the omitted nodes.
    """
    t = np.geomspace(t_lo, t_hi, nodes)
    r = dep.sigma_cdf(kernel, t, n)
    F = np.maximum.accumulate(np.clip(r.value, 0.0, 1.0))
    lt = np.log(t)
    full = interpolate.PchipInterpolator(lt, F, extrapolate=True)
    half = interpolate.PchipInterpolator(lt[::2], F[::2], extrapolate=True)
    interp_err = float(np.max(np.abs(half(lt[1::2]) - F[1::2])))

    def cdf(x):
        x = np.asarray(x, dtype=float)
        out = full(np.log(np.clip(x, t_lo, t_hi)))
        out = np.where(x < t_lo, F[0] * np.clip(x / t_lo, 0, 1), out)
        return np.clip(out, 0.0, 1.0)

    return cdf, interp_err, float(np.max(r.error)), bool(r.any_low_confidence)


def ks_censored(samples, cdf, t_max):
    """Sup distance between a cdf and the empirical cdf of samples censored at ``t_max``."""
    x = np.sort(samples)
    n = x.size
    fin = x[np.isfinite(x) & (x <= t_max)]
    k = np.arange(1, fin.size + 1)
    F = cdf(fin)
    d = max(np.max(k / n - F), np.max(F - (k - 1) / n)) if fin.size else 0.0
    d = max(d, abs(float(cdf(np.array([t_max]))[0]) - fin.size / n))
    return float(d)


def batch_se(x, batches=100):
    """Standard error of the mean of a dependent sequence by batch means."""
    x = np.asarray(x, dtype=float)
    m = x.size // batches
    if m < 2:
        return float(np.std(x, ddof=1) / math.sqrt(x.size))
    means = x[: m * batches].reshape(batches, m).mean(axis=1)
    return float(np.std(means, ddof=1) / math.sqrt(batches))


# ---------------------------------------------------------------------------
# checks
# ---------------------------------------------------------------------------

def _finish(name, ok, measured, tol, t0, notes=()):
    secs = time.perf_counter() - t0
    within = secs <= tol.get("budget_s", math.inf)
    measured = dict(measured, within_budget=within)
    return CheckResult(name, bool(ok and within), measured, tol, secs, list(notes))


def check_cl_reduction(scale=FULL, tol=None, seed=0):
    """Memoryless kernels: Delta = 0, alpha(n) = n/sqrt(pi lam), beta(n) = n/(theta+mu-lam)."""
    tol = tol or TOLERANCES["cl_reduction"]
    t0 = time.perf_counter()
    s = np.geomspace(1e-4, 1e2, 25)
    worst_delta = worst_alpha = worst_beta = 0.0
    for lam in (0.3, 1.0, 2.5):
        sol = dep.transform_solution(cl_kernel(lam, lam), s)
        worst_delta = max(worst_delta, float(np.max(np.abs(sol.delta))))
        law = dep.classify_tail(cl_kernel(lam, lam))
        for n in range(1, 11):
            worst_alpha = max(worst_alpha, abs(float(law.alpha(n)) - n / math.sqrt(math.pi * lam)))
        for removal in (1.2 * lam, 2.0 * lam):
            sol = dep.transform_solution(cl_kernel(lam, removal), s)
            worst_delta = max(worst_delta, float(np.max(np.abs(sol.delta))))
            law = dep.classify_tail(cl_kernel(lam, removal))
            for n in range(1, 11):
                worst_beta = max(worst_beta, abs(float(law.beta(n)) - n / (removal - lam)))
    ok = max(worst_delta, worst_alpha, worst_beta) <= tol["abs"]
    return _finish("cl_reduction", ok, {"max_abs_delta": worst_delta, "max_alpha_error": worst_alpha,
                                        "max_beta_error": worst_beta}, tol, t0)


def check_recurrence(scale=FULL, tol=None, seed=0):
    """Closed-form a_n, b_n satisfy the first-step recurrences for random kernels."""
    tol = tol or TOLERANCES["recurrence"]
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed + 101)
    s = np.geomspace(1e-3, 10.0, 9)
    worst = 0.0
    for _ in range(scale.recurrence_kernels):
        worst = max(worst, recurrence_residual(random_kernel(rng), s, 30))
    return _finish("recurrence", worst <= tol["abs"],
                   {"max_residual": worst, "kernels": scale.recurrence_kernels}, tol, t0)


def check_path_sum(scale=FULL, tol=None, seed=0):
    """Characteristic function vs exhaustive path sums (deterministic durations)."""
    tol = tol or TOLERANCES["path_sum"]
    t0 = time.perf_counter()
    k = deterministic_kernel()
    t = np.linspace(-20, 20, 161)
    worst, alive = 0.0, 0.0
    for n in (1, 2, 3):
        ref, a = path_sum_cf(k, n, t, horizon=60)
        val = dep.sigma_cf(k, t, n)
        worst = max(worst, float(np.max(np.abs(val - ref))))
        alive = max(alive, a)
    ok = worst <= tol["abs"] + alive
    return _finish("path_sum", ok, {"max_abs_error": worst, "alive_mass_bound": alive}, tol, t0)


def check_ks(scale=FULL, tol=None, seed=0):
    """KS distance between the inverted cdf and simulated depletion times."""
    tol = tol or TOLERANCES["ks"]
    t0 = time.perf_counter()
    cases = (("balanced", gamma_balanced(), 1e5), ("strict", gamma_strict(), None),
             ("weibull", weibull_strict(), None))
    measured = {}
    ok = True
    for label, k, t_cap in cases:
        for n in (1, 2, 5):
            samples, _ = sim.sample_depletion(k, n, scale.ks_samples, seed=seed + 11 + n,
                                              t_max=math.inf if t_cap is None else t_cap)
            fin = samples[np.isfinite(samples)]
            t_lo = max(float(np.quantile(fin, 1e-4)), 1e-12)
            t_hi = float(t_cap if t_cap is not None else np.max(fin))
            cdf, ierr, ninv, low = interpolated_cdf(k, n, t_lo, t_hi, nodes=100)
            d = ks_censored(samples, cdf, t_hi)
            measured[f"{label},n={n}"] = {"ks": d, "interpolation_error": ierr,
                                          "inversion_error": ninv, "low_confidence": low,
                                          "samples": int(samples.size)}
            ok &= d + ierr < tol["max_distance"]
    return _finish("ks", ok, measured, tol, t0)


def check_tail(scale=FULL, tol=None, seed=0):
    """Monte Carlo survival slopes and prefactors of the depletion time."""
    tol = tol or TOLERANCES["tail"]
    t0 = time.perf_counter()
    measured = {}
    ok = True
    notes = []
    for label, k, n, window in (("balanced", cl_kernel(1.0, 1.0), 2, (1e2, 1e4)),
                                ("strict", cl_kernel(1.0, 1.5), 2, None)):
        law = dep.classify_tail(k)
        coef = float(law.coefficient(n))
        if window is None:
            window = (coef / 10.0, coef * 10.0)
        t_lo, t_hi = window
        s, _ = sim.sample_depletion(k, n, scale.tail_runs, seed=seed + 23, t_max=2 * t_hi)
        tg = np.geomspace(t_lo, t_hi, 9)
        surv = 1.0 - np.searchsorted(np.sort(s), tg, side="right") / s.size
        entry = {"window": [t_lo, t_hi], "target_slope": -law.exponent,
                 "target_prefactor": coef, "survival": surv.tolist()}
        if np.any(surv <= 0):
            entry.update(slope=-math.inf, prefactor=0.0, passed=False)
            notes.append(f"{label}: no samples survive to the end of the window "
                         "(tail lighter than any power law)")
            ok = False
        else:
            slope, _, se = sim.survival_slope(s, t_lo, t_hi)
            pref = float(np.exp(np.mean(np.log(surv) + law.exponent * np.log(tg))))
            good = (abs(slope + law.exponent) <= tol["slope"]
                    and abs(pref / coef - 1.0) <= tol["prefactor_rel"])
            entry.update(slope=slope, slope_se=se, prefactor=pref, passed=bool(good))
            ok &= good
        measured[label] = entry
    return _finish("tail", ok, measured, tol, t0, notes)


def check_p_up(scale=FULL, tol=None, seed=0):
    """Analytic p1_up against Monte Carlo on the 5x5 grid, and a symmetric configuration."""
    tol = tol or TOLERANCES["p_up"]
    t0 = time.perf_counter()
    bid, ask = gamma_strict(), weibull_strict()
    table = pr.p1_up_table(bid, ask, n_max=5)
    z = np.zeros((5, 5))
    runs = scale.pup_runs
    for nb in range(1, 6):
        for na in range(1, 6):
            _, d = sim.sample_first_change(bid, ask, nb, na, runs, seed=seed + 1000 * nb + na)
            p_mc = float(np.mean(d == 1))
            p = table(nb, na)
            z[nb - 1, na - 1] = (p_mc - p) / math.sqrt(p * (1 - p) / runs)
    k = gamma_strict()
    _, d = sim.sample_first_change(k, k, 3, 3, runs, seed=seed + 77)
    sym = float(np.mean(d == 1))
    sym_analytic = pr.p1_up(k, k, 3, 3).value
    ok = np.max(np.abs(z)) <= tol["z"] and abs(sym - 0.5) <= tol["symmetric"] \
        and abs(sym_analytic - 0.5) <= 1e-12
    return _finish("p_up", ok, {"max_abs_z": float(np.max(np.abs(z))), "z": z.tolist(),
                                "symmetric_mc": sym, "symmetric_analytic": sym_analytic,
                                "runs_per_cell": runs}, tol, t0)


def _chain_config(kind):
    bid, ask = gamma_strict(), weibull_strict()
    R = ReinitDistribution
    if kind == "main":
        return bid, ask, R(((3, 1), (2, 2)), (0.5, 0.5)), R(((2, 2), (1, 2)), (0.6, 0.4))
    if kind == "continuation":
        return bid, ask, R(((4, 1),), (1.0,)), R(((1, 4),), (1.0,))
    if kind == "reversal":
        return bid, ask, R(((1, 4),), (1.0,)), R(((4, 1),), (1.0,))
    if kind == "mild_continuation":
        return bid, bid, R(((3, 2),), (1.0,)), R(((2, 3),), (1.0,))
    if kind == "mild_reversal":
        return ask, ask, R(((2, 3), (1, 1)), (0.7, 0.3)), R(((3, 2), (1, 1)), (0.7, 0.3))
    raise ValueError(kind)


def _lag1(x):
    xc = x - x.mean()
    return xc[1:] * xc[:-1]


def check_chain(scale=FULL, tol=None, seed=0):
    """Simulated increment chain vs chain_params / increment_moments."""
    tol = tol or TOLERANCES["chain"]
    t0 = time.perf_counter()
    bid, ask, f, ft = _chain_config("main")
    params = pr.chain_params(bid, ask, f, ft, with_means=False)
    cfg = sim.SimConfig(bid, ask, f, ft, seed=seed + 5, horizon_changes=scale.chain_changes)
    path = sim.simulate_path(cfg)
    X = np.sign(path.increments)
    cc = sim.chain_counts(path)
    _, cov = pr.increment_moments(params, params.pi_star, 2)
    up = (X == 1).astype(float)
    lag = _lag1(X * params.delta)
    z = {
        "p_cont": (cc["p_cont"] - params.p_cont) / cc["p_cont_se"],
        "p_cont_prime": (cc["p_cont_prime"] - params.p_cont_prime) / cc["p_cont_prime_se"],
        "pi_star": (up.mean() - params.pi_star) / batch_se(up),
        "lag1_cov": (lag.mean() - cov) / batch_se(lag),
    }
    ok = max(abs(v) for v in z.values()) <= tol["z"]
    signs = {}
    for kind in ("continuation", "reversal", "mild_continuation", "mild_reversal"):
        b, a, f2, ft2 = _chain_config(kind)
        pp = pr.chain_params(b, a, f2, ft2, with_means=False)
        c2 = sim.SimConfig(b, a, f2, ft2, seed=seed + 9, horizon_changes=scale.battery_changes)
        emp = sim.chain_counts(sim.simulate_path(c2))["lag1_cov"]
        rho = pp.p_cont + pp.p_cont_prime - 1.0
        signs[kind] = {"rho": rho, "lag1_cov": emp, "match": bool(np.sign(emp) == np.sign(rho))}
        ok &= signs[kind]["match"]
    return _finish("chain", ok, {"z": z, "analytic": {"p_cont": params.p_cont,
                                                      "p_cont_prime": params.p_cont_prime,
                                                      "pi_star": params.pi_star,
                                                      "lag1_cov": cov},
                                 "empirical": cc, "battery": signs}, tol, t0)


def check_sigma2(scale=FULL, tol=None, seed=0):
    """sigma^2 reduction at p = p', Poisson residual, closed form vs martingale route."""
    tol = tol or TOLERANCES["sigma2"]
    t0 = time.perf_counter()
    red = pois = routes = 0.0
    grid = np.linspace(0.02, 0.98, 49)
    for delta in (1.0, 0.01):
        for p in grid:
            s2 = pr.sigma2_closed_form(p, p, delta)
            red = max(red, abs(s2 - delta**2 * p / (1 - p)) / delta**2)
        for p in grid:
            for q in grid[::4]:
                c = pr.chain_from_probabilities(p, q, delta)
                pois = max(pois, c.poisson_residual() / delta)
                routes = max(routes, abs(c.sigma2 - c.sigma2_martingale) / delta**2)
    ok = red <= tol["reduction"] and pois <= tol["poisson"] and routes <= tol["routes"]
    return _finish("sigma2", ok, {"reduction_error": red, "poisson_residual": pois,
                                  "route_difference": routes}, tol, t0)


def check_diffusion(scale=FULL, tol=None, seed=0):
    """Strict regime: variance of (s_nt - N_nt s*)/sqrt(n) vs sigma^2 t / m_tau."""
    tol = tol or TOLERANCES["diffusion"]
    t0 = time.perf_counter()
    bid, ask = gamma_strict(), cl_kernel(1.0, 1.4)
    f = ReinitDistribution(((1, 2), (2, 2)), (0.5, 0.5))
    ft = ReinitDistribution(((3, 1), (1, 1)), (0.6, 0.4))
    params = pr.chain_params(bid, ask, f, ft)
    dc = pr.diffusion_constants(params)
    cfg = sim.SimConfig(bid, ask, f, ft, seed=seed + 31, horizon_changes=10**9)
    vals = sim.diffusion_samples(cfg, scale.diffusion_paths, scale.diffusion_n, 1.0, dc.s_star)
    var = float(np.var(vals, ddof=1))
    target = dc.sigma2 / dc.time_scale
    rel = var / target - 1.0
    return _finish("diffusion", abs(rel) <= tol["rel"],
                   {"sample_variance": var, "target": target, "relative_error": rel,
                    "s_star": dc.s_star, "sigma2": dc.sigma2, "m_tau": dc.time_scale,
                    "paths": scale.diffusion_paths, "n": scale.diffusion_n}, tol, t0)


def calibration_fixture(k, theta, p11, events, seed, workdir):
    """Simulate a book with identical Weibull waits, write LOBSTER files, calibrate."""
    import os

    w = Weibull(k, theta)
    kern = KernelSide.from_matrix(p11, 0.7, w, v0=0.5)
    f = ReinitDistribution(((2, 2), (3, 3)), (0.5, 0.5))
    cfg = sim.SimConfig(kern, kern, f, f, seed=seed, horizon_changes=10**9)
    log = sim.simulate_event_log(cfg, events)
    msg = os.path.join(workdir, f"msg_{k}_{theta}_{p11}_{seed}.csv")
    book = os.path.join(workdir, f"book_{k}_{theta}_{p11}_{seed}.csv")
    cal.write_lobster(log, msg, book, seed=seed, hidden_rate=0.01)
    parsed = cal.parse_messages(msg, book)
    stream = cal.classify_events(parsed)
    report = cal.calibrate(stream, parsed, families=("weibull", "exponential"))
    os.remove(msg)
    os.remove(book)
    return kern, report


def check_calibration(scale=FULL, tol=None, seed=0, workdir=None):
    """Recovery of transition probabilities and Weibull laws from LOBSTER fixtures."""
    import tempfile

    tol = tol or TOLERANCES["calibration"]
    t0 = time.perf_counter()
    own = workdir is None
    tmp = tempfile.TemporaryDirectory() if own else None
    workdir = tmp.name if own else workdir
    fixtures = [(k, th, p) for k in (0.15, 0.25) for th in (1.0, 10.0) for p in (0.5, 0.63)]
    measured = {}
    ok = True
    try:
        for idx, (k, th, p) in enumerate(fixtures):
            base = seed + 1000 * (idx + 1)
            label = f"k={k},theta={th},P11={p}"
            kern, rep = calibration_fixture(k, th, p, scale.calibration_events, base, workdir)
            p_err = max(abs(s.transitions.P[b] - kern.P[b]) for s in (rep.bid, rep.ask)
                        for b in cal.BUCKETS)
            cover_k = cover_t = total = 0
            beats = checked = 0
            for r in range(scale.coverage_seeds):
                _, rr = calibration_fixture(k, th, p, scale.coverage_events, base + 1 + r,
                                            workdir)
                for s in (rr.bid, rr.ask):
                    for b in cal.BUCKETS:
                        fw, fe = s.fits[b]["weibull"], s.fits[b]["exponential"]
                        if not isinstance(fw, cal.FitResult):
                            continue
                        total += 1
                        cover_k += fw.covers(k=k)
                        cover_t += fw.covers(theta=th)
                        checked += 1
                        beats += fw.loglik > fe.loglik
            cov_k = cover_k / max(total, 1)
            cov_t = cover_t / max(total, 1)
            good = (p_err <= tol["P_abs"] and cov_k >= tol["coverage"] and
                    cov_t >= tol["coverage"] and beats == checked and checked > 0)
            measured[label] = {"max_P_error": p_err, "k_coverage": cov_k, "theta_coverage": cov_t,
                               "intervals": total, "weibull_beats_exponential": f"{beats}/{checked}",
                               "passed": bool(good)}
            ok &= good
    finally:
        if own:
            tmp.cleanup()
    return _finish("calibration", ok, measured, tol, t0)


CHECKS = {
    "cl_reduction": check_cl_reduction,
    "recurrence": check_recurrence,
    "path_sum": check_path_sum,
    "ks": check_ks,
    "tail": check_tail,
    "p_up": check_p_up,
    "chain": check_chain,
    "sigma2": check_sigma2,
    "diffusion": check_diffusion,
    "calibration": check_calibration,
}


def run_checks(names=None, scale=FULL, overrides=None, seed=0, progress=None):
    tol = tolerances_for(scale, overrides)
    out = []
    for name in names or CHECKS:
        if name not in CHECKS:
            raise KeyError(f"unknown check {name!r}")
        res = CHECKS[name](scale, tol[name], seed)
        out.append(res)
        if progress:
            progress(res)
    return out


def with_scale(scale: Scale, **kw):
    return replace(scale, **kw)
