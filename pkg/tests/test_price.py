from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from semilob import price as pr
from semilob.depletion import BALANCED, STRICT, balanced_alpha
from semilob.kernel import Deterministic, KernelSide, ReinitDistribution
from semilob.simulator import sample_first_change

probs = st.floats(0.01, 0.99)


def _stationary_by_eigenvector(p, pp):
    P = np.array([[p, 1 - p], [1 - pp, pp]])
    w, v = np.linalg.eig(P.T)
    vec = np.real(v[:, np.argmin(np.abs(w - 1))])
    return vec[0] / vec.sum()


def test_stationary_worked_example():
    """p_cont = 0.6, p'_cont = 0.8: solving pi P = pi by hand gives 1/3."""
    assert_allclose(pr.stationary_up(0.6, 0.8), 1 / 3, rtol=1e-15)
    assert_allclose(_stationary_by_eigenvector(0.6, 0.8), 1 / 3, rtol=1e-12)


@settings(max_examples=200, deadline=None)
@given(probs)
def test_equal_continuation_gives_half(p):
    assert_allclose(pr.stationary_up(p, p), 0.5, rtol=1e-15)


@settings(max_examples=200, deadline=None)
@given(probs, probs)
def test_stationary_against_eigenvector(p, pp):
    pi = pr.stationary_up(p, pp)
    assert 0 < pi < 1
    assert abs(pi * p + (1 - pi) * (1 - pp) - pi) < 1e-12
    assert_allclose(pi, _stationary_by_eigenvector(p, pp), atol=1e-10)


@settings(max_examples=200, deadline=None)
@given(probs, probs, st.floats(0.01, 10.0))
def test_poisson_equation(p, pp, delta):
    """(P - I) g = b, Pi* b = 0, and the closed-form g agree."""
    c = pr.chain_from_probabilities(p, pp, delta)
    assert c.poisson_residual() < 1e-12 * max(1.0, delta / (2 - p - pp))
    assert abs(c.Pi_star[0] @ c.b) < 1e-12 * delta
    assert_allclose(c.g, c.g_closed, atol=1e-10 * delta / (2 - p - pp))
    assert_allclose(c.P.sum(axis=1), 1.0, rtol=0, atol=1e-15)


@settings(max_examples=200, deadline=None)
@given(probs, probs, st.floats(0.01, 10.0))
def test_sigma2_routes_agree(p, pp, delta):
    """Closed form, martingale decomposition and the stationary two-state variance formula.

    The last one is the textbook asymptotic variance of a stationary chain
    with autocorrelation rho^k: 4 delta^2 pi (1 - pi) (1 + rho) / (1 - rho).
    """
    c = pr.chain_from_probabilities(p, pp, delta)
    rho = p + pp - 1
    ref = 4 * delta**2 * c.pi_star * (1 - c.pi_star) * (1 + rho) / (1 - rho)
    scale = max(ref, delta**2)
    assert abs(c.sigma2 - c.sigma2_martingale) <= 1e-10 * scale
    assert abs(c.sigma2 - ref) <= 1e-10 * scale
    assert c.sigma2 >= 0


def test_sigma2_reduction_on_grid():
    """p_cont = p'_cont = p: sigma^2 = delta^2 p / (1 - p)."""
    for p in np.linspace(0.01, 0.99, 99):
        for delta in (0.5, 1.0, 3.0):
            assert abs(pr.sigma2_closed_form(p, p, delta) - delta**2 * p / (1 - p)) \
                <= 1e-12 * max(1.0, delta**2 * p / (1 - p))


def test_sigma2_special_values():
    """Reference: delta^2 p / (1 - p) = 3 at p = 0.75, delta = 1; sigma = delta at p = 1/2."""
    assert_allclose(pr.sigma2_closed_form(0.75, 0.75, 1.0), 3.0, rtol=1e-14)
    c = pr.chain_from_probabilities(0.5, 0.5, 0.01)
    assert c.s_star == 0.0
    assert_allclose(math.sqrt(c.sigma2), 0.01, rtol=1e-14)


def test_stationary_rejects_absorbing_chain():
    with pytest.raises(ValueError):
        pr.stationary_up(1.0, 1.0)


@settings(max_examples=100, deadline=None)
@given(probs, probs, st.floats(0.0, 1.0))
def test_pn_up_contraction(p, pp, p1):
    c = pr.chain_from_probabilities(p, pp)
    rho = p + pp - 1
    n = np.arange(1, 30)
    vals = pr.pn_up(c, p1, n)
    assert vals[0] == p1
    assert_allclose(np.abs(vals[1:] - c.pi_star), abs(rho) * np.abs(vals[:-1] - c.pi_star),
                    atol=1e-15)


def test_pn_up_limits():
    c = pr.chain_from_probabilities(0.7, 0.4)
    assert_allclose(pr.pn_up(c, 0.9, 400), c.pi_star, atol=1e-15)
    c0 = pr.chain_from_probabilities(0.3, 0.7)   # p_cont + p'_cont = 1
    assert_allclose(pr.pn_up(c0, 0.9, np.arange(2, 10)), c0.pi_star, atol=1e-15)
    with pytest.raises(ValueError):
        pr.pn_up(c, 0.5, 0)


def _two_step_covariance(p, pp, p_n, delta):
    """cov(X_{n+1}, X_n) by enumerating the joint law of two consecutive moves."""
    P = np.array([[p, 1 - p], [1 - pp, pp]])
    law = np.array([p_n, 1 - p_n])
    vals = np.array([delta, -delta])
    joint = law[:, None] * P
    e_xy = np.sum(joint * vals[:, None] * vals[None, :])
    return e_xy - (law @ vals) * ((law @ P) @ vals)


def test_increment_covariance_example():
    """delta = 1, p_n_up = 1/2, p_cont + p'_cont = 1.2: covariance 0.2."""
    c = pr.chain_from_probabilities(0.6, 0.6)
    mean, cov = pr.increment_moments(c, 0.5, 1)
    assert_allclose(cov, 0.2, rtol=1e-14)
    assert_allclose(cov, _two_step_covariance(0.6, 0.6, 0.5, 1.0), rtol=1e-12)
    assert mean == 0.0
    assert pr.increment_moments(pr.chain_from_probabilities(0.5, 0.5), 0.3, 2)[1] == 0.0


@settings(max_examples=100, deadline=None)
@given(probs, probs, st.floats(0.01, 0.99), st.integers(1, 6))
def test_increment_moments_against_enumeration(p, pp, p1, n):
    c = pr.chain_from_probabilities(p, pp, 2.0)
    mean, cov = pr.increment_moments(c, p1, n)
    pn = pr.pn_up(c, p1, n)
    assert_allclose(mean, 2.0 * (2 * pn - 1), atol=1e-14)
    assert_allclose(cov, _two_step_covariance(p, pp, pn, 2.0), atol=1e-12)
    if 0 < pn < 1 and abs(p + pp - 1) > 1e-12:
        assert np.sign(cov) == np.sign(p + pp - 1)


# ---------------------------------------------------------------------------
# p1_up
# ---------------------------------------------------------------------------

def test_p1_up_symmetric(mixed_strict, cl_balanced):
    for k in (mixed_strict, cl_balanced):
        for n in (1, 4):
            r = pr.p1_up(k, k, n, n)
            assert abs(r.value - 0.5) < 1e-10
            assert not r.low_confidence


def test_p1_up_cl_against_monte_carlo(cl_balanced):
    """Memoryless symmetric kernel at (n_b, n_a) = (2, 1) against 1e6 simulated first moves."""
    runs = 10**6
    p = pr.p1_up(cl_balanced, cl_balanced, 2, 1).value
    _, d = sample_first_change(cl_balanced, cl_balanced, 2, 1, runs, seed=11)
    p_mc = float(np.mean(d == 1))
    assert abs(p_mc - p) <= 3 * math.sqrt(p * (1 - p) / runs)


def test_p1_up_decreasing_in_ask_depth(mixed_strict):
    """More ask depth delays the ask depletion: p1_up(1, n_a) < 1/2 and decreasing (MC-confirmed)."""
    vals = np.array([pr.p1_up(mixed_strict, mixed_strict, 1, na).value for na in range(1, 9)])
    assert abs(vals[0] - 0.5) < 1e-10
    assert np.all(np.diff(vals) < 0)
    runs = 40_000
    for na in (2, 5, 8):
        _, d = sample_first_change(mixed_strict, mixed_strict, 1, na, runs, seed=na)
        p_mc = float(np.mean(d == 1))
        v = vals[na - 1]
        assert abs(p_mc - v) <= 3.5 * math.sqrt(v * (1 - v) / runs)


def test_p1_up_frequency_and_time_routes_agree(mixed_strict, cl_strict):
    for nb, na in ((1, 1), (2, 3), (4, 1)):
        f = pr.p1_up(mixed_strict, cl_strict, nb, na, method="frequency").value
        t = pr.p1_up(mixed_strict, cl_strict, nb, na, method="time").value
        assert abs(f - t) < 1e-4


def test_p1_up_lattice_hand_trace():
    """Bid events every 1 ms, ask every 2 ms, only cancellations: the bid empties first."""
    bid = KernelSide.from_matrix(0.0, 1.0, Deterministic(1.0), v0=0.0)
    ask = KernelSide.from_matrix(0.0, 1.0, Deterministic(2.0), v0=0.0)
    assert pr.p1_up(bid, ask, 1, 1).value == pytest.approx(0.0, abs=1e-12)
    assert pr.p1_up(bid, ask, 3, 1).value == pytest.approx(1.0, abs=1e-12)
    # equal depletion times: the ask must empty strictly first, so the bid wins the tie
    assert pr.p1_up(bid, ask, 2, 1).value == pytest.approx(0.0, abs=1e-12)


def test_p1_up_rejects_bad_input(mixed_strict, lattice_kernel):
    with pytest.raises(ValueError):
        pr.p1_up(mixed_strict, mixed_strict, 0, 1)
    with pytest.raises(ValueError):
        pr.p1_up(mixed_strict, lattice_kernel, 1, 1)
    with pytest.raises(ValueError):
        pr.p1_up(mixed_strict, mixed_strict, 1, 1, method="nope")


def test_table_matches_single_evaluations(mixed_strict, weibull_kernel):
    table = pr.p1_up_table(mixed_strict, weibull_kernel, n_max=3)
    for nb in range(1, 4):
        for na in range(1, 4):
            assert_allclose(table(nb, na), pr.p1_up(mixed_strict, weibull_kernel, nb, na).value,
                            atol=1e-12)


# ---------------------------------------------------------------------------
# chain parameters and diffusion constants
# ---------------------------------------------------------------------------

def test_chain_symmetric_point_mass(mixed_strict):
    f = ReinitDistribution.point(1, 1)
    c = pr.chain_params(mixed_strict, mixed_strict, f, f, delta=0.01)
    assert_allclose([c.p_cont, c.p_cont_prime, c.pi_star], 0.5, atol=1e-10)
    assert abs(c.s_star) < 1e-11
    assert c.regime == STRICT and c.tail_exponent == 2.0


def test_chain_support_error(mixed_strict):
    table = pr.p1_up_table(mixed_strict, mixed_strict, n_max=3)
    f = ReinitDistribution.from_matrix(np.array([[0.0] * 3 + [1.0]] + [[0.0] * 4] * 3))
    with pytest.raises(pr.SupportError, match="extend N_max"):
        pr.chain_params(mixed_strict, mixed_strict, f, f, table=table)


def test_chain_continuation_from_table(mixed_strict, weibull_kernel):
    """p_cont = sum p1_up f and p'_cont = sum (1 - p1_up) f~, evaluated by hand."""
    f = ReinitDistribution.from_list([[1, 2, 0.3], [2, 1, 0.7]])
    ft = ReinitDistribution.from_list([[3, 1, 0.5], [1, 1, 0.5]])
    c = pr.chain_params(mixed_strict, weibull_kernel, f, ft, with_means=False)
    p = lambda nb, na: pr.p1_up(mixed_strict, weibull_kernel, nb, na).value  # noqa: E731
    assert_allclose(c.p_cont, 0.3 * p(1, 2) + 0.7 * p(2, 1), atol=1e-12)
    assert_allclose(c.p_cont_prime, 0.5 * (1 - p(3, 1)) + 0.5 * (1 - p(1, 1)), atol=1e-12)


def test_balanced_tau_star(cl_balanced):
    f = ReinitDistribution.from_list([[1, 2, 0.5], [2, 2, 0.5]])
    ft = ReinitDistribution.point(3, 1)
    c = pr.chain_params(cl_balanced, cl_balanced, f, ft)
    assert c.regime == BALANCED
    a = lambda n: balanced_alpha(cl_balanced, n)  # noqa: E731
    pi = c.pi_star
    ref = pi * (0.5 * a(1) * a(2) + 0.5 * a(2) * a(2)) + (1 - pi) * a(3) * a(1)
    assert_allclose(c.tau_star, ref, rtol=1e-12)
    d = pr.diffusion_constants(c)
    assert_allclose(d.drift, c.s_star / c.tau_star)
    assert_allclose(d.volatility, math.sqrt(c.sigma2 / c.tau_star))


def test_mixed_regime_refused(cl_balanced, mixed_strict):
    f = ReinitDistribution.point(1, 1)
    c = pr.chain_params(cl_balanced, mixed_strict, f, f)
    assert c.regime == pr.MIXED and c.tail_exponent == 1.5
    assert c.notes
    with pytest.raises(pr.RegimeError):
        pr.diffusion_constants(c)
    assert pr.diffusion_constants(c, allow_mixed=True).time_scale > 0


def test_mean_tau_routes_and_monte_carlo(mixed_strict, cl_strict):
    """E[tau]: frequency route, time-domain route, and the simulated mean."""
    val, err, low = pr.mean_tau(mixed_strict, cl_strict, 2, 3)
    tval = pr.mean_tau_time(mixed_strict, cl_strict, 2, 3)
    tval = tval[0] if isinstance(tval, tuple) else tval
    assert not low
    assert_allclose(val, tval, rtol=1e-3)
    tau, _ = sample_first_change(mixed_strict, cl_strict, 2, 3, 200_000, seed=5)
    assert abs(tau.mean() - val) <= 3 * tau.std() / math.sqrt(tau.size)


def test_strict_m_tau(mixed_strict, weibull_kernel):
    f = ReinitDistribution.from_list([[1, 2, 0.5], [2, 2, 0.5]])
    ft = ReinitDistribution.point(2, 1)
    c = pr.chain_params(mixed_strict, weibull_kernel, f, ft)
    m = lambda nb, na: pr.mean_tau(mixed_strict, weibull_kernel, nb, na)[0]  # noqa: E731
    assert_allclose(c.m_up, 0.5 * m(1, 2) + 0.5 * m(2, 2), rtol=1e-10)
    assert_allclose(c.m_down, m(2, 1), rtol=1e-10)
    assert_allclose(c.m_tau, c.pi_star * c.m_up + (1 - c.pi_star) * c.m_down, rtol=1e-12)
    d = pr.diffusion_constants(c)
    assert d.time_scale == c.m_tau
    out = c.to_dict()
    assert {"p_cont", "p_cont_prime", "pi_star", "s_star", "sigma2", "regime", "m_tau", "g",
            "p1_up_table"} <= set(out)


def test_sojourn_cdf_is_mixture(mixed_strict):
    f = ReinitDistribution.from_list([[1, 1, 0.25], [2, 1, 0.75]])
    c = pr.chain_params(mixed_strict, mixed_strict, f, f, with_means=False)
    t = np.array([0.3, 1.0, 5.0])
    cdf = c.sojourn_cdf(t, direction=1)
    assert np.all(np.diff(cdf) > 0) and np.all((cdf > 0) & (cdf < 1))
    tau1, _ = sample_first_change(mixed_strict, mixed_strict, 1, 1, 100_000, seed=1)
    tau2, _ = sample_first_change(mixed_strict, mixed_strict, 2, 1, 100_000, seed=2)
    emp = 0.25 * np.mean(tau1[:, None] <= t, axis=0) + 0.75 * np.mean(tau2[:, None] <= t, axis=0)
    assert np.max(np.abs(emp - cdf)) < 0.006
