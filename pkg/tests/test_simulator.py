from __future__ import annotations

import math

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal
from scipy import stats

from semilob import price as pr
from semilob.depletion import classify_tail, tau_survival
from semilob.kernel import (Deterministic, Exponential, Gamma, KernelSide, ReinitDistribution,
                            Weibull)
from semilob.simulator import (BookState, RunawaySimulation, SimConfig, chain_counts, mc_estimate,
                               sample_depletion, sample_first_change, simulate_event_log,
                               simulate_path, simulate_until_price_change)


def _config(bid, ask, f=None, ft=None, **kw):
    f = f or ReinitDistribution.point(2, 2)
    return SimConfig(bid, ask, f, ft or f, **kw)


def test_hand_traced_period():
    """Bid events every 1 ms, ask every 2 ms, only cancellations from (1, 1): bid empties at t = 1."""
    bid = KernelSide.from_matrix(0.0, 1.0, Deterministic(1.0), v0=0.0)
    ask = KernelSide.from_matrix(0.0, 1.0, Deterministic(2.0), v0=0.0)
    cfg = _config(bid, ask, ReinitDistribution.point(1, 1), horizon_changes=3, delta=0.01)
    tau, move, new = simulate_until_price_change(cfg, BookState(10.0, 1, 1, -1, -1, delta=0.01))
    assert tau == 1.0 and move == -0.01
    assert new.bid == pytest.approx(9.99) and new.t == 1.0
    assert (new.q_b, new.q_a) == (1, 1)
    path = simulate_path(cfg)
    assert_array_equal(path.times, [1.0, 2.0, 3.0])
    assert_array_equal(path.increments, [-0.01] * 3)


def test_simultaneous_depletion_goes_to_bid():
    """Both queues empty at t = 2: the bid is processed first, so the move is down."""
    bid = KernelSide.from_matrix(0.0, 1.0, Deterministic(1.0), v0=0.0)
    ask = KernelSide.from_matrix(0.0, 1.0, Deterministic(2.0), v0=0.0)
    tau, move, _ = simulate_until_price_change(_config(bid, ask, horizon_changes=1),
                                               BookState(0.0, 2, 1, -1, -1))
    assert (tau, move) == (2.0, -1.0)


def test_book_state_invariants():
    s = BookState(100.0, 3, 4, 1, -1, delta=0.5)
    assert s.ask == 100.5 and s.mid == 100.25
    with pytest.raises(ValueError):
        BookState(100.0, 0, 4, 1, -1)
    with pytest.raises(ValueError):
        BookState(100.0, 1, 4, 0, -1)


def test_symmetric_first_move_is_fair():
    """i.i.d. kernel with P(1,1) = P(-1,-1) = 1/2 on both sides, q0 = (3, 3): P[up] = 1/2."""
    k = KernelSide.from_matrix(0.5, 0.5, Exponential(1.0))
    runs = 100_000
    _, d = sample_first_change(k, k, 3, 3, runs, seed=3)
    assert abs(np.mean(d == 1) - 0.5) <= 3 * math.sqrt(0.25 / runs)


def test_path_is_reproducible(mixed_strict):
    cfg = _config(mixed_strict, mixed_strict, horizon_changes=500, seed=42)
    a, b = simulate_path(cfg), simulate_path(cfg)
    assert_array_equal(a.times, b.times)
    assert_array_equal(a.increments, b.increments)
    assert_array_equal(a.queue_starts, b.queue_starts)
    c = simulate_path(_config(mixed_strict, mixed_strict, horizon_changes=500, seed=43))
    assert not np.array_equal(a.times, c.times)
    assert cfg.config_hash() == _config(mixed_strict, mixed_strict, horizon_changes=500,
                                        seed=42).config_hash()


def test_path_invariants(mixed_strict):
    path = simulate_path(_config(mixed_strict, mixed_strict, horizon_time=500.0, seed=1))
    assert np.all(np.diff(path.times) > 0)
    assert set(np.unique(path.increments)) <= {-1.0, 1.0}
    t = np.array([0.0, path.times[3], 250.0, 500.0])
    assert_allclose(path.price(t), [np.sum(path.increments[:path.count(x)]) for x in t])
    assert path.times[-1] <= 500.0


def test_event_log_reproduces_path(mixed_strict, weibull_kernel):
    f = ReinitDistribution.from_list([[1, 2, 0.5], [3, 1, 0.5]])
    cfg = _config(mixed_strict, weibull_kernel, f, ReinitDistribution.point(2, 2),
                  horizon_time=300.0, seed=9)
    path = simulate_path(cfg)
    log = simulate_event_log(cfg, 10**7)
    moves = log.price_change != 0
    assert_allclose(log.time[moves], path.times, rtol=0, atol=0)
    assert_array_equal(log.price_change[moves], path.increments)
    assert np.all(log.q_b >= 1) and np.all(log.q_a >= 1)
    assert np.all(np.diff(log.time) >= 0)


def _within_period_transitions(log, side):
    """Counts of consecutive (previous, next) event types on one side inside one period."""
    sel = log.side == side
    ev, per = log.event[sel], log.period[sel]
    same = per[1:] == per[:-1]
    prev, nxt = ev[:-1][same], ev[1:][same]
    return {(i, j): int(np.sum((prev == i) & (nxt == j))) for i in (1, -1) for j in (1, -1)}


def test_event_types_follow_kernel():
    """Chi-square on within-period transitions of both sides (1e6 events).

    Each row uses one duration law for both next types: the event pending
    when a period ends is then dropped independently of its type, so raw
    within-period counts are unbiased. (With type-dependent durations the
    censoring favours the shorter transition; calibration corrects for it.)
    """
    bid = KernelSide.from_matrix(0.35, 0.6, {(1, 1): Gamma(0.5, 2.0), (1, -1): Gamma(0.5, 2.0),
                                             (-1, 1): Exponential(0.8),
                                             (-1, -1): Exponential(0.8)}, v0=0.6)
    ask = KernelSide.from_matrix(0.4, 0.6, {(1, 1): Weibull(0.6, 1.0), (1, -1): Weibull(0.6, 1.0),
                                            (-1, 1): Weibull(0.7, 0.5),
                                            (-1, -1): Weibull(0.7, 0.5)}, v0=0.4)
    cfg = _config(bid, ask, ReinitDistribution.point(5, 5), horizon_changes=10**9, seed=4)
    log = simulate_event_log(cfg, 10**6)
    for side, k in ((0, bid), (1, ask)):
        c = _within_period_transitions(log, side)
        for i in (1, -1):
            obs = np.array([c[(i, 1)], c[(i, -1)]])
            exp = obs.sum() * np.array([k.P[(i, 1)], k.P[(i, -1)]])
            assert stats.chisquare(obs, exp).pvalue > 1e-3


def test_reinitialization_law():
    """Queue sizes after up- and down-moves against f and f~ on a 5x5 support (chi-square)."""
    rng = np.random.default_rng(0)
    f = ReinitDistribution.from_matrix(rng.dirichlet(np.ones(25)).reshape(5, 5))
    ft = ReinitDistribution.from_matrix(rng.dirichlet(np.ones(25)).reshape(5, 5))
    k = KernelSide.memoryless(1.0, 1.5)
    path = simulate_path(_config(k, k, f, ft, horizon_changes=60_000, seed=2))
    starts = path.queue_starts[1:path.n_changes]
    prev = path.increments[:starts.shape[0]]
    for dist, mask in ((f, prev > 0), (ft, prev < 0)):
        obs = np.zeros((5, 5))
        np.add.at(obs, (starts[mask, 0] - 1, starts[mask, 1] - 1), 1)
        expected = np.array([[dist(i, j) for j in range(1, 6)] for i in range(1, 6)])
        keep = expected.ravel() > 0
        assert stats.chisquare(obs.ravel()[keep], obs.sum() * expected.ravel()[keep]).pvalue > 1e-3


def test_renewal_rate_matches_mean_sojourn(mixed_strict, cl_strict):
    """Strict regime: N_t / t -> 1 / m_tau within 5% at t = 1e4 m_tau."""
    f = ReinitDistribution.from_list([[1, 2, 0.5], [2, 1, 0.5]])
    ft = ReinitDistribution.point(2, 2)
    params = pr.chain_params(mixed_strict, cl_strict, f, ft)
    t = 1e4 * params.m_tau
    path = simulate_path(_config(mixed_strict, cl_strict, f, ft, horizon_time=t, seed=12))
    assert abs(path.count(t) / t * params.m_tau - 1) < 0.05


@pytest.mark.parametrize("f, ft, sign", [((5, 1), (1, 5), 1), ((1, 5), (5, 1), -1)])
def test_lag_one_covariance_sign(mixed_strict, f, ft, sign):
    """Sign of the empirical lag-1 covariance equals sign(p_cont + p'_cont - 1)."""
    f, ft = ReinitDistribution.point(*f), ReinitDistribution.point(*ft)
    params = pr.chain_params(mixed_strict, mixed_strict, f, ft, with_means=False)
    assert np.sign(params.p_cont + params.p_cont_prime - 1) == sign
    counts = chain_counts(simulate_path(_config(mixed_strict, mixed_strict, f, ft,
                                                horizon_changes=20_000, seed=6)))
    assert np.sign(counts["lag1_cov"]) == sign
    assert abs(counts["p_cont"] - params.p_cont) <= 3.5 * counts["p_cont_se"]


def test_tau_law_against_inversion(mixed_strict, cl_strict):
    """Empirical survival of tau against the inverted survival product (KS within 0.01, 1e5 runs)."""
    tau, _ = sample_first_change(mixed_strict, cl_strict, 2, 3, 100_000, seed=8)
    x = np.sort(tau)
    grid = np.quantile(x, np.linspace(0.005, 0.995, 200))
    surv = tau_survival(classify_tail(mixed_strict), classify_tail(cl_strict), grid, 2, 3).value
    emp = 1.0 - np.searchsorted(x, grid, side="right") / x.size
    assert np.max(np.abs(emp - surv)) < 0.01


def test_depletion_censoring(cl_balanced):
    s, _ = sample_depletion(cl_balanced, 2, 5000, seed=0, t_max=10.0)
    assert np.all((s <= 10.0) | np.isinf(s))
    assert np.isinf(s).any()
    with pytest.raises(ValueError):
        sample_depletion(cl_balanced, 0, 10)


def test_runaway_cap(cl_balanced):
    cfg = _config(cl_balanced, cl_balanced, horizon_changes=10**6, max_events=1000)
    with pytest.raises(RunawaySimulation):
        simulate_path(cfg)


def test_config_rejects_invalid_input(cl_balanced):
    transient = KernelSide.from_matrix(0.8, 0.2, Exponential(1.0))
    with pytest.raises(ValueError):
        _config(transient, cl_balanced, horizon_changes=1)
    with pytest.raises(ValueError):
        _config(cl_balanced, cl_balanced)  # no horizon


def test_mc_estimates(cl_balanced, mixed_strict):
    cfg = _config(cl_balanced, cl_balanced, horizon_changes=1, seed=21)
    with pytest.raises(ValueError):
        mc_estimate(cfg, "p_up", 10)
    est = mc_estimate(cfg, "p_up", 200_000, n_b=2, n_a=1)
    assert abs(est.z_score) <= 3
    tail = mc_estimate(cfg, "sigma_tail", 200_000, side="ask", n=1, t_lo=30.0, t_hi=3000.0)
    assert abs(tail.value + 0.5) <= 0.1
    strict = _config(mixed_strict, mixed_strict, ReinitDistribution.point(3, 1),
                     ReinitDistribution.point(1, 2), horizon_changes=1, seed=5)
    params = pr.chain_params(mixed_strict, mixed_strict, strict.f, strict.f_tilde,
                             with_means=False)
    chain = mc_estimate(strict, "chain_probs", 50_000, analytic=params)
    assert abs(chain.z_score) <= 3
    with pytest.raises(ValueError):
        mc_estimate(cfg, "nothing", 1000)
