from __future__ import annotations

import math
from decimal import Decimal

import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy import stats

from semilob import calibration as cal
from semilob.kernel import KernelSide, ReinitDistribution, Weibull
from semilob.simulator import SimConfig, simulate_event_log, write_event_log


def _write(path, text):
    path.write_text(text)
    return path


# ---------------------------------------------------------------------------
# transitions and buckets
# ---------------------------------------------------------------------------

def test_transition_counting_example():
    """[+1, +1, -1, +1]: P(1,1) = 1/2, P(1,-1) = 1/2, P(-1,1) = 1."""
    tr = cal.estimate_transitions(cal.stream_from_types([1, 1, -1, 1]))
    assert tr.P[(1, 1)] == 0.5 and tr.P[(1, -1)] == 0.5 and tr.P[(-1, 1)] == 1.0
    assert tr.counts == {(1, 1): 1, (1, -1): 1, (-1, 1): 1, (-1, -1): 0}
    assert tr.n == 3 and tr.unestimable == []
    assert tr.unconditional == {1: 0.75, -1: 0.25}


def test_empty_row_is_flagged_not_defaulted():
    tr = cal.estimate_transitions(cal.stream_from_types([1] * 8))
    assert tr.unestimable == [-1]
    assert math.isnan(tr.P[(-1, 1)]) and math.isnan(tr.P[(-1, -1)])
    assert tr.P[(1, 1)] == 1.0
    assert cal.estimate_transitions(cal.stream_from_types([1])).unestimable == [1, -1]


def test_rows_sum_to_one():
    rng = np.random.default_rng(3)
    tr = cal.estimate_transitions(cal.stream_from_types(rng.choice([1, -1], 1001)))
    for i in (1, -1):
        assert tr.P[(i, 1)] + tr.P[(i, -1)] == 1.0
        assert_allclose(tr.se[(i, 1)], math.sqrt(tr.P[(i, 1)] * tr.P[(i, -1)]
                                                 / (tr.counts[(i, 1)] + tr.counts[(i, -1)])))


def test_group_interarrivals_example():
    """(+1, .), (-1, 5 ms), (-1, 3 ms), (+1, 2 ms) -> (1,-1)={5}, (-1,-1)={3}, (-1,1)={2}."""
    g = cal.group_interarrivals(cal.stream_from_types([1, -1, -1, 1], [0.0, 5.0, 3.0, 2.0]))
    assert g[(1, -1)].tolist() == [5.0]
    assert g[(-1, -1)].tolist() == [3.0]
    assert g[(-1, 1)].tolist() == [2.0]
    assert g[(1, 1)].size == 0


def test_empty_bucket_skips_fit():
    rng = np.random.default_rng(0)
    side = cal.stream_from_types([1, -1] * 30, rng.exponential(size=60))
    res = cal.calibrate_side(side)
    assert all(isinstance(v, str) and v.startswith("skipped") for v in res.fits[(1, 1)].values())
    assert isinstance(res.fits[(1, -1)]["exponential"], cal.FitResult)


def test_zero_waits_counted_not_fitted():
    rng = np.random.default_rng(1)
    dt = rng.exponential(size=200)
    dt[::10] = 0.0
    res = cal.calibrate_side(cal.stream_from_types(rng.choice([1, -1], 200), dt))
    assert sum(res.zero_dt.values()) == 19      # dt[0] has no predecessor
    for b in cal.BUCKETS:
        assert np.all(res.samples[b] > 0)


def test_v0_frequency():
    side = cal.SideStream.build([Decimal(k) for k in range(6)], [1, -1, -1, 1, 1, -1],
                                [0, 0, 1, 1, 2, 2])
    freq, n, _ = cal.estimate_v0(side)
    assert (freq, n) == (pytest.approx(2 / 3), 3)


# ---------------------------------------------------------------------------
# maximum likelihood
# ---------------------------------------------------------------------------

def test_exponential_mle_is_mean():
    f = cal.fit_exponential([1.0, 2.0, 3.0])
    assert f.theta == 2.0 and f.k == 1.0
    assert_allclose(f.loglik, np.sum(stats.expon.logpdf([1, 2, 3], scale=2.0)))


def test_weibull_mle_against_scipy():
    """Profile-Newton estimate against scipy's generic optimiser (location fixed at 0)."""
    x = 2.0 * np.random.default_rng(5).weibull(0.22, 5000)
    f = cal.fit_weibull(x)
    k, _, th = stats.weibull_min.fit(x, floc=0)
    assert_allclose([f.k, f.theta], [k, th], rtol=1e-4)
    assert_allclose(f.loglik, np.sum(stats.weibull_min.logpdf(x, f.k, scale=f.theta)), rtol=1e-10)
    assert f.k_ci[0] < f.k < f.k_ci[1] and f.theta_ci[0] < f.theta < f.theta_ci[1]


def test_gamma_mle_against_scipy():
    x = np.random.default_rng(6).gamma(0.4, 3.0, 5000)
    f = cal.fit_gamma(x)
    k, _, th = stats.gamma.fit(x, floc=0)
    assert_allclose([f.k, f.theta], [k, th], rtol=1e-4)
    assert_allclose(f.loglik, np.sum(stats.gamma.logpdf(x, f.k, scale=f.theta)), rtol=1e-10)


def test_weibull_ci_coverage():
    """1e5 draws of Weibull(k=0.22, theta=2): the 95% CI for k covers 0.22 in >= 18 of 20 seeds."""
    hits = 0
    for seed in range(20):
        x = 2.0 * np.random.default_rng(100 + seed).weibull(0.22, 100_000)
        hits += cal.fit_weibull(x).covers(k=0.22)
    assert hits >= 18


def test_gamma_on_exponential_data():
    x = np.random.default_rng(8).exponential(3.0, 20_000)
    f = cal.fit_gamma(x)
    assert f.covers(k=1.0)
    assert abs(f.k - 1.0) < 0.05


def test_nested_likelihood_ordering():
    x = 2.0 * np.random.default_rng(9).weibull(0.5, 2000)
    assert cal.fit_weibull(x).loglik >= cal.fit_exponential(x).loglik
    assert cal.fit_gamma(x).loglik >= cal.fit_exponential(x).loglik


def test_degenerate_and_invalid_samples():
    for fit in (cal.fit_weibull, cal.fit_gamma):
        with pytest.raises(cal.CalibrationError, match="degenerate"):
            fit([2.5] * 20)
        with pytest.raises(cal.CalibrationError):
            fit([1.0] * 5)
    with pytest.raises(cal.CalibrationError):
        cal.fit_exponential([1.0, 0.0, 2.0])


def test_censored_row_fit_recovers_probability():
    """Right-censoring removes slow transitions more often; the joint fit undoes the bias.

    Waits are exponential with mean 1 (before +1) and 4 (before -1), p = 0.4,
    censored at an independent exponential time with mean 2.
    """
    rng = np.random.default_rng(10)
    n = 40_000
    up = rng.random(n) < 0.4
    w = np.where(up, rng.exponential(1.0, n), rng.exponential(4.0, n))
    c = rng.exponential(2.0, n)
    seen = w <= c
    x_up, x_down, cens = w[seen & up], w[seen & ~up], c[~seen]
    raw = x_up.size / (x_up.size + x_down.size)
    assert raw > 0.45                                     # the plain frequency is biased
    f_up, f_down, p, p_se = cal.fit_row_censored("exponential", x_up, x_down, cens, raw)
    assert abs(p - 0.4) <= 3 * p_se
    assert f_up.covers(theta=1.0) and f_down.covers(theta=4.0)


# ---------------------------------------------------------------------------
# empirical cdf
# ---------------------------------------------------------------------------

def test_ecdf_examples(tmp_path):
    F = cal.EmpiricalCDF([2.0, 1.0])
    assert F(1.0) == 0.5 and F(2.0) == 1.0 and F(0.5) == 0.0 and F(1.5) == 0.5
    with pytest.raises(ValueError):
        cal.EmpiricalCDF([])
    x = 2.0 * np.random.default_rng(4).weibull(0.5, 200)
    fits = [cal.fit_weibull(x), cal.fit_exponential(x)]
    cal.EmpiricalCDF(x).export(tmp_path / "ecdf.csv", fits, meta={"seed": 4})
    lines = (tmp_path / "ecdf.csv").read_text().splitlines()
    assert lines[0] == "# seed=4" and lines[1] == "t,empirical,weibull,exponential"
    assert float(lines[-1].split(",")[1]) == 1.0


def test_ecdf_ks_shrinks():
    """KS distance to the generating cdf at n = 1e5 is below 0.006 (DKW: P[D > 0.006] < 2e-3)."""
    law = Weibull(0.3, 2.0)
    x = 2.0 * np.random.default_rng(12).weibull(0.3, 100_000)
    d = cal.EmpiricalCDF(x).ks_distance(law.cdf)
    assert d < 0.006
    assert_allclose(d, stats.kstest(x, law.cdf).statistic, rtol=1e-12)


# ---------------------------------------------------------------------------
# parsing and classification
# ---------------------------------------------------------------------------

MESSAGES = """34200.001,1,11,100,999900,1
34200.002,3,11,100,999900,1
34200.0035,4,0,100,1000000,-1
34200.004,5,0,100,1000000,-1
34200.005,1,12,100,999800,1
"""
BOOK = """1000000,300,999900,200
1000000,300,999900,100
1000000,200,999900,100
1000000,200,999900,100
1000000,200,999900,100
"""


def test_parse_rows_and_errors(tmp_path):
    path = _write(tmp_path / "m.csv", MESSAGES + "34200.006,1,13,100\n34200.007,9,1,1,1,1\n"
                  + "34200.008,1,14,100,999900,1\n")
    res = cal.parse_messages(path)
    assert len(res) == 6
    assert [ln for ln, _ in res.errors] == [6, 7]
    assert "6 columns" in res.errors[0][1]
    r = res.records[0]
    assert (r.time, r.code, r.order_id, r.size, r.price, r.direction) == \
        (Decimal("34200.001"), 1, 11, 100, 999900, 1)


def test_parse_failures(tmp_path):
    with pytest.raises(cal.CalibrationError):
        cal.parse_messages(tmp_path / "missing.csv")
    with pytest.raises(cal.CalibrationError):
        cal.parse_messages(_write(tmp_path / "empty.csv", ""))


def test_out_of_order_warning_and_sort(tmp_path):
    path = _write(tmp_path / "m.csv", "34200.5,1,1,100,999900,1\n34200.1,1,2,100,999900,1\n")
    with pytest.warns(UserWarning):
        res = cal.parse_messages(path)
    assert res.records[0].order_id == 1
    with pytest.warns(UserWarning):
        res = cal.parse_messages(path, sort=True)
    assert [r.order_id for r in res.records] == [2, 1]


def test_parse_serialize_parse_identity(tmp_path):
    src = _write(tmp_path / "m.csv", MESSAGES)
    first = cal.parse_messages(src)
    cal.write_messages(first.records, tmp_path / "again.csv")
    second = cal.parse_messages(tmp_path / "again.csv")
    assert first.records == second.records
    assert (tmp_path / "again.csv").read_text() == MESSAGES


def test_classification_with_order_book(tmp_path):
    """Limit buy at the best bid -> bid +1; visible sell execution at the best ask -> ask -1."""
    res = cal.parse_messages(_write(tmp_path / "m.csv", MESSAGES),
                             orderbook=_write(tmp_path / "b.csv", BOOK))
    stream = cal.classify_events(res)
    assert stream.bid.types.tolist() == [1, -1]
    assert stream.ask.types.tolist() == [-1]
    assert stream.excluded == {"away_from_best": 1, "hidden": 1, "other": 0}
    assert_allclose(stream.bid.dt[1], 1.0)
    hidden = cal.classify_events(res, include_hidden=True)
    assert hidden.ask.types.tolist() == [-1, -1]


def _simulated_log(seed=3, events=20_000, law=None, f=None):
    law = law or Weibull(0.5, 10.0)
    k = KernelSide.from_matrix(0.45, 0.6, law, v0=0.5)
    f = f or ReinitDistribution.from_list([[3, 3, 0.5], [4, 2, 0.5]])
    return simulate_event_log(SimConfig(k, k, f, f, horizon_changes=10**9, seed=seed), events)


def test_lobster_round_trip_equals_native_log(tmp_path):
    """Simulated log -> LOBSTER files -> parse + classify equals the native-log adapter."""
    log = _simulated_log()
    write_event_log(log, tmp_path / "ev.csv")
    native = cal.read_event_log(tmp_path / "ev.csv")
    cal.write_lobster(log, tmp_path / "msg.csv", tmp_path / "book.csv", hidden_rate=0.02,
                      deep_rate=0.02, seed=1)
    parsed = cal.parse_messages(tmp_path / "msg.csv", orderbook=tmp_path / "book.csv")
    via_book = cal.classify_events(parsed)
    assert via_book.equals(native)
    assert via_book.periods == native.periods
    assert_array = np.testing.assert_array_equal
    assert_array(native.bid.types, log.event[log.side == 0])
    assert_array(native.ask.types, log.event[log.side == 1])
    # without the order book and without deep-level noise the fallback is exact too
    cal.write_lobster(log, tmp_path / "msg2.csv", tmp_path / "book2.csv", hidden_rate=0.02,
                      seed=1)
    assert cal.classify_events(cal.parse_messages(tmp_path / "msg2.csv")).equals(native)


def test_native_log_waits_are_exact(tmp_path):
    """Waiting times read back from the CSV reproduce every drawn waiting time."""
    log = _simulated_log(events=5000, law=Weibull(0.15, 1.0))
    write_event_log(log, tmp_path / "ev.csv")
    stream = cal.read_event_log(tmp_path / "ev.csv")
    sel = log.side == 0
    same = log.period[sel][1:] == log.period[sel][:-1]
    assert_allclose(stream.bid.dt[1:][same], log.dt[sel][1:][same] * 1.0, rtol=1e-12, atol=0)


def test_bucket_samples_follow_generating_law(tmp_path):
    """Weibull(0.5, 10) kernel: each bucket of complete waits passes KS at 5%.

    Complete waits are those not cut by a price change; the cut ones are the
    long ones, so the check needs periods with many events each (deep
    queues): one censored wait per side and period is then negligible.
    """
    log = _simulated_log(seed=7, events=20_000, f=ReinitDistribution.point(20, 20))
    write_event_log(log, tmp_path / "ev.csv")
    stream = cal.read_event_log(tmp_path / "ev.csv")
    law = Weibull(0.5, 10.0)
    for side in (stream.bid, stream.ask):
        for b, x in cal.group_interarrivals(side).items():
            assert stats.kstest(x, law.cdf).pvalue > 0.05, b


def test_report_outputs(tmp_path):
    log = _simulated_log(events=20_000)
    write_event_log(log, tmp_path / "ev.csv")
    rep = cal.calibrate(cal.read_event_log(tmp_path / "ev.csv"), families=("weibull",
                                                                           "exponential"))
    assert rep.unestimable == []
    rep.write_json(tmp_path / "c.json", meta={"seed": 3})
    rep.write_table(tmp_path / "c.csv")
    rows = (tmp_path / "c.csv").read_text().splitlines()
    assert len(rows) == 1 + 2 * 4 * 2
    k = rep.bid.kernel("weibull")
    assert isinstance(k, KernelSide)
    for b in cal.BUCKETS:
        assert rep.bid.fits[b]["weibull"].loglik >= rep.bid.fits[b]["exponential"].loglik - 1e-9
