from __future__ import annotations

import math

import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy import stats

from semilob import validation as val
from semilob.kernel import Deterministic, Exponential, KernelSide


def test_ks_censored_matches_scipy_without_censoring():
    """Reference: scipy.stats.kstest statistic when no sample exceeds t_max."""
    x = np.random.default_rng(0).exponential(2.0, 3000)
    cdf = stats.expon(scale=2.0).cdf
    assert_allclose(val.ks_censored(x, cdf, 1e6), stats.kstest(x, cdf).statistic, atol=1e-12)


def test_ks_censored_counts_mass_beyond_t_max():
    """Samples above t_max enter only through the ecdf jump at t_max."""
    x = np.array([0.5, 1.5, np.inf, np.inf])
    cdf = stats.uniform(0, 4).cdf
    # ecdf: 1/4 at 0.5, 1/2 at 1.5; cdf(2) = 1/2 matches the censored mass
    assert_allclose(val.ks_censored(x, cdf, 2.0), 1 / 8, atol=1e-15)


def test_batch_se_matches_iid_standard_error():
    """For i.i.d. data, batch means reproduce sd / sqrt(n) within 20%."""
    x = np.random.default_rng(1).normal(size=200_000)
    assert abs(val.batch_se(x) / (1 / math.sqrt(x.size)) - 1) < 0.2


def test_path_sum_of_a_pure_cancellation_book():
    """Only -1 events of duration 1: the queue n empties at exactly t = n, phi = exp(i t n)."""
    k = KernelSide.from_matrix(0.0, 1.0, Deterministic(1.0), v0=0.0)
    t = np.linspace(-5, 5, 11)
    for n in (1, 3):
        phi, alive = val.path_sum_cf(k, n, t, horizon=10)
        assert_allclose(phi, np.exp(1j * t * n), atol=1e-15)
        assert alive == 0.0


def test_recurrence_residual_is_small_for_memoryless_kernel():
    assert val.recurrence_residual(KernelSide.memoryless(1.0, 1.3), np.geomspace(1e-3, 10, 5)) \
        < 1e-13


def test_interpolated_cdf_of_a_gamma_depletion_time():
    """Only -1 events with Exp(2) durations: sigma for n = 3 is Gamma(3, scale 2)."""
    k = KernelSide.from_matrix(0.0, 1.0, Exponential(2.0), v0=0.0)
    cdf, ierr, ninv, low = val.interpolated_cdf(k, 3, 0.05, 60.0, nodes=60)
    t = np.geomspace(0.06, 50.0, 37)
    assert not low and ninv < 1e-7
    assert np.max(np.abs(cdf(t) - stats.gamma(3, scale=2.0).cdf(t))) < max(ierr, 1e-6) * 5


def test_random_kernels_are_valid_and_recurrent():
    rng = np.random.default_rng(4)
    for _ in range(50):
        k = val.random_kernel(rng)
        assert k.P[(1, 1)] <= k.P[(-1, -1)]


def test_fast_tolerances_loosen_and_overrides_apply():
    tol = val.tolerances_for(val.FAST, {"ks": {"max_distance": 0.05}})
    assert tol["ks"]["max_distance"] == 0.05
    assert tol["tail"]["slope"] == 0.15
    assert val.tolerances_for(val.FULL)["tail"]["slope"] == 0.1
    with pytest.raises(KeyError):
        val.tolerances_for(val.FULL, {"nothing": {}})
    with pytest.raises(KeyError):
        val.tolerances_for(val.FULL, {"ks": {"nothing": 1}})


@pytest.mark.parametrize("name", ["cl_reduction", "recurrence", "path_sum", "sigma2", "chain",
                                  "diffusion", "p_up", "calibration"])
def test_fast_checks_pass(name):
    (res,) = val.run_checks([name], val.FAST)
    assert res.passed, res.measured
    d = res.to_dict()
    assert d["name"] == name and d["passed"] is True
    assert res.line().startswith(f"PASS {name}")


def test_fast_tail_check_balanced_half():
    """At reduced size the balanced survival slope and prefactor are within the fast tolerances.

    The strict half is reported separately (see the acceptance suite).
    """
    (res,) = val.run_checks(["tail"], val.FAST)
    assert res.measured["balanced"]["passed"]
    assert_allclose(res.measured["balanced"]["target_slope"], -0.5)
