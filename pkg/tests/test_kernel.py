from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose
from scipy import integrate, stats

from semilob.kernel import (EVENT_TYPES, Deterministic, EmpiricalStep, Exponential, Gamma,
                            KernelSide, ReinitDistribution, Weibull, duration_from_dict,
                            duration_laplace, duration_moments, kernel_laplace,
                            kernel_laplace_row, rotated_laplace, validate_side)

FAMILIES = [Exponential(2.0), Weibull(0.3, 1.5), Weibull(2.5, 0.7), Gamma(0.4, 3.0), Gamma(2.0, 1.0),
            Deterministic(1.3), EmpiricalStep((0.5, 1.0, 4.0), (0.2, 0.5, 0.3))]


def test_event_type_has_two_states():
    assert sorted(int(e) for e in EVENT_TYPES) == [-1, 1]


@pytest.mark.parametrize("d", FAMILIES, ids=lambda d: d.family)
def test_transform_at_zero_is_total_mass(d):
    assert_allclose(duration_laplace(d, 0.0), 1.0, atol=1e-12)


def test_gamma_transform_matches_quadrature_of_density():
    d = Gamma(2.0, 1.0)
    direct, _ = integrate.quad(lambda t: math.exp(-t) * stats.gamma.pdf(t, 2.0), 0, np.inf)
    assert_allclose(duration_laplace(d, 1.0), 0.25, atol=1e-14)
    assert_allclose(direct, 0.25, atol=1e-10)


def test_deterministic_transform_is_a_phase():
    assert_allclose(duration_laplace(Deterministic(1.0), -1j * math.pi), -1.0, atol=1e-14)


@pytest.mark.parametrize("k,theta", [(0.15, 1.0), (0.3, 2.0), (0.7, 0.5), (2.5, 3.0)])
def test_weibull_transform_matches_scipy_quadrature(k, theta):
    """Reference after the substitution u = (t/theta)^k, which makes the integrand smooth."""
    d = Weibull(k, theta)
    for s in (0.01, 0.3, 2.0):
        ref, _ = integrate.quad(lambda u: math.exp(-s * theta * u ** (1 / k) - u), 0, np.inf,
                                limit=500, epsabs=1e-14, epsrel=1e-13)
        assert_allclose(duration_laplace(d, s).real, ref, atol=2e-10)


def test_weibull_shape_one_is_exponential():
    z = np.concatenate([np.geomspace(1e-4, 1e3, 20), -1j * np.geomspace(1e-4, 1e3, 20)])
    assert_allclose(Weibull(1.0, 3.0).laplace(z), Exponential(3.0).laplace(z), atol=1e-15)
    assert Weibull(1.0, 3.0).mean() == pytest.approx(3.0)


@pytest.mark.parametrize("d", [Exponential(0.7), Gamma(0.45, 2.0), Gamma(3.0, 0.2)],
                         ids=["exponential", "gamma-small-shape", "gamma-large-shape"])
def test_quadrature_transform_agrees_with_closed_form(d):
    z = np.concatenate([np.geomspace(1e-3, 1e2, 12), -1j * np.geomspace(1e-3, 1e2, 12)])
    quad = rotated_laplace(d.pdf, z, d.scale, 1.0)
    assert_allclose(quad, d.laplace(z), atol=1e-10)


@settings(max_examples=60, deadline=None)
@given(t=st.floats(-1e3, 1e3, allow_nan=False), idx=st.integers(0, len(FAMILIES) - 1))
def test_characteristic_function_modulus_bounded(t, idx):
    assert abs(duration_laplace(FAMILIES[idx], -1j * t)) <= 1.0 + 1e-12


def test_negative_real_part_rejected():
    with pytest.raises(ValueError):
        duration_laplace(Exponential(1.0), -0.5)


@pytest.mark.parametrize("d", FAMILIES, ids=lambda d: d.family)
def test_moments_match_transform_derivatives(d):
    """Mean and second moment from the small-s expansion of 1 - L(s).

    ``(1 - L(s))/s = m1 - m2 s / 2 + ...``: a low-degree polynomial fitted on
    a few tiny ``s`` gives both moments without differencing ``L`` itself.
    """
    mean, second = duration_moments(d)
    s = (1e-5 / mean) * np.arange(1, 7)
    _, comp = d.laplace_pair(s.astype(complex))
    c = np.polyfit(s, comp.real / s, 3)
    assert abs(c[-1] - mean) / mean < 1e-6
    assert abs(-2 * c[-2] - second) / second < 1e-4


def test_closed_form_moments():
    lam = 1.7
    assert duration_moments(Exponential(1 / (2 * lam)))[0] == pytest.approx(1 / (2 * lam))
    assert duration_moments(Deterministic(2.5)) == (2.5, 6.25)
    assert Weibull(0.5, 2.0).mean() == pytest.approx(2.0 * math.gamma(3.0))
    assert Gamma(3.0, 0.5).mean() == pytest.approx(1.5)


def test_memoryless_symmetric_h1_h2():
    lam = 0.8
    k = KernelSide.memoryless(lam, lam)
    for i in (1, -1):
        for j in (1, -1):
            assert k.h(i, j) == pytest.approx(1 / (2 * lam))
    assert k.h1 == pytest.approx(1 / lam)
    assert k.h2 == pytest.approx(1 / lam)


@pytest.mark.parametrize("d", FAMILIES, ids=lambda d: d.family)
def test_cdf_is_monotone_and_reaches_one(d):
    t = np.concatenate([[0.0], np.geomspace(1e-6, 1e6, 400)])
    F = np.asarray(d.cdf(t), dtype=float)
    assert np.all(np.diff(F) >= -1e-15)
    assert F[0] < 1.0
    assert F[-1] == pytest.approx(1.0, abs=1e-12)


def test_empirical_cdf_is_right_continuous():
    d = EmpiricalStep((1.0, 2.0), (0.5, 0.5))
    assert d.cdf(1.0) == 0.5
    assert d.cdf(np.nextafter(1.0, 0)) == 0.0
    assert d.cdf(2.0) == 1.0


@pytest.mark.parametrize("bad", [lambda: Deterministic(0.0), lambda: Exponential(-1.0),
                                 lambda: Weibull(0.0, 1.0), lambda: Gamma(1.0, math.inf),
                                 lambda: EmpiricalStep((0.0,), (1.0,))])
def test_invalid_durations_rejected(bad):
    with pytest.raises(ValueError):
        bad()


def test_kernel_transform_at_zero_and_rows():
    k = KernelSide.from_matrix(0.3, 0.55, Gamma(0.7, 2.0))
    for i in (1, -1):
        for j in (1, -1):
            assert kernel_laplace(k, 0.0, i, j) == pytest.approx(k.P[(i, j)])
        assert kernel_laplace_row(k, 0.0, i) == pytest.approx(1.0)


def test_memoryless_kernel_transform():
    lam, rem = 0.6, 1.1
    k = KernelSide.memoryless(lam, rem)
    total = lam + rem
    for s in (0.01, 0.5, 4.0):
        for i in (1, -1):
            assert kernel_laplace(k, s, i, 1) == pytest.approx(lam / (total + s), rel=1e-14)


@settings(max_examples=40, deadline=None)
@given(t=st.floats(-500, 500, allow_nan=False))
def test_row_transform_modulus_bounded(t):
    k = KernelSide.from_matrix(0.4, 0.6, {(1, 1): Weibull(0.6, 1.0), (1, -1): Gamma(0.5, 2.0),
                                          (-1, 1): Exponential(1.0), (-1, -1): Deterministic(0.3)})
    for i in (1, -1):
        assert abs(kernel_laplace_row(k, -1j * t, i)) <= 1.0 + 1e-12


def test_validate_memoryless_kernel_is_clean():
    assert validate_side(KernelSide.memoryless(1.0, 1.3)) == []


def test_validate_flags_transience():
    errs = validate_side(KernelSide.from_matrix(0.7, 0.6, Exponential(1.0)))
    assert any("transience" in e and e.startswith("error") for e in errs)


def test_validate_flags_non_stochastic_row():
    P = {(1, 1): 0.4, (1, -1): 0.5, (-1, 1): 0.5, (-1, -1): 0.5}
    k = KernelSide(P, {key: Exponential(1.0) for key in P})
    assert any("row not stochastic" in e for e in validate_side(k))


def test_validate_flags_degenerate_probabilities():
    errs = validate_side(KernelSide.from_matrix(0.0, 0.5, Exponential(1.0)))
    assert any("strictly in (0, 1)" in e for e in errs)


def test_validate_flags_zero_durations():
    k = KernelSide.from_matrix(0.4, 0.6, EmpiricalStep((0.0, 1.0), (0.5, 0.5)))
    assert validate_side(k) == []  # an atom below one at zero is allowed


def test_kernel_json_round_trip():
    k = KernelSide.from_matrix(0.35, 0.6, {(1, 1): Gamma(0.5, 2.0), (1, -1): Exponential(1.0),
                                           (-1, 1): Weibull(2.0, 0.5),
                                           (-1, -1): EmpiricalStep((0.5, 2.0), (0.25, 0.75))},
                               v0=0.3)
    assert KernelSide.from_dict(k.to_dict()) == k


def test_kernel_dict_rejects_unknown_fields():
    d = KernelSide.memoryless(1.0, 1.0).to_dict()
    d["rate"] = 3
    with pytest.raises(ValueError):
        KernelSide.from_dict(d)
    with pytest.raises(ValueError):
        duration_from_dict({"family": "weibull", "shape": 1, "scale": 1, "loc": 0})
    with pytest.raises(ValueError):
        duration_from_dict({"family": "lognormal", "scale": 1})


def test_reinit_invariants():
    f = ReinitDistribution(((1, 2), (3, 3)), (0.25, 0.75))
    assert f(3, 3) == 0.75 and f(2, 2) == 0.0
    assert ReinitDistribution.from_list(f.to_list()) == f
    assert f.swapped()(2, 1) == 0.25
    for pairs, masses in [(((0, 2),), (1.0,)), (((1, 1),), (0.9,)),
                          (((1, 1), (2, 2)), (1.2, -0.2)), (((1, 1), (1, 1)), (0.5, 0.5)),
                          (((60, 1),), (1.0,))]:
        with pytest.raises(ValueError):
            ReinitDistribution(pairs, masses)


def test_reinit_from_matrix():
    mat = np.zeros((3, 3))
    mat[0, 2] = 0.4
    mat[2, 1] = 0.6
    f = ReinitDistribution.from_matrix(mat)
    assert f(1, 3) == pytest.approx(0.4) and f(3, 2) == pytest.approx(0.6)


def test_clog1p_small_arguments():
    """Complex log1p keeps relative accuracy where log(1 + z) does not: log1p(z)/z -> 1 - z/2."""
    from semilob.kernel import clog1p

    z = np.array([1e-12 + 0j, 1e-12 + 1e-13j, -3e-15j])
    assert_allclose(clog1p(z) / z, 1 - z / 2, rtol=1e-14)
    w = np.array([0.5 - 2j, -0.9 + 0.1j, 3 + 4j])
    assert_allclose(clog1p(w), np.log(1 + w), rtol=1e-14)


def test_boundary_probabilities_only_warn_when_allowed():
    k = KernelSide.from_matrix(0.0, 1.0, Deterministic(1.0), v0=0.0)
    assert any(e.startswith("error") for e in validate_side(k))
    relaxed = validate_side(k, allow_boundary=True)
    assert relaxed and not any(e.startswith("error") for e in relaxed)


def test_adaptive_cells_respect_the_interval_cap():
    """An unattainable tolerance stops at the cap, unconverged, with the plain GK estimate.

    Reference: int_0^1 cos(40 x) dx = sin(40) / 40.
    """
    from semilob.quadrature import adaptive_gk, adaptive_gk_cells

    f = lambda x: np.cos(40.0 * x)
    vals, errs, ok = adaptive_gk_cells(f, np.array([0.0, 1.0]), atol=1e-300, max_intervals=64)
    assert not ok
    assert_allclose(vals.real, [math.sin(40.0) / 40.0], atol=1e-12)
    res = adaptive_gk(f, np.array([0.0, 1.0]), atol=1e-300, rtol=0.0, max_intervals=64)
    assert not res.converged and res.intervals <= 64
    assert_allclose(res.value, math.sin(40.0) / 40.0, atol=1e-12)
