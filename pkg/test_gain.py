#!/usr/bin/env python3
"""
Tests for prescribed-time gain functions, kappa integrals and the class K_T check.
"""

import math

import numpy as np
import pytest

from dptco.gain import (GainDomainError, GainFunction, eval_mu, eval_mu_dot, eval_mu_tilde,
                        kappa, kappa_series, mu_series, verify_class_KT)


def test_power_gain_values():
    unit = GainFunction(form="power", T=2.0, t0=0.0, m=1.0, scale=1.0)
    assert eval_mu(unit, 0.0) == pytest.approx(1.0)
    assert eval_mu(unit, 1.0) == pytest.approx(2.0)
    scaled = GainFunction(form="power", T=2.0, m=1.0, scale=5.0)
    assert eval_mu(scaled, 0.0) == pytest.approx(5.0)
    # 10 / (2 - t)
    assert eval_mu(scaled, 1.5) == pytest.approx(20.0)


def test_power_gain_derivative():
    assert eval_mu_dot(GainFunction(T=2.0, scale=1.0), 0.0) == pytest.approx(0.5)
    assert eval_mu_dot(GainFunction(T=2.0, scale=5.0), 0.0) == pytest.approx(2.5)
    assert eval_mu_dot(GainFunction(T=1.0, m=2.0, scale=1.0), 0.0) == pytest.approx(2.0)


def test_mu_tilde():
    assert eval_mu_tilde(GainFunction(T=2.0, scale=1.0), 0.0) == pytest.approx(0.5)
    g = GainFunction(T=2.0, scale=5.0)
    assert eval_mu_tilde(g, 1.0) == pytest.approx(1.0)
    for form in ("power", "exp"):
        g = GainFunction(form=form, T=1.5, t0=0.3, scale=2.0)
        t = 0.3 + 1e-9
        assert eval_mu_tilde(g, t) == pytest.approx(eval_mu_dot(g, t) / eval_mu(g, t))


def test_derivative_matches_finite_difference():
    for form in ("power", "exp"):
        g = GainFunction(form=form, T=2.0, m=2.0, scale=3.0)
        t, d = 0.7, 1e-6
        numeric = (eval_mu(g, t + d) - eval_mu(g, t - d)) / (2 * d)
        assert eval_mu_dot(g, t) == pytest.approx(numeric, rel=1e-6)


def test_closed_form_constants():
    power = GainFunction(form="power", T=2.0, m=1.0, scale=5.0)
    assert (power.b, power.b_prime, power.b_tilde) == pytest.approx((5.0, 2.5, 0.1))
    exp = GainFunction(form="exp", T=1.0)
    assert exp.b == pytest.approx(math.e)
    assert exp.b_tilde == pytest.approx(4.0 / math.exp(2.0))
    short = GainFunction(form="exp", T=0.25)
    assert short.b_tilde == pytest.approx(16.0 * math.exp(-4.0))


def test_domain_is_half_open():
    g = GainFunction(T=2.0, t0=1.0)
    with pytest.raises(GainDomainError):
        eval_mu(g, 3.0)
    with pytest.raises(GainDomainError):
        eval_mu(g, 0.5)
    assert math.isfinite(eval_mu(g, 3.0 - 1e-9))


def test_cap_freezes_growth():
    g = GainFunction(T=2.0, scale=1.0, mu_cap=100.0)
    assert eval_mu(g, 2.0 - 1e-6) == 100.0
    assert eval_mu_dot(g, 2.0 - 1e-6) == 0.0
    assert g.is_capped(2.0 - 1e-6)
    assert not g.is_capped(0.0)


def test_constant_form_has_no_deadline():
    g = GainFunction(form="constant", scale=5.0)
    assert math.isinf(g.deadline)
    assert eval_mu(g, 1e6) == 5.0
    assert eval_mu_dot(g, 3.0) == 0.0
    assert g.b_tilde == 0.0


def test_invalid_parameters_rejected():
    with pytest.raises(ValueError):
        GainFunction(form="cubic")
    with pytest.raises(ValueError):
        GainFunction(T=0.0)
    with pytest.raises(ValueError):
        GainFunction(m=0.5)


def test_mu_series_matches_pointwise():
    g = GainFunction(T=2.0, scale=5.0)
    times = np.linspace(0.0, 1.9, 7)
    np.testing.assert_allclose(mu_series(g, times), [eval_mu(g, t) for t in times])


def test_kappa_zero_exponent_is_one():
    g = GainFunction(T=2.0, scale=1.0)
    assert kappa(g, 0.0, lambda m: m, 1.3) == 1.0


def test_kappa_closed_form():
    g = GainFunction(T=2.0, scale=1.0)
    # exp(-int_0^1 2/(2-s) ds) = exp(-2 ln 2)
    assert kappa(g, -1.0, lambda m: m, 1.0) == pytest.approx(0.25, abs=1e-6)


def test_kappa_decays_towards_deadline():
    g = GainFunction(T=2.0, scale=1.0)
    late = [kappa(g, -1.0, lambda m: m, t, step=1e-3) for t in (1.9, 1.99, 1.999)]
    assert late[0] > late[1] > late[2]
    assert late[2] < 1e-5


def test_kappa_series_requires_t0_start():
    g = GainFunction(T=2.0, t0=0.5)
    with pytest.raises(GainDomainError):
        kappa_series(g, 1.0, lambda m: m, np.array([0.6, 0.7]))


@pytest.mark.parametrize("m", [1.0, 2.0, 3.0])
def test_class_kt_power_forms(m):
    report = verify_class_KT(GainFunction(form="power", T=2.0, m=m, scale=1.0))
    assert report.passed
    assert not report.b_below_one


def test_class_kt_exp_form():
    report = verify_class_KT(GainFunction(form="exp", T=1.0))
    assert report.passed
    assert report.b_tilde == pytest.approx(4.0 / math.exp(2.0))


def test_class_kt_rejects_decreasing_function():
    g = GainFunction(T=2.0, scale=1.0)
    report = verify_class_KT(g, mu_fn=lambda t: 1.0 / (1.0 + t), mu_dot_fn=lambda t: 0.0)
    assert not report.passed
    assert report.max_monotonicity_violation > 0


def test_class_kt_flags_small_b():
    report = verify_class_KT(GainFunction(T=2.0, scale=0.5))
    assert report.b_below_one
    assert report.notes
