#!/usr/bin/env python3
"""
Tests for derived constants, gain synthesis, design verification and the small-gain check.
"""

import math

import numpy as np
import pytest

from dptco.controller import ControlGains
from dptco.design import (DesignError, ISSGainDescriptor, NetworkConstants, ScalarFamily,
                          derive_constants, iss_descriptors, lyapunov_delta, network_constants,
                          smallgain_check, synthesize, verify_design)
from dptco.gain import GainFunction
from dptco.graph import Topology
from dptco.plant import PlantBounds


def ring_constants(**changes):
    values = dict(lambda2=1.0, lambdaN=4.0, rho_c=4.0, varrho_c=4.0, k_m_lower_min=0.0789,
                  k_m_upper_max=2.63, k_m_upper=(2.63,) * 6, b_tilde=0.1)
    values.update(changes)
    return NetworkConstants(**values)


def heat_source_gains(**changes):
    values = dict(c=1.3, iota=2.44, k1=[5.0] * 6, k2=30.0, sigma=4.0)
    values.update(changes)
    return ControlGains(**values)


def random_constants(rng):
    N = int(rng.integers(2, 9))
    lambda2 = rng.uniform(0.1, 2.0)
    rho_c = rng.uniform(0.5, 4.0)
    k_m_upper = tuple(rng.uniform(1.0, 5.0, N))
    return NetworkConstants(lambda2=lambda2, lambdaN=lambda2 + rng.uniform(0.0, 5.0),
                            rho_c=rho_c, varrho_c=rho_c + rng.uniform(0.0, 4.0),
                            k_m_lower_min=rng.uniform(0.05, 1.0),
                            k_m_upper_max=max(k_m_upper), k_m_upper=k_m_upper,
                            b_tilde=rng.uniform(0.0, 1.0))


def test_delta_for_ring():
    assert lyapunov_delta(ring_constants()) == pytest.approx(16.25)


def test_delta_bounds_for_equal_eigenvalues():
    nc = ring_constants(lambda2=2.0, lambdaN=2.0)
    derived = derive_constants(nc, heat_source_gains(), 1.0, strict=False)
    assert derived.delta_bar == pytest.approx(derived.delta / 2 + 0.5)
    assert derived.delta_underbar == pytest.approx(derived.delta / 4)


def test_zero_coupling_constants():
    derived = derive_constants(ring_constants(), heat_source_gains(c=0.0), 1.0, strict=False)
    assert derived.c_Delta == 0.0
    assert derived.c_s == 0.0


def test_heat_source_gains_report():
    report = verify_design(ring_constants(), heat_source_gains(), 1.0)
    assert len(report.checks) == 4 + 6 + 2
    assert report.checks[0].passed
    assert set(report.as_dict()["checks"]) == {c.name for c in report.checks}


def test_strict_derivation_rejects_nonpositive_margin():
    with pytest.raises(DesignError, match="DC4 margin violated"):
        derive_constants(ring_constants(), heat_source_gains(), 1.0)
    relaxed = derive_constants(ring_constants(), heat_source_gains(), 1.0, strict=False)
    assert math.isinf(relaxed.l1)


def test_zero_k2_fails_dc4():
    report = verify_design(ring_constants(), heat_source_gains(k2=0.0), 1.0)
    assert any(name.startswith("DC4 k2") for name in report.failures())


def test_synthesized_ring_gains_pass():
    nc = ring_constants()
    gains = synthesize(nc, 1.0, 2.44)
    report = verify_design(nc, gains, 1.0)
    assert report.all_pass, report.failures()
    assert report.smallgain_product < 1.0


def test_synthesize_rejects_iota_two():
    with pytest.raises(DesignError):
        synthesize(ring_constants(), 1.0, 2.0)


def test_synthesis_on_random_constants():
    rng = np.random.default_rng(11)
    for _ in range(100):
        nc = random_constants(rng)
        c_star = rng.uniform(0.5, 2.0)
        gains = synthesize(nc, c_star, rng.uniform(2.05, 3.0))
        report = verify_design(nc, gains, c_star)
        assert report.all_pass, report.failures()
        assert report.smallgain_product < 1.0

        derived = derive_constants(nc, gains, c_star)
        result = smallgain_check(*iss_descriptors(derived, theta_norm=1.5))
        assert result.passed
        s = np.linspace(0.0, 10.0, 11)
        values = result.alpha_tilde(s)
        assert values[0] > 0
        assert np.all(np.diff(values) > 0)


def test_coupling_grows_with_curvature_spread():
    gains = heat_source_gains()
    low = derive_constants(ring_constants(varrho_c=4.0), gains, 1.0, strict=False)
    high = derive_constants(ring_constants(varrho_c=8.0), gains, 1.0, strict=False)
    assert high.c_Delta > low.c_Delta


def test_smallgain_examples():
    s = ScalarFamily(1.0, 1)
    half = ISSGainDescriptor(alpha=s, gamma=s, l=0.5)
    result = smallgain_check(half, half)
    assert result.passed
    assert result.product == pytest.approx(0.25)
    assert result.order_ratio == pytest.approx(2.0)

    failing = smallgain_check(ISSGainDescriptor(alpha=s, gamma=s, l=2.0),
                              ISSGainDescriptor(alpha=s, gamma=s, l=1.0))
    assert not failing.passed
    assert failing.alpha_tilde is None


def test_smallgain_order_mismatch_fails():
    d1 = ISSGainDescriptor(alpha=ScalarFamily(1.0, 1), gamma=ScalarFamily(1.0, 2), l=0.1)
    d2 = ISSGainDescriptor(alpha=ScalarFamily(1.0, 1), gamma=ScalarFamily(1.0, 1), l=0.1)
    assert not smallgain_check(d1, d2).passed


def test_disconnected_graph_rejected():
    with pytest.raises(DesignError, match="disconnected"):
        ring_constants(lambda2=0.0)

    from dptco.objective import QuadraticObjective
    obj = QuadraticObjective(s1=np.ones(4), s2=np.ones(4), d_star=np.zeros(2),
                             anchors=np.zeros((4, 2)), omega=np.zeros((4, 2)))
    A = np.zeros((4, 4))
    A[0, 1] = A[1, 0] = A[2, 3] = A[3, 2] = 1.0
    with pytest.raises(DesignError, match="disconnected"):
        network_constants(Topology(A), obj, [PlantBounds()] * 4, GainFunction(scale=5.0))
