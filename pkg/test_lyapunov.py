#!/usr/bin/env python3
"""
Tests for the Lyapunov values, their sandwich bounds and decrease rates.
"""

import math

import numpy as np
import pytest

from dptco.controller import Phase
from dptco.design import derive_constants, network_constants, synthesize
from dptco.graph import orthogonal_frame
from dptco.gain import eval_mu
from dptco.lyapunov import (LyapunovWeights, combine, discrete_residuals, lyapunov_rates,
                            lyapunov_trace)
from dptco.sim import MappedError, closed_loop_rhs, compute_errors, compute_mapped


@pytest.fixture
def constants(scenario):
    return network_constants(scenario.topology, scenario.objective, scenario.bounds,
                             scenario.gain)


@pytest.fixture
def weights(scenario):
    return LyapunovWeights.from_scenario(scenario)


def random_state(scenario, rng, t):
    state = scenario.initial.copy()
    N = scenario.N
    state.t, state.phase = t, Phase.ACTIVE
    state.q = rng.normal(size=(N, 2))
    state.qdot = rng.normal(size=(N, 2))
    state.varpi = rng.normal(size=(N, 2))
    v = rng.normal(size=(N, 2))
    state.v = v - v.mean(axis=0)
    state.theta_hat = scenario.theta + rng.normal(size=(N, 3))
    return state


def values(state, scenario, weights):
    errors = compute_errors(state, scenario.z_star(), scenario.gradient_at_optimum(),
                            scenario.objective.omega)
    mapped = compute_mapped(state, errors, eval_mu(scenario.gain, state.t), scenario.gains,
                            scenario.theta, scenario.gain.b)
    return lyapunov_trace(state, mapped, weights)


def test_weight_matrix(scenario, weights):
    assert weights.delta == pytest.approx(16.25)
    r1, r2 = orthogonal_frame(scenario.N)
    np.testing.assert_allclose(weights.P @ r1, r1, atol=1e-12)
    np.testing.assert_allclose(weights.P @ scenario.L @ r2, r2, atol=1e-12)
    np.testing.assert_allclose(weights.P, weights.P.T, atol=1e-12)


def test_zero_errors_give_zero(scenario, weights):
    N = scenario.N
    state = scenario.equilibrium_state(theta_hat=scenario.theta)
    mapped = MappedError(e_r_tilde=np.zeros(4 * N), e_s_tilde=np.zeros(4 * N),
                         theta_tilde=np.zeros((N, 3)), mu=5.0, bound_residual_r=0.0,
                         bound_residual_s=0.0)
    diagnostics = lyapunov_trace(state, mapped, weights)
    assert diagnostics.U == 0.0
    assert diagnostics.W == 0.0
    assert math.isnan(diagnostics.V_combined)


def test_equilibrium_values(scenario, weights):
    state = scenario.equilibrium_state(theta_hat=scenario.theta)
    state.t = 1.2
    d = values(state, scenario, weights)
    assert d.U == pytest.approx(0.0, abs=1e-12)
    assert d.W == pytest.approx(0.0, abs=1e-12)


def test_sandwich_bounds(scenario, weights, constants):
    derived = derive_constants(constants, scenario.gains, 1.0, strict=False)
    rng = np.random.default_rng(7)
    N = scenario.N
    within_bar = 0
    for _ in range(500):
        state = scenario.initial.copy()
        state.q = rng.uniform(-math.pi, math.pi, size=(N, 2))
        er = rng.normal(size=4 * N)
        es = rng.normal(size=4 * N)
        theta_tilde = rng.normal(size=(N, 3))
        mapped = MappedError(er, es, theta_tilde, 1.0, 0.0, 0.0)
        d = lyapunov_trace(state, mapped, weights)
        er_sq = float(er @ er)
        es_sq = float(es @ es) + float(np.sum(theta_tilde ** 2))
        assert derived.delta_underbar * er_sq <= d.U <= (derived.delta_bar + 0.5) * er_sq
        within_bar += d.U <= derived.delta_bar * er_sq
        assert derived.eps_underbar * es_sq <= d.W <= derived.eps_bar * es_sq
    assert within_bar >= 495


def test_frame_components(scenario, weights):
    rng = np.random.default_rng(8)
    N = scenario.N
    mapped = MappedError(rng.normal(size=4 * N), rng.normal(size=4 * N), np.zeros((N, 3)),
                         1.0, 0.0, 0.0)
    d = lyapunov_trace(scenario.initial, mapped, weights)
    np.testing.assert_allclose(np.linalg.norm(d.xi), np.linalg.norm(mapped.e_r_tilde[:2 * N]))
    np.testing.assert_allclose(np.linalg.norm(d.psi), np.linalg.norm(mapped.e_r_tilde[2 * N:]))


def test_combine():
    class Derived:
        l1, l2 = 4.0, 0.25

    assert combine(2.0, 3.0, Derived) == pytest.approx(0.25 * 2.0 + 1.0 * 3.0)
    assert math.isnan(combine(1.0, 1.0, None))


def test_rates_match_finite_differences(scenario, weights, constants):
    derived = derive_constants(constants, scenario.gains, 1.0, strict=False)
    rng = np.random.default_rng(9)
    dt = 1e-7
    for t in (0.2, 0.9, 1.5):
        state = random_state(scenario, rng, t)
        rates = lyapunov_rates(state, scenario, derived, weights)
        x = state.pack()
        f = closed_loop_rhs(state, scenario).pack()
        plus = values(state.unpack(x + dt * f, t + dt, Phase.ACTIVE), scenario, weights)
        minus = values(state.unpack(x - dt * f, t - dt, Phase.ACTIVE), scenario, weights)
        here = values(state, scenario, weights)
        assert rates.U == pytest.approx(here.U, rel=1e-12)
        assert rates.W == pytest.approx(here.W, rel=1e-12)
        assert (plus.U - minus.U) / (2 * dt) == pytest.approx(rates.U_dot, abs=1e-5 * rates.scale_U)
        assert (plus.W - minus.W) / (2 * dt) == pytest.approx(rates.W_dot, abs=1e-5 * rates.scale_W)


def test_rates_decrease_with_synthesized_gains(scenario, constants):
    gains = synthesize(constants, 1.0, 2.44)
    scen = scenario.with_gains(gains)
    derived = derive_constants(constants, gains, 1.0)
    weights = LyapunovWeights.from_scenario(scen)
    rng = np.random.default_rng(10)
    t_max = scen.gain.deadline - 100 * scen.settings.h
    ok_u = ok_w = 0
    for _ in range(200):
        state = random_state(scen, rng, rng.uniform(scen.gain.t0, t_max))
        rates = lyapunov_rates(state, scen, derived, weights)
        ok_u += rates.residual_U <= 1e-3 * rates.scale_U
        ok_w += rates.residual_W <= 1e-3 * rates.scale_W
    assert ok_u >= 198
    assert ok_w >= 198


def test_rates_undefined_when_frozen(scenario, constants):
    derived = derive_constants(constants, scenario.gains, 1.0, strict=False)
    state = scenario.initial.copy()
    state.phase = Phase.FROZEN
    with pytest.raises(ValueError):
        lyapunov_rates(state, scenario, derived)


def test_discrete_residuals(scenario, constants):
    derived = derive_constants(constants, scenario.gains, 1.0, strict=False)
    times = np.array([0.0, 0.1, 0.2])
    mu = np.array([5.0, 5.0, 5.0])
    res_u, res_w = discrete_residuals(times, mu, [2.0, 2.0, 2.0], [0.0, 0.0, 0.0], derived, 0.0)
    np.testing.assert_allclose(res_u, derived.c_star * 5.0 * 2.0)
    np.testing.assert_allclose(res_w, -derived.c_s / derived.delta_underbar * 5.0 * 2.0)
    with pytest.raises(ValueError):
        discrete_residuals([0.0, 0.0], [1.0, 1.0], [0.0, 0.0], [0.0, 0.0], derived, 0.0)
