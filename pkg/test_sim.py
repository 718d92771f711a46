#!/usr/bin/env python3
"""
Tests for the closed-loop right-hand side, the RK4 stepper, error mapping and full runs.
"""

import math

import numpy as np
import pytest

from dptco.config import build_scenario
from dptco.controller import ControlGains, Phase
from dptco.gain import GainFunction, eval_mu
from dptco.graph import Topology, relative_output
from dptco.objective import QuadraticObjective
from dptco.sim import (NetworkState, NumericalAbort, Scenario, SimSettings,
                       StepAcrossSingularityError, closed_loop_rhs, compute_errors,
                       compute_mapped, conservation_residual, phase_at, rk4, rk4_step, run,
                       substeps_for)

THETA = [1.301, 0.056, 0.296]


def single_agent_scenario(**settings):
    objective = QuadraticObjective(s1=[1.0], s2=[1.0], d_star=[0.0, 0.0], anchors=[[1.0, 2.0]],
                                   omega=[[0.0, 0.0]])
    gains = ControlGains(c=1.3, iota=2.44, k1=[5.0], k2=30.0, sigma=4.0)
    initial = NetworkState(t=0.0, q=np.array([[1.0, 2.0]]), qdot=np.zeros((1, 2)),
                           varpi=np.array([[0.5, -0.5]]), v=np.zeros((1, 2)),
                           theta_hat=np.array([[2.0, 2.0, 2.0]]))
    return Scenario(gain=GainFunction(scale=5.0), topology=Topology.ring(1), objective=objective,
                    theta=np.array([THETA]), gains=gains, initial=initial,
                    settings=SimSettings(**settings))


def test_rk4_exponential_decay():
    h = 1e-2
    x = rk4(lambda t, x: -x, 0.0, np.array([1.0]), h)
    assert abs(x[0] - math.exp(-h)) <= 1e-10


def test_equilibrium_is_stationary(scenario):
    state = scenario.equilibrium_state()
    state.t = 0.7
    d = closed_loop_rhs(state, scenario)
    for block in (d.qdot, d.qddot, d.varpi_dot, d.v_dot, d.tau):
        np.testing.assert_allclose(block, 0.0, atol=1e-12)
    mu = eval_mu(scenario.gain, 0.7)
    np.testing.assert_allclose(d.theta_hat_dot, -4.0 * mu * state.theta_hat, rtol=1e-12)


def test_frozen_at_rest_is_stationary(scenario):
    state = scenario.initial.copy()
    state.phase = Phase.FROZEN
    d = closed_loop_rhs(state, scenario)
    np.testing.assert_array_equal(d.pack(), 0.0)
    np.testing.assert_array_equal(d.tau, 0.0)


def test_frozen_motion_is_torque_free(scenario):
    state = scenario.initial.copy()
    state.phase = Phase.FROZEN
    state.qdot = np.full_like(state.qdot, 0.3)
    d = closed_loop_rhs(state, scenario)
    np.testing.assert_array_equal(d.tau, 0.0)
    np.testing.assert_array_equal(d.varpi_dot, 0.0)
    np.testing.assert_array_equal(d.v_dot, 0.0)
    np.testing.assert_array_equal(d.theta_hat_dot, 0.0)
    np.testing.assert_array_equal(d.qdot, state.qdot)


def test_consensus_state_driven_by_relative_output(scenario):
    state = scenario.initial.copy()
    state.t = 0.3
    d = closed_loop_rhs(state, scenario)
    mu = eval_mu(scenario.gain, 0.3)
    chi = relative_output(scenario.topology, state.q - scenario.objective.omega)
    np.testing.assert_allclose(d.v_dot, scenario.gains.c * mu * chi, rtol=1e-12, atol=1e-15)


def test_frozen_step_matches_full_rhs(scenario):
    state = scenario.initial.copy()
    state.t, state.phase = 2.5, Phase.FROZEN
    state.qdot = np.linspace(-0.4, 0.4, state.qdot.size).reshape(state.qdot.shape)
    out = rk4_step(state, 1e-4, scenario, substeps=1)

    def f(t, x):
        return closed_loop_rhs(state.unpack(x, t, Phase.FROZEN), scenario).pack()

    expected = rk4(f, state.t, state.pack(), 1e-4)
    np.testing.assert_allclose(out.pack(), expected, rtol=1e-12, atol=1e-15)


def test_single_agent_has_no_consensus_terms():
    scen = single_agent_scenario()
    d = closed_loop_rhs(scen.initial, scen)
    mu = eval_mu(scen.gain, 0.0)
    grad = 2.0 * (np.array([1.0, 2.0]) - 0.0) + 2.0 * (np.array([1.0, 2.0]) - [1.0, 2.0])
    np.testing.assert_allclose(d.varpi_dot[0], -1.3 * mu * grad)
    np.testing.assert_array_equal(d.v_dot, 0.0)


def test_phase_switch_time(scenario):
    assert scenario.t_switch == pytest.approx(2.0 - 1e-4, abs=1e-12)
    assert phase_at(scenario, 1.0) == Phase.ACTIVE
    assert phase_at(scenario, scenario.t_switch) == Phase.ACTIVE
    assert phase_at(scenario, 2.0) == Phase.FROZEN


def test_step_across_deadline_rejected(scenario):
    state = scenario.initial.copy()
    state.t = 2.0 - 0.5e-4
    with pytest.raises(StepAcrossSingularityError):
        rk4_step(state, 1e-4, scenario)
    with pytest.raises(ValueError):
        rk4_step(scenario.initial, 0.0, scenario)


def test_frozen_step_past_deadline_allowed(scenario):
    state = scenario.initial.copy()
    state.t, state.phase = 2.5, Phase.FROZEN
    out = rk4_step(state, 1e-4, scenario)
    assert out.t == pytest.approx(2.5001)
    np.testing.assert_array_equal(out.q, state.q)


def test_first_step_is_finite(scenario):
    out = rk4_step(scenario.initial, scenario.settings.h, scenario)
    assert out.is_finite()
    assert out.t == pytest.approx(1e-4)
    assert conservation_residual(out) <= 1e-12


def test_substep_budget_exhaustion(scenario):
    tight = scenario.with_settings(stability_factor=1e-9, max_substeps=4)
    with pytest.raises(NumericalAbort, match="substeps"):
        substeps_for(tight.initial, tight, tight.settings.h)
    assert substeps_for(scenario.initial, scenario.with_settings(adaptive_substeps=False), 1.0) == 1


def test_abort_on_large_state(scenario):
    with pytest.raises(NumericalAbort, match="exceeds"):
        run(scenario.with_settings(abort_norm=1.0, t_end=0.01))


def test_errors_vanish_at_equilibrium(scenario):
    state = scenario.equilibrium_state()
    errors = compute_errors(state, scenario.z_star(), scenario.gradient_at_optimum(),
                            scenario.objective.omega)
    np.testing.assert_allclose(errors.e_r, 0.0, atol=1e-15)
    np.testing.assert_allclose(errors.e_s, 0.0, atol=1e-15)


def test_error_offsets(scenario):
    state = scenario.equilibrium_state()
    state.q = state.varpi + 1.0
    errors = compute_errors(state, scenario.z_star(), scenario.gradient_at_optimum())
    np.testing.assert_allclose(errors.e_y, 1.0)


def test_mapped_errors(scenario):
    rng = np.random.default_rng(5)
    state = scenario.initial.copy()
    state.qdot = rng.normal(size=state.qdot.shape)
    state.varpi = rng.normal(size=state.varpi.shape)
    errors = compute_errors(state, scenario.z_star(), scenario.gradient_at_optimum(),
                            scenario.objective.omega)

    unit = compute_mapped(state, errors, 1.0, scenario.gains)
    np.testing.assert_allclose(unit.e_r_tilde, errors.e_r)
    np.testing.assert_array_equal(unit.theta_tilde, 0.0)

    mu = 7.5
    mapped = compute_mapped(state, errors, mu, scenario.gains, scenario.theta, b=5.0)
    N = scenario.N
    top = mapped.e_s_tilde[:2 * N].reshape(N, 2)
    bottom = mapped.e_s_tilde[2 * N:].reshape(N, 2)
    np.testing.assert_allclose(top, mu ** 2.44 * errors.e_y)
    np.testing.assert_allclose(bottom, mu ** 2.44 * 5.0 * errors.e_y + mu ** 1.44 * errors.qdot)
    np.testing.assert_allclose(mapped.theta_tilde, scenario.theta - state.theta_hat)
    assert mapped.bound_residual_r <= 1e-9 * np.linalg.norm(mapped.e_r_tilde)
    assert mapped.bound_residual_s <= 0.0
    assert mapped.e_s_prime_tilde.shape == (4 * N + 3 * N,)


def test_mapped_errors_without_tracking_error(scenario):
    state = scenario.equilibrium_state()
    state.qdot = np.ones_like(state.qdot)
    errors = compute_errors(state, scenario.z_star(), scenario.gradient_at_optimum(),
                            scenario.objective.omega)
    mapped = compute_mapped(state, errors, 4.0, scenario.gains)
    N = scenario.N
    np.testing.assert_allclose(mapped.e_s_tilde[:2 * N], 0.0, atol=1e-12)
    np.testing.assert_allclose(mapped.e_s_tilde[2 * N:], 4.0 ** 1.44)


def test_conservation_residual():
    state = NetworkState(t=0.0, q=np.zeros((2, 2)), qdot=np.zeros((2, 2)),
                         varpi=np.zeros((2, 2)), v=np.array([[1.0, 0.0], [0.0, 1.0]]),
                         theta_hat=np.zeros((2, 3)))
    assert conservation_residual(state) == pytest.approx(math.sqrt(2.0))
    state.v = np.array([[1.0, -2.0], [-1.0, 2.0]])
    assert conservation_residual(state) == 0.0


def test_pack_unpack_preserves_blocks(scenario):
    state = scenario.initial
    back = state.unpack(state.pack(), state.t, state.phase)
    for name in ("q", "qdot", "varpi", "v", "theta_hat"):
        np.testing.assert_array_equal(getattr(back, name), getattr(state, name))


def test_equilibrium_run_stays_put(scenario):
    scen = scenario.with_settings(h=1e-3, t_end=0.5, record_every=0.1)
    scen.initial = scen.equilibrium_state()
    trace = run(scen)
    final = trace.final_state
    np.testing.assert_allclose(final.q, scen.initial.q, atol=1e-9)
    np.testing.assert_allclose(final.varpi, scen.initial.varpi, atol=1e-9)
    np.testing.assert_allclose(final.v, scen.initial.v, atol=1e-9)
    assert trace.metrics_frame()["grad_norm"].max() <= 1e-9


def test_short_run_records_grid(scenario):
    scen = scenario.with_settings(t_end=0.05, record_every=0.01, dense_tail=0)
    trace = run(scen)
    times = trace.times()
    np.testing.assert_allclose(times, np.linspace(0.0, 0.05, 6), atol=1e-12)
    assert len(trace.rows) == 6 * scen.N
    assert trace.metrics_frame()["grad_norm"].iloc[0] == pytest.approx(2.0 * math.sqrt(5.0))
    assert trace.final_state.phase == Phase.ACTIVE
    assert trace.extrema["conservation"] <= 1e-12


def test_constant_gain_contrast_runs(config):
    config.gain.form = "constant"
    config.sim.t_end = 0.05
    scen = build_scenario(config)
    assert math.isinf(scen.t_switch)
    trace = run(scen)
    assert set(trace.trace_frame()["phase"]) == {"Active"}
    assert trace.final_state.is_finite()


@pytest.mark.slow
def test_rk4_convergence_order(scenario):
    """Fourth-order self-convergence on the slow states over [0, 1e-3]."""
    scen = scenario.with_settings(adaptive_substeps=False)
    horizon = 1e-3

    def integrate(h):
        state = scen.initial.copy()
        for _ in range(int(round(horizon / h))):
            state = rk4_step(state, h, scen, substeps=1)
        return np.concatenate([state.q.ravel(), state.varpi.ravel(), state.v.ravel()])

    x1, x2, x3 = (integrate(h) for h in (1e-6, 5e-7, 2.5e-7))
    order = math.log2(np.linalg.norm(x1 - x2) / np.linalg.norm(x2 - x3))
    assert order >= 3.8


@pytest.mark.slow
class TestHeatSourceRun:
    def test_gradient_converges_before_deadline(self, heat_source_run):
        scen, trace = heat_source_run
        metrics = trace.metrics_frame().set_index("t")
        assert metrics["grad_norm"].iloc[0] == pytest.approx(2.0 * math.sqrt(5.0))
        near_deadline = metrics.loc[(metrics.index > 1.9985) & (metrics.index < 1.9995)]
        assert not near_deadline.empty
        assert near_deadline["grad_norm"].max() < 1e-2
        last_active = metrics.loc[scen.t_switch - 1e-9:scen.t_switch + 1e-9, "grad_norm"]
        assert last_active.iloc[0] < 1e-2
        assert metrics.loc[metrics.index > scen.t_switch + 1e-9, "grad_norm"].max() < 1e-2

    def test_positions_reach_formation(self, heat_source_run):
        scen, trace = heat_source_run
        target = trace.z_star + scen.objective.omega
        np.testing.assert_allclose(trace.z_star, [-1.0 / 12.0, -1.0 / 6.0], atol=1e-12)
        assert np.max(np.abs(trace.final_state.q - target)) <= 1e-2

    def test_conservation_and_bounds(self, heat_source_run):
        _, trace = heat_source_run
        assert trace.extrema["conservation"] <= 1e-8
        assert math.isfinite(trace.extrema["er_tilde"])
        assert math.isfinite(trace.extrema["es_tilde"])

    def test_frozen_phase_holds(self, heat_source_run):
        scen, trace = heat_source_run
        df = trace.trace_frame()
        frozen = df[df["phase"] == "Frozen"]
        assert not frozen.empty
        assert frozen["t"].min() > scen.t_switch
        assert (frozen[["tau1", "tau2"]] == 0.0).all().all()
        assert np.max(np.hypot(frozen["qd1"], frozen["qd2"])) <= 1e-3
        held = frozen.groupby("agent")[["varpi1", "varpi2", "v1", "v2", "th1", "th2", "th3"]]
        assert (held.nunique() == 1).all().all()
        metrics = trace.metrics_frame()
        assert metrics.loc[metrics["t"] > scen.t_switch, "U"].isna().all()

    def test_switch_torque_small(self, heat_source_run):
        scen, trace = heat_source_run
        df = trace.trace_frame()
        last = df[np.isclose(df["t"], scen.t_switch)]
        assert np.max(np.hypot(last["tau1"], last["tau2"])) <= 0.1

    def test_runtime_budget(self, heat_source_run):
        _, trace = heat_source_run
        assert trace.elapsed <= 60.0, f"run took {trace.elapsed:.1f}s"

    def test_lyapunov_residuals_recorded(self, heat_source_run):
        scen, trace = heat_source_run
        metrics = trace.metrics_frame()
        active = metrics[metrics["t"] <= scen.t_switch + 1e-9]
        assert np.all(np.isfinite(active[["U", "W", "res_U_rel", "res_W_rel"]].to_numpy()))
        assert np.all(np.isfinite(active[["dres_U", "dres_W"]].iloc[1:].to_numpy()))
        frozen = metrics[metrics["t"] > scen.t_switch + 1e-9]
        assert frozen[["V", "res_U_rel", "dres_W"]].isna().all().all()
