#!/usr/bin/env python3
"""
Closed-Loop Network Simulation
Integrates N manipulators driven by the DPTCO controllers with classical RK4,
switches to the Frozen phase one step before the deadline T + t0, and records
the trace, error norms, mapped (prescribed-time) errors and Lyapunov values.

The integrator keeps a fixed recording grid t_k = t0 + k h. Inside a grid
step the RK4 update is applied n = 2**j times with step h / n whenever the
estimated stiffness of the closed loop exceeds stability_factor / h.
"""

import math
import time
import logging
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Tuple

import numpy as np
from tqdm import tqdm

from dptco.controller import (ControlGains, Phase, auxiliary_rhs, formation_shift,
                              tracking_law, tracking_torque, z_intermediates)
from dptco.design import DerivedConstants, DesignError, network_constants, verify_design
from dptco.gain import GainFunction, eval_mu, eval_mu_dot
from dptco.graph import Topology, laplacian, relative_output, spectrum
from dptco.objective import (QuadraticObjective, constants, global_gradient_norm,
                             measured_gradients, optimum_oracle)
from dptco.plant import (PlantBounds, coriolis_vector, mass_eigenvalues, mass_matrix,
                         regression, solve_mass)

logger = logging.getLogger(__name__)

_BLOCKS = ("q", "qdot", "varpi", "v", "theta_hat")


class NumericalAbort(RuntimeError):
    """NaN, instability or an exhausted substep budget."""


class StepAcrossSingularityError(ValueError):
    """An Active RK4 step would evaluate the gain at or past the deadline."""


@dataclass
class NetworkState:
    """Per-agent arrays: q, qdot, varpi, v of shape (N, n); theta_hat (N, p)."""
    t: float
    q: np.ndarray
    qdot: np.ndarray
    varpi: np.ndarray
    v: np.ndarray
    theta_hat: np.ndarray
    phase: Phase = Phase.ACTIVE

    @property
    def N(self) -> int:
        return self.q.shape[0]

    def copy(self) -> "NetworkState":
        return NetworkState(self.t, self.q.copy(), self.qdot.copy(), self.varpi.copy(),
                            self.v.copy(), self.theta_hat.copy(), self.phase)

    def pack(self) -> np.ndarray:
        return np.concatenate([getattr(self, name).ravel() for name in _BLOCKS])

    def unpack(self, x: np.ndarray, t: float, phase: Phase, copy: bool = True) -> "NetworkState":
        """New state with this state's shapes filled from a flat vector.

        With copy=False the blocks are views of x.
        """
        arrays, offset = {}, 0
        for name in _BLOCKS:
            shape = getattr(self, name).shape
            size = int(np.prod(shape))
            block = x[offset:offset + size].reshape(shape)
            arrays[name] = block.copy() if copy else block
            offset += size
        return NetworkState(t=t, phase=phase, **arrays)

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(getattr(self, name))) for name in _BLOCKS)

    def max_abs(self) -> Tuple[str, float]:
        worst = max(_BLOCKS, key=lambda name: float(np.max(np.abs(getattr(self, name)))))
        return worst, float(np.max(np.abs(getattr(self, worst))))


@dataclass
class StateDerivative:
    qdot: np.ndarray
    qddot: np.ndarray
    varpi_dot: np.ndarray
    v_dot: np.ndarray
    theta_hat_dot: np.ndarray
    tau: np.ndarray

    def pack(self) -> np.ndarray:
        return np.concatenate([self.qdot.ravel(), self.qddot.ravel(), self.varpi_dot.ravel(),
                               self.v_dot.ravel(), self.theta_hat_dot.ravel()])


@dataclass
class SimSettings:
    h: float = 1e-4
    t_end: float = 5.0
    record_every: float = 1e-2
    dense_tail: int = 100
    abort_norm: float = 1e12
    adaptive_substeps: bool = True
    max_substeps: int = 4096
    stability_factor: float = 2.0
    progress: bool = False


@dataclass
class Scenario:
    """Everything a run needs, already validated and converted to arrays."""
    gain: GainFunction
    topology: Topology
    objective: QuadraticObjective
    theta: np.ndarray
    gains: ControlGains
    initial: NetworkState
    settings: SimSettings = field(default_factory=SimSettings)
    bounds: Tuple[PlantBounds, ...] = ()
    c_star: float = 1.0

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=float)
        self.L = laplacian(self.topology)
        self.spectrum = spectrum(self.L)
        self.convexity = constants(self.objective)
        if not self.bounds:
            self.bounds = tuple(PlantBounds() for _ in range(self.N))
        self._check_shapes()

    def _check_shapes(self):
        N, n = self.N, self.objective.n
        if self.objective.N != N or self.gains.N != N:
            raise ValueError(
                f"Scenario arrays disagree on agent count: topology {N}, objective "
                f"{self.objective.N}, gains {self.gains.N}"
            )
        if self.theta.shape != (N, 3) or self.initial.theta_hat.shape != (N, 3):
            raise ValueError("theta and theta_hat must be (N, 3)")
        for name in ("q", "qdot", "varpi", "v"):
            if getattr(self.initial, name).shape != (N, n):
                raise ValueError(f"initial {name} must be ({N}, {n})")

    @property
    def N(self) -> int:
        return self.topology.N

    @property
    def t_switch(self) -> float:
        """Last Active grid time, T + t0 - h (inf without a deadline)."""
        if math.isinf(self.gain.deadline):
            return math.inf
        steps = int(math.floor(self.gain.T / self.settings.h + 1e-9)) - 1
        return self.gain.t0 + steps * self.settings.h

    def z_star(self) -> np.ndarray:
        return optimum_oracle(self.objective, self.topology)

    def gradient_at_optimum(self) -> np.ndarray:
        """grad F(1 ⊗ z*), test-side knowledge used by the error variables."""
        z = self.z_star()
        return measured_gradients(self.objective, np.tile(z, (self.N, 1)))

    def equilibrium_state(self, theta_hat: Optional[np.ndarray] = None) -> NetworkState:
        """y = 1 ⊗ z* + omega, qdot = 0, varpi = 1 ⊗ z*, v = -grad F(1 ⊗ z*)."""
        z = np.tile(self.z_star(), (self.N, 1))
        th = self.initial.theta_hat if theta_hat is None else np.asarray(theta_hat, dtype=float)
        return NetworkState(
            t=self.gain.t0,
            q=formation_shift(z, self.objective.omega),
            qdot=np.zeros_like(z),
            varpi=z.copy(),
            v=-self.gradient_at_optimum(),
            theta_hat=th.copy(),
        )

    def with_gains(self, gains: ControlGains) -> "Scenario":
        return replace(self, gains=gains)

    def with_settings(self, **changes) -> "Scenario":
        return replace(self, settings=replace(self.settings, **changes))


def phase_at(scenario: Scenario, t: float) -> Phase:
    return Phase.ACTIVE if t <= scenario.t_switch + 1e-9 * scenario.settings.h else Phase.FROZEN


def _gain_terms(scenario: Scenario, t: float) -> Tuple[float, float]:
    mu = eval_mu(scenario.gain, t)
    return mu, eval_mu_dot(scenario.gain, t) / mu


def _references(scenario: Scenario, state: NetworkState) -> np.ndarray:
    return formation_shift(state.varpi, scenario.objective.omega)


def closed_loop_rhs(state: NetworkState, scenario: Scenario) -> StateDerivative:
    """Derivative of the whole network at a state snapshot."""
    theta = scenario.theta
    M = mass_matrix(theta, state.q)
    coriolis = coriolis_vector(theta, state.q, state.qdot)

    if state.phase == Phase.FROZEN:
        zeros = np.zeros_like(state.v)
        return StateDerivative(
            qdot=state.qdot.copy(),
            qddot=solve_mass(M, -coriolis),
            varpi_dot=zeros,
            v_dot=zeros.copy(),
            theta_hat_dot=np.zeros_like(state.theta_hat),
            tau=np.zeros_like(state.qdot),
        )

    gains = scenario.gains
    mu, mu_tilde = _gain_terms(scenario, state.t)
    ybar = state.q - scenario.objective.omega
    grad = measured_gradients(scenario.objective, ybar)
    chi = relative_output(scenario.L, ybar)
    varpi_dot, v_dot = auxiliary_rhs(gains.c, state.v, grad, chi, mu)

    reference = _references(scenario, state)
    tau, theta_hat_dot = tracking_law(state.q, state.qdot, reference, state.theta_hat, mu,
                                      mu_tilde, gains)
    return StateDerivative(
        qdot=state.qdot.copy(),
        qddot=solve_mass(M, tau - coriolis),
        varpi_dot=varpi_dot,
        v_dot=v_dot,
        theta_hat_dot=theta_hat_dot,
        tau=tau,
    )


def stiffness_estimate(state: NetworkState, scenario: Scenario) -> float:
    """Upper estimate of the closed-loop Jacobian spectral radius (1/s)."""
    if state.phase == Phase.FROZEN:
        M = mass_matrix(scenario.theta, state.q)
        lo, _ = mass_eigenvalues(M)
        p2 = np.abs(scenario.theta[:, 1])
        return float(np.max(4.0 * p2 * np.linalg.norm(state.qdot, axis=1) / lo))

    gains = scenario.gains
    mu, mu_tilde = _gain_terms(scenario, state.t)
    lo, _ = mass_eigenvalues(mass_matrix(scenario.theta, state.q))
    reference = _references(scenario, state)
    e_y = state.q - reference
    z1, z2 = z_intermediates(gains.k1, gains.iota, mu, mu_tilde, state.qdot, e_y)
    omega_norm = np.linalg.norm(regression(state.q, state.qdot, z1, z2), axis=(1, 2))
    theta_abs = np.abs(state.theta_hat)
    # ||M(|theta_hat|, q)|| is at most p1 + 2 p2 + 2 p3
    m_hat = theta_abs[:, 0] + 2.0 * theta_abs[:, 1] + 2.0 * theta_abs[:, 2]
    k1, k2 = gains.k1, gains.k2

    damping = (k2 * mu + m_hat * ((gains.iota - 1.0) * mu_tilde + k1 * mu)
               + 2.0 * theta_abs[:, 1] * (np.linalg.norm(z2, axis=1)
                                          + k1 * mu * np.linalg.norm(state.qdot, axis=1))) / lo
    position = np.sqrt(k1 * mu * (k2 * mu + m_hat * gains.iota * mu_tilde
                                  + theta_abs[:, 1] * np.linalg.norm(state.qdot, axis=1)) / lo)
    adaptive = mu ** (gains.iota - 1.0) * omega_norm * np.sqrt(2.0 / lo)
    leak = gains.sigma * mu
    auxiliary = gains.c * mu * (scenario.spectrum.lambdaN + scenario.convexity.varrho_c + 1.0)
    plant = 4.0 * np.abs(scenario.theta[:, 1]) * np.linalg.norm(state.qdot, axis=1) / lo
    return float(max(np.max(damping), np.max(position), np.max(adaptive), np.max(leak),
                     auxiliary, np.max(plant)))


def substeps_for(state: NetworkState, scenario: Scenario, h: float) -> int:
    settings = scenario.settings
    if not settings.adaptive_substeps:
        return 1
    needed = h * stiffness_estimate(state, scenario) / settings.stability_factor
    if not math.isfinite(needed):
        raise NumericalAbort(f"Non-finite stiffness estimate at t={state.t:.6f}")
    if needed <= 1.0:
        return 1
    n = 2 ** int(math.ceil(math.log2(needed)))
    if n > settings.max_substeps:
        raise NumericalAbort(
            f"Stiffness needs {n} substeps at t={state.t:.6f}, budget is {settings.max_substeps}"
        )
    return n


def rk4(f, t: float, x: np.ndarray, h: float) -> np.ndarray:
    """One classical fourth-order Runge-Kutta step of x' = f(t, x)."""
    k1 = f(t, x)
    k2 = f(t + 0.5 * h, x + 0.5 * h * k1)
    k3 = f(t + 0.5 * h, x + 0.5 * h * k2)
    k4 = f(t + h, x + h * k3)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _rk4(state: NetworkState, scenario: Scenario, h: float) -> NetworkState:
    phase = state.phase
    if phase == Phase.FROZEN:
        return _rk4_frozen(state, scenario, h)

    def f(t, x):
        return closed_loop_rhs(state.unpack(x, t, phase, copy=False), scenario).pack()

    x1 = rk4(f, state.t, state.pack(), h)
    return state.unpack(x1, state.t + h, phase, copy=False)


def _rk4_frozen(state: NetworkState, scenario: Scenario, h: float) -> NetworkState:
    # varpi, v, theta_hat have zero derivative; only (q, qdot) move
    theta = scenario.theta
    shape = state.q.shape
    size = state.q.size

    def f(t, x):
        q, qdot = x[:size].reshape(shape), x[size:].reshape(shape)
        qddot = solve_mass(mass_matrix(theta, q), -coriolis_vector(theta, q, qdot))
        return np.concatenate([x[size:], qddot.ravel()])

    x1 = rk4(f, state.t, np.concatenate([state.q.ravel(), state.qdot.ravel()]), h)
    return NetworkState(state.t + h, x1[:size].reshape(shape), x1[size:].reshape(shape),
                        state.varpi.copy(), state.v.copy(), state.theta_hat.copy(), state.phase)


def rk4_step(state: NetworkState, h: float, scenario: Scenario,
             substeps: Optional[int] = None) -> NetworkState:
    """Advance one recording step h with classical RK4.

    Active steps must end strictly before the deadline. The returned state
    keeps the phase it was integrated in; the caller performs the switch.
    """
    if not h > 0:
        raise ValueError(f"Step size must be positive, got {h}")
    if state.phase == Phase.ACTIVE:
        deadline = scenario.gain.deadline
        if state.t + h >= deadline - 1e-12 * max(1.0, abs(deadline)):
            raise StepAcrossSingularityError(
                f"Active step from t={state.t} with h={h} reaches the deadline {deadline}"
            )
    n = substeps if substeps is not None else substeps_for(state, scenario, h)
    t_target = state.t + h
    sub_h = h / n
    current = state
    for _ in range(n):
        current = _rk4(current, scenario, sub_h)
    current.t = t_target
    return current


@dataclass
class ErrorVector:
    e_varpi: np.ndarray
    e_v: np.ndarray
    e_y: np.ndarray
    qdot: np.ndarray

    @property
    def e_r(self) -> np.ndarray:
        return np.concatenate([self.e_varpi.ravel(), self.e_v.ravel()])

    @property
    def e_s(self) -> np.ndarray:
        return np.concatenate([self.e_y.ravel(), self.qdot.ravel()])


@dataclass
class MappedError:
    e_r_tilde: np.ndarray
    e_s_tilde: np.ndarray
    theta_tilde: np.ndarray
    mu: float
    bound_residual_r: float
    bound_residual_s: float

    @property
    def e_s_prime_tilde(self) -> np.ndarray:
        return np.concatenate([self.e_s_tilde, self.theta_tilde.ravel()])


def compute_errors(state: NetworkState, z_star, grad_F_star, omega=None) -> ErrorVector:
    """e_varpi = varpi - 1⊗z*, e_v = v + grad F(1⊗z*), e_y = ybar - varpi, qdot."""
    ybar = state.q if omega is None else state.q - np.asarray(omega, dtype=float)
    z = np.broadcast_to(np.asarray(z_star, dtype=float), state.varpi.shape)
    return ErrorVector(
        e_varpi=state.varpi - z,
        e_v=state.v + np.asarray(grad_F_star, dtype=float),
        e_y=ybar - state.varpi,
        qdot=state.qdot.copy(),
    )


def gamma_s_coefficient(gains: ControlGains, b: float) -> float:
    """gamma_s(s) = (1 + ||K1|| + 1/b) s"""
    return 1.0 + float(np.max(gains.k1)) + 1.0 / b


def compute_mapped(state: NetworkState, errors: ErrorVector, mu: float,
                   gains: ControlGains, theta=None, b: float = 1.0) -> MappedError:
    """e_r~ = mu^iota e_r and e_s~ = Lambda1(mu) e_s.

    The bound residuals are ||e_r|| mu^iota - ||e_r~|| and
    ||e_s|| - mu^(1-iota) gamma_s(||e_s~||); both are <= 0.
    """
    iota = gains.iota
    e_r = errors.e_r
    k1 = gains.k1[:, None]
    top = mu ** iota * errors.e_y
    bottom = mu ** iota * k1 * errors.e_y + mu ** (iota - 1.0) * errors.qdot
    e_s_tilde = np.concatenate([top.ravel(), bottom.ravel()])
    e_r_tilde = mu ** iota * e_r
    theta_tilde = (np.zeros_like(state.theta_hat) if theta is None
                   else np.asarray(theta, dtype=float) - state.theta_hat)
    residual_r = float(np.linalg.norm(e_r) * mu ** iota - np.linalg.norm(e_r_tilde))
    residual_s = float(np.linalg.norm(errors.e_s)
                       - mu ** (1.0 - iota) * gamma_s_coefficient(gains, b)
                       * np.linalg.norm(e_s_tilde))
    return MappedError(e_r_tilde, e_s_tilde, theta_tilde, mu, residual_r, residual_s)


def conservation_residual(state: NetworkState) -> float:
    """||sum_i v_i||"""
    return float(np.linalg.norm(state.v.sum(axis=0)))


TRACE_COLUMNS = ["t", "phase", "agent", "q1", "q2", "qd1", "qd2", "varpi1", "varpi2",
                 "v1", "v2", "th1", "th2", "th3", "tau1", "tau2"]
METRIC_COLUMNS = ["t", "grad_norm", "e_r_norm", "e_s_norm", "er_tilde_norm",
                  "es_tilde_norm", "U", "W", "V", "res_U_rel", "res_W_rel", "dres_U",
                  "dres_W", "conservation"]


@dataclass
class Trace:
    """Recorded samples of one run."""
    rows: List[list] = field(default_factory=list)
    metrics: List[list] = field(default_factory=list)
    final_state: Optional[NetworkState] = None
    last_active_state: Optional[NetworkState] = None
    z_star: Optional[np.ndarray] = None
    total_substeps: int = 0
    max_substeps_used: int = 1
    extrema: Dict[str, float] = field(default_factory=dict)
    design_compliant: bool = False
    elapsed: float = 0.0

    def times(self) -> np.ndarray:
        return np.array([m[0] for m in self.metrics])

    def trace_frame(self):
        import pandas as pd
        return pd.DataFrame(self.rows, columns=TRACE_COLUMNS)

    def metrics_frame(self):
        import pandas as pd
        return pd.DataFrame(self.metrics, columns=METRIC_COLUMNS)


def design_status(scenario: Scenario) -> Tuple[Optional[DerivedConstants], bool]:
    """Derived constants of the scenario's gains and whether every design criterion holds."""
    try:
        nc = network_constants(scenario.topology, scenario.objective, scenario.bounds,
                               scenario.gain)
    except DesignError as e:
        logger.warning(f"Design constants unavailable: {e}")
        return None, False
    report = verify_design(nc, scenario.gains, scenario.c_star)
    return report.derived, report.all_pass


def _relative(residual: float, scale: float) -> float:
    return residual / scale if scale > 0 else 0.0


class _Recorder:
    def __init__(self, scenario: Scenario, trace: Trace):
        from dptco.lyapunov import LyapunovWeights

        self.scenario = scenario
        self.trace = trace
        self.z_star = scenario.z_star()
        self.grad_star = scenario.gradient_at_optimum()
        self.weights = LyapunovWeights.from_scenario(scenario)
        self.derived, trace.design_compliant = design_status(scenario)
        self.theta_sq = float(np.sum(scenario.theta ** 2))
        # (t, mu, U, W) of the previous Active sample
        self.previous: Optional[Tuple[float, float, float, float]] = None
        trace.z_star = self.z_star
        trace.extrema = {"qdot": 0.0, "tau": 0.0, "theta_hat": 0.0,
                         "er_tilde": 0.0, "es_tilde": 0.0, "conservation": 0.0}

    def _residuals(self, state: NetworkState, mu: float, U: float, W: float):
        from dptco.lyapunov import discrete_residuals, lyapunov_rates

        if self.derived is None:
            return math.nan, math.nan, math.nan, math.nan
        rates = lyapunov_rates(state, self.scenario, self.derived, self.weights)
        res_u = _relative(rates.residual_U, rates.scale_U)
        res_w = _relative(rates.residual_W, rates.scale_W)
        dres_u = dres_w = math.nan
        if self.previous is not None:
            t_p, mu_p, U_p, W_p = self.previous
            du, dw = discrete_residuals([t_p, state.t], [mu_p, mu], [U_p, U], [W_p, W],
                                        self.derived, self.theta_sq)
            dres_u, dres_w = float(du[0]), float(dw[0])
        self.previous = (state.t, mu, U, W)
        return res_u, res_w, dres_u, dres_w

    def record(self, state: NetworkState):
        from dptco.lyapunov import lyapunov_trace

        scenario = self.scenario
        omega = scenario.objective.omega
        if state.phase == Phase.ACTIVE:
            mu, mu_tilde = _gain_terms(scenario, state.t)
            tau = tracking_torque(state.q, state.qdot, _references(scenario, state),
                                  state.theta_hat, mu, mu_tilde, scenario.gains.k1,
                                  scenario.gains.k2, scenario.gains.iota)
        else:
            tau = np.zeros_like(state.qdot)

        for i in range(state.N):
            self.trace.rows.append([
                state.t, state.phase.value, i,
                *state.q[i], *state.qdot[i], *state.varpi[i], *state.v[i],
                *state.theta_hat[i], *tau[i],
            ])

        errors = compute_errors(state, self.z_star, self.grad_star, omega)
        grad_norm = global_gradient_norm(scenario.objective, state.q - omega)
        conservation = conservation_residual(state)
        e_r_norm = float(np.linalg.norm(errors.e_r))
        e_s_norm = float(np.linalg.norm(errors.e_s))
        er_tilde = es_tilde = U = W = V = math.nan
        res_u = res_w = dres_u = dres_w = math.nan
        if state.phase == Phase.ACTIVE:
            mapped = compute_mapped(state, errors, mu, scenario.gains, scenario.theta,
                                    scenario.gain.b)
            er_tilde = float(np.linalg.norm(mapped.e_r_tilde))
            es_tilde = float(np.linalg.norm(mapped.e_s_tilde))
            diagnostics = lyapunov_trace(state, mapped, self.weights, self.derived)
            U, W, V = diagnostics.U, diagnostics.W, diagnostics.V_combined
            res_u, res_w, dres_u, dres_w = self._residuals(state, mu, U, W)

        ext = self.trace.extrema
        ext["qdot"] = max(ext["qdot"], float(np.max(np.linalg.norm(state.qdot, axis=1))))
        ext["tau"] = max(ext["tau"], float(np.max(np.linalg.norm(tau, axis=1))))
        ext["theta_hat"] = max(ext["theta_hat"],
                               float(np.max(np.linalg.norm(state.theta_hat, axis=1))))
        ext["conservation"] = max(ext["conservation"], conservation)
        if state.phase == Phase.ACTIVE:
            ext["er_tilde"] = max(ext["er_tilde"], er_tilde)
            ext["es_tilde"] = max(ext["es_tilde"], es_tilde)

        self.trace.metrics.append([state.t, grad_norm, e_r_norm, e_s_norm, er_tilde,
                                   es_tilde, U, W, V, res_u, res_w, dres_u, dres_w,
                                   conservation])


def _check_health(state: NetworkState, abort_norm: float):
    x = state.pack()
    if not np.all(np.isfinite(x)):
        raise NumericalAbort(f"NaN/inf in the network state at t={state.t:.6f}")
    if np.max(np.abs(x)) > abort_norm:
        block, value = state.max_abs()
        raise NumericalAbort(
            f"Instability: |{block}| = {value:.3e} exceeds {abort_norm:.0e} at t={state.t:.6f}"
        )


def run(scenario: Scenario) -> Trace:
    """Integrate the Active phase, switch at T + t0 - h, continue Frozen to t_end."""
    settings = scenario.settings
    h = settings.h
    t0 = scenario.gain.t0
    if conservation_residual(scenario.initial) > 1e-12:
        raise ValueError("Initial v must sum to zero across agents")
    if not scenario.topology.is_connected():
        raise ValueError("Topology must be connected")

    total_steps = int(round((settings.t_end - t0) / h))
    if math.isinf(scenario.t_switch):
        active_steps = total_steps
    else:
        active_steps = min(total_steps, int(round((scenario.t_switch - t0) / h)))
    record_stride = max(1, int(round(settings.record_every / h)))
    dense_from = active_steps - settings.dense_tail + 1

    started = time.perf_counter()
    trace = Trace()
    recorder = _Recorder(scenario, trace)
    state = scenario.initial.copy()
    state.t, state.phase = t0, Phase.ACTIVE
    _check_health(state, settings.abort_norm)
    recorder.record(state)

    logger.info("=" * 80)
    logger.info(f"Simulating {scenario.N} agents on [{t0}, {settings.t_end}] with h={h}")
    logger.info(f"Active phase ends at t={scenario.t_switch:.6f} ({active_steps} steps)")
    logger.info("=" * 80)

    iterator = tqdm(range(1, total_steps + 1), desc="Integrating", unit="step",
                    disable=not settings.progress)
    for k in iterator:
        if state.phase == Phase.ACTIVE and k - 1 == active_steps:
            trace.last_active_state = state.copy()
            state.phase = Phase.FROZEN
            logger.info(f"Phase switch at t={state.t:.6f}: varpi, v, theta_hat frozen, tau = 0")

        n = substeps_for(state, scenario, h)
        trace.total_substeps += n
        trace.max_substeps_used = max(trace.max_substeps_used, n)
        state = rk4_step(state, h, scenario, substeps=n)
        state.t = t0 + k * h
        _check_health(state, settings.abort_norm)

        if k % record_stride == 0 or k == total_steps or (dense_from <= k <= active_steps):
            recorder.record(state)

    if state.phase == Phase.ACTIVE:
        trace.last_active_state = state.copy()
    trace.final_state = state
    trace.elapsed = time.perf_counter() - started
    logger.info(f"Run complete in {trace.elapsed:.1f}s: {total_steps} steps, "
                f"{trace.total_substeps} RK4 substeps "
                f"(max {trace.max_substeps_used} per step)")
    return trace
