#!/usr/bin/env python3
"""
Lyapunov Diagnostics
U for the optimizer errors, W for the tracking/estimation errors, their
combination, the orthogonal-frame components of the mapped errors and the
decrease residuals (exact along the closed loop, and discrete between
recorded samples).

    U = delta/2 (||e_varpi~||^2 + e_v~^T P e_v~) + 1/2 ||e_varpi~ + e_v~||^2
    W = ||e_s1~||^2 + e_s2~^T M(q) e_s2~ + ||theta~||^2

with P = Rbar Ltilde^{-1} Rbar^T, Rbar = [r1 r2] ⊗ I_n and
Ltilde = diag{I_n, r2^T L r2 ⊗ I_n}.
"""

import math
import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from dptco.controller import Phase
from dptco.design import DerivedConstants
from dptco.gain import eval_mu, eval_mu_dot
from dptco.graph import orthogonal_frame
from dptco.plant import mass_matrix, mass_matrix_dot

logger = logging.getLogger(__name__)


@dataclass
class LyapunovWeights:
    """Scenario-fixed data the Lyapunov functions need."""
    delta: float
    P: np.ndarray
    frame: np.ndarray
    theta: np.ndarray

    @classmethod
    def from_scenario(cls, scenario) -> "LyapunovWeights":
        N = scenario.N
        r1, r2 = orthogonal_frame(N)
        reduced = r2.T @ scenario.L @ r2
        P = r1 @ r1.T
        if r2.shape[1]:
            P = P + r2 @ np.linalg.solve(reduced, r2.T)
        cc = scenario.convexity
        delta = (4.0 * cc.varrho_c ** 2 + 1.0) / cc.rho_c
        if N > 1:
            delta = max(delta, 4.0 / scenario.spectrum.lambda2)
        return cls(delta=delta, P=P, frame=np.hstack([r1, r2]),
                   theta=np.asarray(scenario.theta, dtype=float))


@dataclass
class LyapunovDiagnostics:
    U: float
    W: float
    V_combined: float
    xi: np.ndarray
    psi: np.ndarray
    phi: np.ndarray


def _u_value(weights: LyapunovWeights, a: np.ndarray, b: np.ndarray) -> float:
    """U of (N, n) blocks a = e_varpi~, b = e_v~."""
    quad = float(np.sum(b * (weights.P @ b)))
    return 0.5 * weights.delta * (float(np.sum(a * a)) + quad) + 0.5 * float(np.sum((a + b) ** 2))


def _w_value(M: np.ndarray, s1: np.ndarray, s2: np.ndarray, theta_tilde: np.ndarray) -> float:
    return (float(np.sum(s1 * s1)) + float(np.einsum("ni,nij,nj->", s2, M, s2))
            + float(np.sum(theta_tilde * theta_tilde)))


def combine(U: float, W: float, derived: Optional[DerivedConstants]) -> float:
    """l2 U + sqrt(l1 l2) W; NaN without valid derived constants."""
    if derived is None or not math.isfinite(derived.l1) or derived.l1 < 0:
        return math.nan
    return derived.l2 * U + math.sqrt(derived.l1 * derived.l2) * W


def lyapunov_trace(state, mapped, weights: LyapunovWeights,
                   derived: Optional[DerivedConstants] = None) -> LyapunovDiagnostics:
    """U, W, V and frame components at one Active sample."""
    N, n = state.varpi.shape
    half = N * n
    a = mapped.e_r_tilde[:half].reshape(N, n)
    b = mapped.e_r_tilde[half:].reshape(N, n)
    s1 = mapped.e_s_tilde[:half].reshape(N, n)
    s2 = mapped.e_s_tilde[half:].reshape(N, n)

    U = _u_value(weights, a, b)
    W = _w_value(mass_matrix(weights.theta, state.q), s1, s2, mapped.theta_tilde)
    R = weights.frame
    return LyapunovDiagnostics(U=U, W=W, V_combined=combine(U, W, derived),
                               xi=R.T @ a, psi=R.T @ b, phi=R.T @ s1)


@dataclass
class LyapunovRates:
    U: float
    W: float
    U_dot: float
    W_dot: float
    residual_U: float
    residual_W: float
    scale_U: float
    scale_W: float


def lyapunov_rates(state, scenario, derived: DerivedConstants,
                   weights: Optional[LyapunovWeights] = None) -> LyapunovRates:
    """Exact dU/dt, dW/dt along closed_loop_rhs and the two decrease residuals.

    residual_U = dU/dt + c* mu U - c_Delta mu W
    residual_W = dW/dt + k_tilde mu W - sigma_max mu ||theta||^2 - (c_s / delta_) mu U

    Both are <= 0 when the gains meet the design criteria.
    """
    from dptco.sim import closed_loop_rhs, compute_errors

    if state.phase != Phase.ACTIVE:
        raise ValueError("Lyapunov rates are defined in the Active phase only")
    weights = weights or LyapunovWeights.from_scenario(scenario)
    gains = scenario.gains
    iota = gains.iota
    mu = eval_mu(scenario.gain, state.t)
    mu_dot = eval_mu_dot(scenario.gain, state.t)
    mu_tilde = mu_dot / mu
    k1 = gains.k1[:, None]

    errors = compute_errors(state, scenario.z_star(), scenario.gradient_at_optimum(),
                            scenario.objective.omega)
    d = closed_loop_rhs(state, scenario)

    # U = mu^(2 iota) U(e_r)
    base_u = _u_value(weights, errors.e_varpi, errors.e_v)
    U = mu ** (2.0 * iota) * base_u
    e_sum = errors.e_varpi + errors.e_v
    inner = (weights.delta * (float(np.sum(errors.e_varpi * d.varpi_dot))
                              + float(np.sum(errors.e_v * (weights.P @ d.v_dot))))
             + float(np.sum(e_sum * (d.varpi_dot + d.v_dot))))
    U_dot = 2.0 * iota * mu_tilde * U + mu ** (2.0 * iota) * inner

    theta = weights.theta
    M = mass_matrix(theta, state.q)
    M_dot = mass_matrix_dot(theta, state.q, state.qdot)
    e_y_dot = state.qdot - d.varpi_dot
    s = state.qdot + k1 * mu * errors.e_y
    s_dot = d.qddot + k1 * mu_dot * errors.e_y + k1 * mu * e_y_dot
    s1 = mu ** iota * errors.e_y
    s2 = mu ** (iota - 1.0) * s
    theta_tilde = theta - state.theta_hat
    W = _w_value(M, s1, s2, theta_tilde)

    s1_dot = iota * mu_tilde * s1 + mu ** iota * e_y_dot
    s2_dot = (iota - 1.0) * mu_tilde * s2 + mu ** (iota - 1.0) * s_dot
    W_dot = (2.0 * float(np.sum(s1 * s1_dot))
             + 2.0 * float(np.einsum("ni,nij,nj->", s2, M, s2_dot))
             + float(np.einsum("ni,nij,nj->", s2, M_dot, s2))
             - 2.0 * float(np.sum(theta_tilde * d.theta_hat_dot)))

    theta_sq = float(np.sum(theta * theta))
    c_star = derived.c_star
    decay_u, coupling_u = c_star * mu * U, derived.c_Delta * mu * W
    decay_w = derived.k_tilde * mu * W
    leak_w = derived.sigma_max * mu * theta_sq
    coupling_w = derived.c_s / derived.delta_underbar * mu * U
    return LyapunovRates(
        U=U, W=W, U_dot=U_dot, W_dot=W_dot,
        residual_U=U_dot + decay_u - coupling_u,
        residual_W=W_dot + decay_w - leak_w - coupling_w,
        scale_U=abs(U_dot) + decay_u + coupling_u,
        scale_W=abs(W_dot) + abs(decay_w) + leak_w + coupling_w,
    )


def discrete_residuals(times, mu, U, W, derived: DerivedConstants, theta_sq: float):
    """Forward-difference decrease residuals between consecutive recorded samples.

    Returns:
        (residual_U, residual_W) arrays of length len(times) - 1
    """
    times, mu = np.asarray(times, dtype=float), np.asarray(mu, dtype=float)
    U, W = np.asarray(U, dtype=float), np.asarray(W, dtype=float)
    dt = np.diff(times)
    if np.any(dt <= 0):
        raise ValueError("Sample times must be strictly increasing")
    mu0, U0, W0 = mu[:-1], U[:-1], W[:-1]
    res_u = np.diff(U) / dt + derived.c_star * mu0 * U0 - derived.c_Delta * mu0 * W0
    res_w = (np.diff(W) / dt + derived.k_tilde * mu0 * W0
             - derived.sigma_max * mu0 * theta_sq
             - derived.c_s / derived.delta_underbar * mu0 * U0)
    return res_u, res_w
