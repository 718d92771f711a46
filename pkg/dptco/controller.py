#!/usr/bin/env python3
"""
DPTCO Control Laws
Auxiliary optimizer dynamics (varpi, v), intermediate signals z1/z2,
the adaptive tracking torque and the adaptive estimate dynamics, with the
hard switch to the Frozen phase at t = T + t0.

Every law works on a single agent (vectors of shape (n,) / (p,)) or on the
whole network at once ((N, n) / (N, p) arrays with per-agent gain arrays).
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Tuple

import numpy as np

from dptco.plant import regression

logger = logging.getLogger(__name__)


class Phase(str, Enum):
    ACTIVE = "Active"
    FROZEN = "Frozen"


class ControllerContractError(RuntimeError):
    """A law was called in a phase where it does not exist."""


@dataclass
class ControlGains:
    """The design vector (c, iota, k1, k2, sigma); per-agent entries are (N,) arrays."""
    c: float
    iota: float
    k1: np.ndarray
    k2: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        self.k1 = np.atleast_1d(np.asarray(self.k1, dtype=float))
        N = self.k1.shape[0]
        self.k2 = np.broadcast_to(np.asarray(self.k2, dtype=float), (N,)).copy()
        self.sigma = np.broadcast_to(np.asarray(self.sigma, dtype=float), (N,)).copy()
        values = np.concatenate([[self.c, self.iota], self.k1, self.k2, self.sigma])
        if not np.all(np.isfinite(values)):
            raise ValueError("Control gains must be finite")
        if self.c < 0 or np.any(self.k1 < 0) or np.any(self.k2 < 0) or np.any(self.sigma < 0):
            raise ValueError("Control gains c, k1, k2, sigma must be nonnegative")

    @property
    def N(self) -> int:
        return self.k1.shape[0]

    def compliance_warnings(self, b_tilde: float) -> List[str]:
        """Policy checks that do not block a simulation."""
        warnings = []
        if not self.iota > 2:
            warnings.append(f"DC1 violated: iota = {self.iota} must exceed 2")
        low = np.flatnonzero(self.sigma < b_tilde)
        if low.size:
            warnings.append(
                f"sigma below b_tilde = {b_tilde:.6g} for agents {low.tolist()}"
            )
        return warnings


@dataclass
class AgentControllerState:
    varpi: np.ndarray
    v: np.ndarray
    theta_hat: np.ndarray = field(default_factory=lambda: np.zeros(3))


def _per_agent(value, like: np.ndarray) -> np.ndarray:
    """Gain scalar or (N,) array shaped to broadcast against (..., n) vectors."""
    value = np.asarray(value, dtype=float)
    if value.ndim == 0:
        return value
    return value.reshape(value.shape + (1,) * (like.ndim - value.ndim))


def auxiliary_rhs(c: float, v, grad, chi, mu: float,
                  phase: Phase = Phase.ACTIVE) -> Tuple[np.ndarray, np.ndarray]:
    """(dvarpi, dv) = (-c mu (grad + chi + v), c mu chi); zero when Frozen.

    `grad` must be the measured gradient at the agent's current transformed
    output and `chi` the Laplacian term (L ybar)_i.
    """
    v = np.asarray(v, dtype=float)
    if phase == Phase.FROZEN:
        return np.zeros_like(v), np.zeros_like(v)
    grad = np.asarray(grad, dtype=float)
    chi = np.asarray(chi, dtype=float)
    return -c * mu * (grad + chi + v), c * mu * chi


def z_intermediates(k1, iota: float, mu: float, mu_tilde: float,
                    qdot, e_y) -> Tuple[np.ndarray, np.ndarray]:
    """z1 = ((iota-1) mu~ + k1 mu) qdot + iota k1 mu mu~ e_y,  z2 = k1 mu e_y."""
    qdot = np.asarray(qdot, dtype=float)
    e_y = np.asarray(e_y, dtype=float)
    k1 = _per_agent(k1, qdot)
    z1 = ((iota - 1.0) * mu_tilde + k1 * mu) * qdot + iota * k1 * mu * mu_tilde * e_y
    z2 = k1 * mu * e_y
    return z1, z2


def _tracking_terms(q, qdot, reference, mu, mu_tilde, k1, iota):
    q = np.asarray(q, dtype=float)
    qdot = np.asarray(qdot, dtype=float)
    e_y = q - np.asarray(reference, dtype=float)
    z1, z2 = z_intermediates(k1, iota, mu, mu_tilde, qdot, e_y)
    omega = regression(q, qdot, z1, z2)
    s = qdot + _per_agent(k1, qdot) * mu * e_y
    return omega, s


def _torque(omega, s, theta_hat, mu, k2) -> np.ndarray:
    feedforward = np.einsum("...ij,...j->...i", omega, theta_hat)
    return -_per_agent(k2, s) * mu * s - feedforward


def _adaptation(omega, s, theta_hat, mu, iota, sigma) -> np.ndarray:
    varsigma = 2.0 * mu ** (2.0 * iota - 2.0) * np.einsum("...ji,...j->...i", omega, s)
    return varsigma - _per_agent(sigma, theta_hat) * mu * theta_hat


def tracking_torque(q, qdot, reference, theta_hat, mu: float, mu_tilde: float,
                    k1, k2, iota: float, phase: Phase = Phase.ACTIVE) -> np.ndarray:
    """tau = -k2 mu (qdot + k1 mu e_y) - Omega(q, qdot, z1, z2) theta_hat; zero when Frozen.

    `reference` is the (formation-shifted) tracking reference varpi'.
    """
    qdot = np.asarray(qdot, dtype=float)
    if phase == Phase.FROZEN:
        return np.zeros_like(qdot)
    omega, s = _tracking_terms(q, qdot, reference, mu, mu_tilde, k1, iota)
    return _torque(omega, s, np.asarray(theta_hat, dtype=float), mu, k2)


def regression_torque(q, qdot, reference, theta_hat, mu: float, mu_tilde: float,
                      k1, iota: float) -> np.ndarray:
    """Adaptive feedforward Omega(q, qdot, z1, z2) theta_hat."""
    omega, _ = _tracking_terms(q, qdot, reference, mu, mu_tilde, k1, iota)
    return np.einsum("...ij,...j->...i", omega, np.asarray(theta_hat, dtype=float))


def adaptive_rhs(q, qdot, reference, theta_hat, mu: float, mu_tilde: float,
                 k1, iota: float, sigma, phase: Phase = Phase.ACTIVE) -> np.ndarray:
    """dtheta_hat = 2 mu^(2 iota - 2) Omega^T (qdot + k1 mu e_y) - sigma mu theta_hat."""
    if phase == Phase.FROZEN:
        raise ControllerContractError("The adaptive estimate is not integrated in the Frozen phase")
    theta_hat = np.asarray(theta_hat, dtype=float)
    omega, s = _tracking_terms(q, qdot, reference, mu, mu_tilde, k1, iota)
    return _adaptation(omega, s, theta_hat, mu, iota, sigma)


def tracking_law(q, qdot, reference, theta_hat, mu: float, mu_tilde: float,
                 gains: ControlGains) -> Tuple[np.ndarray, np.ndarray]:
    """(tau, dtheta_hat) of the Active phase from one regression evaluation."""
    theta_hat = np.asarray(theta_hat, dtype=float)
    omega, s = _tracking_terms(q, qdot, reference, mu, mu_tilde, gains.k1, gains.iota)
    return (_torque(omega, s, theta_hat, mu, gains.k2),
            _adaptation(omega, s, theta_hat, mu, gains.iota, gains.sigma))


def formation_shift(varpi, omega) -> np.ndarray:
    """varpi' = varpi + omega"""
    return np.asarray(varpi, dtype=float) + np.asarray(omega, dtype=float)


def formation_unshift(reference, omega) -> np.ndarray:
    return np.asarray(reference, dtype=float) - np.asarray(omega, dtype=float)
