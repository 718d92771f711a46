#!/usr/bin/env python3
"""
Two-Link Manipulator Dynamics
Planar revolute-joint Euler-Lagrange model M(q) qdd + C(q, qd) qd = tau
(no gravity: the arms move in the horizontal plane).

All functions broadcast over leading agent axes: q, qdot of shape (..., 2)
and theta of shape (..., 3) give matrices of shape (..., 2, 2) / (..., 2, 3).
"""

import math
import logging
from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)

# (p1, p2, p3) ranges the adaptive design assumes
PARAMETER_BOX: Tuple[Tuple[float, float], ...] = ((1.0, 2.0), (0.05, 0.2), (0.2, 0.5))

MAX_MASS_CONDITION = 1e12
MIN_BOUND_SAMPLES = 1000


class SingularMassError(RuntimeError):
    """Mass matrix numerically singular."""


@dataclass(frozen=True)
class ManipulatorParams:
    """Inertia parameters theta = [p1, p2, p3] (kg m^2)."""
    p1: float = 1.301
    p2: float = 0.056
    p3: float = 0.296

    @classmethod
    def from_sequence(cls, values: Sequence[float]) -> "ManipulatorParams":
        p1, p2, p3 = (float(v) for v in values)
        return cls(p1, p2, p3)

    def as_array(self) -> np.ndarray:
        return np.array([self.p1, self.p2, self.p3])

    def in_box(self, box=PARAMETER_BOX) -> bool:
        return all(lo <= p <= hi for p, (lo, hi) in zip(self.as_array(), box))


@dataclass(frozen=True)
class PlantBounds:
    """k_m_lower I <= M(q) <= k_m_upper I and ||Omega|| <= rho (||w|| + ||w||^2)."""
    k_m_lower: float = 0.0789
    k_m_upper: float = 2.63
    rho: float = 4.24


@dataclass
class JointState:
    q: np.ndarray
    qdot: np.ndarray


def _theta(theta) -> np.ndarray:
    if isinstance(theta, ManipulatorParams):
        return theta.as_array()
    return np.asarray(theta, dtype=float)


def mass_matrix(theta, q) -> np.ndarray:
    th = _theta(theta)
    q = np.asarray(q, dtype=float)
    p1, p2, p3 = th[..., 0], th[..., 1], th[..., 2]
    c2 = np.cos(q[..., 1])
    m11 = p1 + 2.0 * p2 * c2
    m12 = p3 + p2 * c2
    M = np.empty(np.broadcast(m11, m12).shape + (2, 2))
    M[..., 0, 0] = m11
    M[..., 0, 1] = m12
    M[..., 1, 0] = m12
    M[..., 1, 1] = p3
    return M


def coriolis_matrix(theta, q, qdot) -> np.ndarray:
    th = _theta(theta)
    q = np.asarray(q, dtype=float)
    qdot = np.asarray(qdot, dtype=float)
    h = th[..., 1] * np.sin(q[..., 1])
    qd1, qd2 = qdot[..., 0], qdot[..., 1]
    c11 = -h * qd2
    c12 = -h * (qd1 + qd2)
    c21 = h * qd1
    C = np.empty(np.broadcast(c11, c12, c21).shape + (2, 2))
    C[..., 0, 0] = c11
    C[..., 0, 1] = c12
    C[..., 1, 0] = c21
    C[..., 1, 1] = 0.0
    return C


def coriolis_vector(theta, q, qdot) -> np.ndarray:
    """C(q, qdot) qdot without forming C."""
    th = _theta(theta)
    q = np.asarray(q, dtype=float)
    qdot = np.asarray(qdot, dtype=float)
    h = th[..., 1] * np.sin(q[..., 1])
    qd1, qd2 = qdot[..., 0], qdot[..., 1]
    out = np.empty(np.broadcast(h, qd1).shape + (2,))
    out[..., 0] = -h * qd2 * (2.0 * qd1 + qd2)
    out[..., 1] = h * qd1 * qd1
    return out


def mass_matrix_dot(theta, q, qdot) -> np.ndarray:
    """Time derivative of M(q) along qdot."""
    th = _theta(theta)
    q = np.asarray(q, dtype=float)
    qdot = np.asarray(qdot, dtype=float)
    rate = -th[..., 1] * np.sin(q[..., 1]) * qdot[..., 1]
    M_dot = np.empty(np.shape(rate) + (2, 2))
    M_dot[..., 0, 0] = 2.0 * rate
    M_dot[..., 0, 1] = rate
    M_dot[..., 1, 0] = rate
    M_dot[..., 1, 1] = 0.0
    return M_dot


def regression(q, qdot, x, y) -> np.ndarray:
    """Omega with M(q) x + C(q, qdot) y = Omega theta for every theta."""
    q = np.asarray(q, dtype=float)
    qdot = np.asarray(qdot, dtype=float)
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    c2, s2 = np.cos(q[..., 1]), np.sin(q[..., 1])
    qd1, qd2 = qdot[..., 0], qdot[..., 1]
    x1, x2 = x[..., 0], x[..., 1]
    y1, y2 = y[..., 0], y[..., 1]

    w12 = c2 * (2.0 * x1 + x2) - s2 * (qd2 * y1 + qd1 * y2 + qd2 * y2)
    w22 = c2 * x1 + s2 * qd1 * y1
    Omega = np.empty(np.broadcast(x1, w12, w22).shape + (2, 3))
    Omega[..., 0, 0] = x1
    Omega[..., 0, 1] = w12
    Omega[..., 0, 2] = x2
    Omega[..., 1, 0] = 0.0
    Omega[..., 1, 1] = w22
    Omega[..., 1, 2] = x1 + x2
    return Omega


def mass_eigenvalues(M) -> Tuple[np.ndarray, np.ndarray]:
    """Closed-form (lambda_min, lambda_max) of symmetric 2x2 matrices."""
    M = np.asarray(M, dtype=float)
    half_trace = 0.5 * (M[..., 0, 0] + M[..., 1, 1])
    det = M[..., 0, 0] * M[..., 1, 1] - M[..., 0, 1] * M[..., 1, 0]
    gap = np.sqrt(np.maximum(half_trace ** 2 - det, 0.0))
    return half_trace - gap, half_trace + gap


def solve_mass(M, rhs) -> np.ndarray:
    """M^{-1} rhs for stacks of 2x2 mass matrices, with a conditioning guard."""
    M = np.asarray(M, dtype=float)
    rhs = np.asarray(rhs, dtype=float)
    lo, hi = mass_eigenvalues(M)
    if np.any(lo <= 0) or np.any(hi > MAX_MASS_CONDITION * lo):
        raise SingularMassError(
            f"Mass matrix conditioning exceeds {MAX_MASS_CONDITION:.0e} "
            f"(lambda_min={np.min(lo):.3e}, lambda_max={np.max(hi):.3e})"
        )
    det = M[..., 0, 0] * M[..., 1, 1] - M[..., 0, 1] * M[..., 1, 0]
    a0 = (M[..., 1, 1] * rhs[..., 0] - M[..., 0, 1] * rhs[..., 1]) / det
    a1 = (M[..., 0, 0] * rhs[..., 1] - M[..., 1, 0] * rhs[..., 0]) / det
    return np.stack([a0, a1], axis=-1)


def forward_dynamics(theta, s: JointState, tau) -> np.ndarray:
    """qdd = M(q)^{-1} (tau - C(q, qdot) qdot)."""
    M = mass_matrix(theta, s.q)
    rhs = np.asarray(tau, dtype=float) - coriolis_vector(theta, s.q, s.qdot)
    return solve_mass(M, rhs)


def check_skew_symmetry(theta, q, qdot, z) -> float:
    """z^T (Mdot - 2C) z; zero for every input when Mdot - 2C is skew."""
    z = np.asarray(z, dtype=float)
    N = mass_matrix_dot(theta, q, qdot) - 2.0 * coriolis_matrix(theta, q, qdot)
    return float(np.einsum("...i,...ij,...j->...", z, N, z).sum())


def estimate_bounds(box=PARAMETER_BOX, samples: int = 4096,
                    q2_range: Tuple[float, float] = (0.0, 2.0 * math.pi),
                    rho_samples: int = 10000, seed: int = 0) -> PlantBounds:
    """Eigenvalue bounds of M over a (theta, q2) grid and a sampled rho.

    The grid uses ceil(samples ** (1/4)) points per axis including the box
    corners, where the extreme eigenvalues of this model sit. The returned
    rho is the largest observed ||Omega|| / (||w|| + ||w||^2), i.e. a lower
    estimate of the true constant.
    """
    if samples < MIN_BOUND_SAMPLES or rho_samples < MIN_BOUND_SAMPLES:
        raise ValueError(f"Bound estimation needs at least {MIN_BOUND_SAMPLES} samples, "
                         f"got samples={samples}, rho_samples={rho_samples}")
    per_axis = max(2, int(math.ceil(samples ** 0.25)))
    axes = [np.linspace(lo, hi, per_axis) for lo, hi in box]
    axes.append(np.linspace(q2_range[0], q2_range[1], per_axis))
    P1, P2, P3, Q2 = np.meshgrid(*axes, indexing="ij")
    theta = np.stack([P1.ravel(), P2.ravel(), P3.ravel()], axis=-1)
    q = np.stack([np.zeros(Q2.size), Q2.ravel()], axis=-1)
    lo, hi = mass_eigenvalues(mass_matrix(theta, q))

    rng = np.random.default_rng(seed)
    w = rng.normal(size=(rho_samples, 6))
    w *= (rng.uniform(0.0, 10.0, size=(rho_samples, 1))
          / np.linalg.norm(w, axis=1, keepdims=True))
    qs = rng.uniform(0.0, 2.0 * math.pi, size=(rho_samples, 2))
    omega = regression(qs, w[:, 0:2], w[:, 2:4], w[:, 4:6])
    wn = np.linalg.norm(w, axis=1)
    ratio = np.linalg.norm(omega, ord=2, axis=(-2, -1)) / (wn + wn ** 2)

    bounds = PlantBounds(k_m_lower=float(lo.min()), k_m_upper=float(hi.max()),
                         rho=float(ratio.max()))
    logger.debug(f"Sampled plant bounds over {theta.shape[0]} grid points: {bounds}")
    return bounds
