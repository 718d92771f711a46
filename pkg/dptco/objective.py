#!/usr/bin/env python3
"""
Local Objectives and Optimum Oracle
Quadratic formation objectives f_i(ybar) = s1 ||ybar + w - d*||^2 + s2 ||ybar + w - y0||^2,
their measured gradients, convexity constants and an independent optimum oracle.

Controllers only ever see `measured_gradients` evaluated at the agents'
current transformed outputs; the oracle is for tests and reporting.
"""

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from dptco.graph import Topology

logger = logging.getLogger(__name__)

ORACLE_TOL = 1e-10


class ObjectiveError(ValueError):
    """Invalid objective weights or shapes."""


class OracleError(RuntimeError):
    """Optimum oracle failed to meet its residual."""


@dataclass(frozen=True, eq=False)
class QuadraticObjective:
    """Per-agent quadratic objectives.

    Args:
        s1: (N,) weights on the target term
        s2: (N,) weights on the anchor term
        d_star: (n,) common target (heat source)
        anchors: (N, n) anchor points y0_i
        omega: (N, n) formation offsets
    """
    s1: np.ndarray
    s2: np.ndarray
    d_star: np.ndarray
    anchors: np.ndarray
    omega: np.ndarray

    def __post_init__(self):
        s1 = np.atleast_1d(np.asarray(self.s1, dtype=float))
        s2 = np.atleast_1d(np.asarray(self.s2, dtype=float))
        anchors = np.atleast_2d(np.asarray(self.anchors, dtype=float))
        omega = np.atleast_2d(np.asarray(self.omega, dtype=float))
        d_star = np.atleast_1d(np.asarray(self.d_star, dtype=float))
        N = s1.shape[0]
        if s2.shape != (N,) or anchors.shape[0] != N or omega.shape != anchors.shape:
            raise ObjectiveError(
                f"Objective arrays disagree on agent count: s1 {s1.shape}, s2 {s2.shape}, "
                f"anchors {anchors.shape}, omega {omega.shape}"
            )
        if d_star.shape != (anchors.shape[1],):
            raise ObjectiveError(f"d_star must have dimension {anchors.shape[1]}")
        if np.any(s1 < 0) or np.any(s2 < 0):
            raise ObjectiveError("Objective weights s1, s2 must be nonnegative")
        if np.any(s1 + s2 <= 0):
            bad = np.flatnonzero(s1 + s2 <= 0).tolist()
            raise ObjectiveError(f"s1 + s2 must be positive for every agent (violated at {bad})")
        for name, value in (("s1", s1), ("s2", s2), ("d_star", d_star),
                            ("anchors", anchors), ("omega", omega)):
            value.setflags(write=False)
            object.__setattr__(self, name, value)

    @property
    def N(self) -> int:
        return self.s1.shape[0]

    @property
    def n(self) -> int:
        return self.anchors.shape[1]

    def value(self, i: int, ybar_i) -> float:
        y = np.asarray(ybar_i, dtype=float) + self.omega[i]
        return float(self.s1[i] * np.sum((y - self.d_star) ** 2)
                     + self.s2[i] * np.sum((y - self.anchors[i]) ** 2))

    def omega_sum(self) -> np.ndarray:
        """Sum of formation offsets (zero for a regular polygon)."""
        return self.omega.sum(axis=0)


@dataclass(frozen=True)
class ConvexityConstants:
    rho_c: float
    varrho_c: float


def local_gradient(obj: QuadraticObjective, i: int, ybar_i) -> np.ndarray:
    """Measured gradient of agent i at its current transformed output."""
    y = np.asarray(ybar_i, dtype=float) + obj.omega[i]
    return 2.0 * obj.s1[i] * (y - obj.d_star) + 2.0 * obj.s2[i] * (y - obj.anchors[i])


def measured_gradients(obj: QuadraticObjective, ybar) -> np.ndarray:
    """All agents' measured gradients at an (N, n) array of transformed outputs."""
    y = np.asarray(ybar, dtype=float) + obj.omega
    return (2.0 * obj.s1[:, None] * (y - obj.d_star)
            + 2.0 * obj.s2[:, None] * (y - obj.anchors))


def constants(obj: QuadraticObjective) -> ConvexityConstants:
    """rho_c = min 2(s1+s2), varrho_c = max 2(s1+s2)."""
    curvature = 2.0 * (obj.s1 + obj.s2)
    if np.any(curvature <= 0):
        raise ObjectiveError("Objective is not strongly convex (s1 + s2 = 0 for some agent)")
    return ConvexityConstants(rho_c=float(curvature.min()), varrho_c=float(curvature.max()))


def global_gradient(obj: QuadraticObjective, ybar) -> np.ndarray:
    ybar = np.asarray(ybar, dtype=float).reshape(obj.N, obj.n)
    return measured_gradients(obj, ybar).sum(axis=0)


def global_gradient_norm(obj: QuadraticObjective, ybar) -> float:
    """||sum_i grad f_i(ybar_i)||_2"""
    return float(np.linalg.norm(global_gradient(obj, ybar)))


def optimality_residual(obj: QuadraticObjective, z) -> float:
    z = np.asarray(z, dtype=float)
    return global_gradient_norm(obj, np.tile(z, (obj.N, 1)))


def _closed_form(obj: QuadraticObjective) -> np.ndarray:
    weights = obj.s1 + obj.s2
    numerator = (obj.s1[:, None] * (obj.d_star - obj.omega)
                 + obj.s2[:, None] * (obj.anchors - obj.omega)).sum(axis=0)
    return numerator / weights.sum()


def _gradient_descent(obj: QuadraticObjective, damping: float, max_iter: int) -> np.ndarray:
    # sum_i grad f_i is 2 * sum(s1 + s2)-Lipschitz
    lipschitz = 2.0 * float((obj.s1 + obj.s2).sum())
    step = damping / lipschitz
    z = obj.anchors.mean(axis=0)
    for _ in range(max_iter):
        grad = global_gradient(obj, np.tile(z, (obj.N, 1)))
        if np.linalg.norm(grad) <= 0.1 * ORACLE_TOL:
            break
        z = z - step * grad
    return z


def optimum_oracle(obj: QuadraticObjective, top: Optional[Topology] = None,
                   method: str = "closed_form", damping: float = 0.5,
                   max_iter: int = 10000) -> np.ndarray:
    """Unique root z* of sum_i grad f_i(z) = 0.

    Args:
        obj: objectives
        top: topology; when given it must be connected
        method: "closed_form" or "iterative" (damped gradient descent)
        damping: step fraction of 1/Lipschitz for the iterative method
        max_iter: iteration budget

    Returns:
        z* as an (n,) array
    """
    if top is not None and not top.is_connected():
        raise OracleError("Optimum oracle requires a connected topology")
    constants(obj)
    if method == "closed_form":
        z = _closed_form(obj)
    elif method == "iterative":
        z = _gradient_descent(obj, damping, max_iter)
    else:
        raise ValueError(f"Unknown oracle method '{method}'")

    residual = optimality_residual(obj, z)
    if residual > ORACLE_TOL:
        raise OracleError(
            f"Optimum oracle ({method}) residual {residual:.3e} exceeds {ORACLE_TOL:.0e}"
        )
    logger.debug(f"Oracle ({method}) z*={z.tolist()} residual={residual:.3e}")
    return z
