#!/usr/bin/env python3
"""
Prescribed-Time Gain Functions
Time-varying gains mu(t) that grow without bound at the deadline T + t0

Features:
- Power form  mu(t) = scale * (T / (T + t0 - t))**m
- Exponential form  mu(t) = exp(1 / (T + t0 - t))
- Constant form  mu(t) = scale (no deadline, used for contrast runs)
- Closed-form constants b, b', b_tilde with d(mu)/dt <= b_tilde * mu**2
- kappa integrals exp(iota * int alpha(mu)) by trapezoidal quadrature
"""

import math
import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np
from scipy.integrate import cumulative_trapezoid

logger = logging.getLogger(__name__)

GAIN_FORMS = ("power", "exp", "constant")

# exp() argument ceiling for float64
_LOG_FLOAT_MAX = math.log(np.finfo(float).max)


class GainDomainError(ValueError):
    """Raised when a gain is evaluated outside [t0, T + t0)."""


@dataclass(frozen=True)
class GainFunction:
    """Class K_T gain on [t0, T + t0).

    Args:
        form: "power", "exp" or "constant"
        T: prescribed-time scale (s)
        t0: initial time (s)
        m: power-form exponent (>= 1)
        scale: power-form / constant-form multiplier
        mu_cap: numerical ceiling applied to mu near the deadline
    """
    form: str = "power"
    T: float = 2.0
    t0: float = 0.0
    m: float = 1.0
    scale: float = 1.0
    mu_cap: float = 1e9

    def __post_init__(self):
        if self.form not in GAIN_FORMS:
            raise ValueError(f"Unknown gain form '{self.form}', expected one of {GAIN_FORMS}")
        if self.form != "constant" and not self.T > 0:
            raise ValueError(f"Gain horizon T must be positive, got {self.T}")
        if self.form == "power" and self.m < 1:
            raise ValueError(f"Power-form exponent m must be >= 1, got {self.m}")
        if self.form in ("power", "constant") and not self.scale > 0:
            raise ValueError(f"Gain scale must be positive, got {self.scale}")
        if not self.mu_cap > 0:
            raise ValueError(f"mu_cap must be positive, got {self.mu_cap}")

    @property
    def deadline(self) -> float:
        """T + t0, or infinity for the constant form."""
        if self.form == "constant":
            return math.inf
        return self.T + self.t0

    @property
    def b(self) -> float:
        """mu(t0)"""
        if self.form == "power" or self.form == "constant":
            return self.scale
        return math.exp(1.0 / self.T)

    @property
    def b_prime(self) -> float:
        """d(mu)/dt at t0"""
        if self.form == "power":
            return self.scale * self.m / self.T
        if self.form == "exp":
            return math.exp(1.0 / self.T) / self.T ** 2
        return 0.0

    @property
    def b_tilde(self) -> float:
        """Constant with d(mu)/dt <= b_tilde * mu**2 on the whole horizon."""
        if self.form == "power":
            return self.m / (self.scale * self.T)
        if self.form == "exp":
            # sup over w = 1/u >= 1/T of w**2 * exp(-w); the maximum sits at w = 2
            if self.T >= 0.5:
                return 4.0 / math.exp(2.0)
            return math.exp(-1.0 / self.T) / self.T ** 2
        return 0.0

    def _check_domain(self, t: float):
        if t < self.t0 or t >= self.deadline:
            raise GainDomainError(
                f"t={t!r} outside gain domain [{self.t0}, {self.deadline})"
            )

    def _raw(self, t: float):
        """Return (mu, mu_dot, capped) without domain checks."""
        if self.form == "constant":
            return min(self.scale, self.mu_cap), 0.0, self.scale >= self.mu_cap
        u = self.deadline - t
        if self.form == "power":
            mu = self.scale * (self.T / u) ** self.m
            if mu >= self.mu_cap:
                return self.mu_cap, 0.0, True
            return mu, self.m / u * mu, False
        exponent = 1.0 / u
        if exponent >= min(math.log(self.mu_cap), _LOG_FLOAT_MAX):
            return self.mu_cap, 0.0, True
        mu = math.exp(exponent)
        return mu, mu / u ** 2, False

    def is_capped(self, t: float) -> bool:
        self._check_domain(t)
        return self._raw(t)[2]


def eval_mu(g: GainFunction, t: float) -> float:
    """mu(t), clamped at g.mu_cap."""
    g._check_domain(t)
    return g._raw(t)[0]


def eval_mu_dot(g: GainFunction, t: float) -> float:
    """Analytic d(mu)/dt; zero where mu is clamped."""
    g._check_domain(t)
    return g._raw(t)[1]


def eval_mu_tilde(g: GainFunction, t: float) -> float:
    """mu_tilde = mu_dot / mu."""
    g._check_domain(t)
    mu, mu_dot, _ = g._raw(t)
    return mu_dot / mu


def mu_series(g: GainFunction, times) -> np.ndarray:
    """Vectorized mu over an array of times."""
    times = np.asarray(times, dtype=float)
    return np.array([eval_mu(g, float(t)) for t in times.ravel()]).reshape(times.shape)


def kappa_series(g: GainFunction, iota: float, alpha: Callable, times) -> np.ndarray:
    """kappa^iota(alpha(mu)) at every point of an increasing grid starting at t0.

    Uses the trapezoidal rule on the grid itself.
    """
    times = np.asarray(times, dtype=float)
    if times.ndim != 1 or times.size == 0:
        raise ValueError("kappa grid must be a non-empty 1-D array")
    if times[0] != g.t0:
        raise GainDomainError(f"kappa grid must start at t0={g.t0}, got {times[0]}")
    values = np.array([alpha(m) for m in mu_series(g, times)], dtype=float)
    integral = cumulative_trapezoid(values, times, initial=0.0)
    exponent = iota * integral
    if np.any(exponent > _LOG_FLOAT_MAX):
        raise OverflowError(
            f"kappa exponent {exponent.max():.3e} exceeds the float range"
        )
    return np.exp(exponent)


def kappa(g: GainFunction, iota: float, alpha: Callable, t: float,
          step: float = 1e-4) -> float:
    """exp(iota * int_{t0}^{t} alpha(mu(s)) ds) on a grid of spacing `step`.

    Args:
        g: gain function
        iota: exponent weight
        alpha: scalar K_inf map applied to mu
        t: upper integration limit
        step: grid spacing (the integrator step)

    Returns:
        kappa value at t
    """
    g._check_domain(t)
    if iota == 0:
        return 1.0
    n = max(1, int(math.ceil((t - g.t0) / step - 1e-9)))
    grid = g.t0 + np.arange(n + 1) * step
    grid[-1] = t
    if n == 1 and t == g.t0:
        return 1.0
    return float(kappa_series(g, iota, alpha, grid)[-1])


@dataclass
class ClassKTReport:
    """Outcome of verify_class_KT."""
    form: str
    b: float
    b_prime: float
    b_tilde: float
    grid_points: int
    max_monotonicity_violation: float
    max_growth_violation: float
    b_below_one: bool
    tolerance: float = 1e-12
    notes: List[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return (self.max_monotonicity_violation <= self.tolerance
                and self.max_growth_violation <= self.tolerance)


def verify_class_KT(g: GainFunction, grid_points: int = 2001,
                    stop_margin: Optional[float] = None,
                    mu_fn: Optional[Callable[[float], float]] = None,
                    mu_dot_fn: Optional[Callable[[float], float]] = None,
                    tolerance: float = 1e-12) -> ClassKTReport:
    """Sample [t0, T + t0 - stop_margin] and check monotonicity and mu_dot <= b_tilde mu^2.

    `mu_fn` / `mu_dot_fn` replace the gain's own evaluation (test injection).
    Growth violations are measured relative to mu**2.
    """
    if grid_points < 2:
        raise ValueError("grid_points must be >= 2")
    mu_fn = mu_fn or (lambda t: eval_mu(g, t))
    mu_dot_fn = mu_dot_fn or (lambda t: eval_mu_dot(g, t))

    if g.form == "constant":
        t_stop = g.t0 + 1.0
    else:
        margin = stop_margin if stop_margin is not None else 1e-3 * g.T
        t_stop = g.deadline - margin
    grid = np.linspace(g.t0, t_stop, grid_points)
    mu = np.array([mu_fn(float(t)) for t in grid])
    mu_dot = np.array([mu_dot_fn(float(t)) for t in grid])

    monotonicity = float(np.max(mu[:-1] - mu[1:]))
    growth = float(np.max((mu_dot - g.b_tilde * mu ** 2) / mu ** 2))

    report = ClassKTReport(
        form=g.form,
        b=g.b,
        b_prime=g.b_prime,
        b_tilde=g.b_tilde,
        grid_points=grid_points,
        max_monotonicity_violation=monotonicity,
        max_growth_violation=growth,
        b_below_one=g.b < 1.0,
        tolerance=tolerance,
    )
    if report.b_below_one:
        report.notes.append(f"b = {g.b:.6g} < 1 (admitted, flagged)")
    if not report.passed:
        logger.warning(
            f"Gain '{g.form}' failed class K_T check: monotonicity={monotonicity:.3e}, "
            f"growth={growth:.3e}"
        )
    return report
