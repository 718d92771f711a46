#!/usr/bin/env python3
"""
Parameter Design and Small-Gain Verification
Derived constants, gain synthesis per the four design criteria (DC1-DC4),
criterion-by-criterion verification, ISS gain descriptors for the two
interconnected error subsystems and the prescribed-time small-gain check.

Features:
- derive_constants: delta, delta_bar, delta_underbar, eps bounds, c_Delta, c_s, k_tilde, l1, l2
- synthesize: compliant (c, iota, k1, k2, sigma) with a multiplicative margin
- verify_design: per-criterion margins plus the l1 * l2 < 1 product
- smallgain_check: l1 * l2 < 1, gain-order condition and the bound map alpha_tilde
"""

import math
import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from dptco.controller import ControlGains
from dptco.gain import GainFunction
from dptco.graph import Topology, laplacian, spectrum
from dptco.objective import QuadraticObjective, constants
from dptco.plant import PlantBounds

logger = logging.getLogger(__name__)


class DesignError(ValueError):
    """Design precondition or positivity violated."""


@dataclass(frozen=True)
class NetworkConstants:
    lambda2: float
    lambdaN: float
    rho_c: float
    varrho_c: float
    k_m_lower_min: float
    k_m_upper_max: float
    k_m_upper: Tuple[float, ...]
    b_tilde: float

    def __post_init__(self):
        if not self.lambda2 > 0:
            raise DesignError(f"Graph is disconnected (lambda2 = {self.lambda2:.3e})")
        if self.lambdaN < self.lambda2:
            raise DesignError("lambdaN must be >= lambda2")
        if not (self.rho_c > 0 and self.varrho_c >= self.rho_c):
            raise DesignError("Convexity constants must satisfy 0 < rho_c <= varrho_c")
        if not (self.k_m_lower_min > 0 and self.k_m_upper_max > 0):
            raise DesignError("Mass-matrix bounds must be positive")
        if len(self.k_m_upper) == 0 or min(self.k_m_upper) <= 0:
            raise DesignError("Per-agent k_m_upper must be positive")
        if self.b_tilde < 0:
            raise DesignError("b_tilde must be nonnegative")

    @property
    def N(self) -> int:
        return len(self.k_m_upper)


def network_constants(top: Topology, obj: QuadraticObjective,
                      bounds: Sequence[PlantBounds], gain: GainFunction) -> NetworkConstants:
    """Collect the constants the design needs from a scenario."""
    spec = spectrum(laplacian(top))
    if not spec.connected:
        raise DesignError(f"Graph is disconnected (lambda2 = {spec.lambda2:.3e})")
    cc = constants(obj)
    return NetworkConstants(
        lambda2=spec.lambda2,
        lambdaN=spec.lambdaN,
        rho_c=cc.rho_c,
        varrho_c=cc.varrho_c,
        k_m_lower_min=min(b.k_m_lower for b in bounds),
        k_m_upper_max=max(b.k_m_upper for b in bounds),
        k_m_upper=tuple(b.k_m_upper for b in bounds),
        b_tilde=gain.b_tilde,
    )


def lyapunov_delta(nc: NetworkConstants) -> float:
    """delta = max{4 / lambda2, (4 varrho_c^2 + 1) / rho_c}"""
    return max(4.0 / nc.lambda2, (4.0 * nc.varrho_c ** 2 + 1.0) / nc.rho_c)


@dataclass(frozen=True)
class DerivedConstants:
    c_star: float
    delta: float
    delta_bar: float
    delta_underbar: float
    eps_bar: float
    eps_underbar: float
    c_Delta: float
    c_s: float
    k1_star: Tuple[float, ...]
    k2_star: Tuple[float, ...]
    k_tilde1: float
    k_tilde2: float
    sigma_min: float
    sigma_max: float
    k_tilde: float
    l1: float
    l2: float

    @property
    def coupling_threshold(self) -> float:
        """c_Delta c_s / (c* delta_underbar)"""
        return self.c_Delta * self.c_s / (self.c_star * self.delta_underbar)

    @property
    def smallgain_product(self) -> float:
        return self.l1 * self.l2


def _c_delta(c: float, nc: NetworkConstants, delta: float) -> float:
    vr2 = nc.varrho_c ** 2
    return c * (vr2 * delta / (2.0 * nc.rho_c)
                + nc.lambdaN ** 2 * delta / (2.0 * nc.lambda2)
                + 2.0 * delta ** 2
                + vr2 / (2.0 * nc.rho_c)
                + 2.0 * vr2)


def _c_s(c: float, nc: NetworkConstants) -> float:
    return 4.0 * c ** 2 * (2.0 * nc.lambdaN + nc.varrho_c + 1.0) ** 2


def derive_constants(nc: NetworkConstants, gains: ControlGains, c_star: float,
                     strict: bool = True) -> DerivedConstants:
    """Every derived constant, computed literally from its definition.

    With strict=True a nonpositive k_tilde raises DesignError ("DC4 margin
    violated"); otherwise l1 is reported as +inf.
    """
    if not c_star > 0:
        raise DesignError(f"c* must be positive, got {c_star}")
    if gains.N != nc.N:
        raise DesignError(f"Gains cover {gains.N} agents, constants cover {nc.N}")

    delta = lyapunov_delta(nc)
    delta_bar = delta * max(1.0, 1.0 / nc.lambda2) / 2.0 + 0.5
    delta_underbar = delta * min(1.0, 1.0 / nc.lambdaN) / 2.0
    eps_bar = max(1.0, nc.k_m_upper_max)
    eps_underbar = min(1.0, nc.k_m_lower_min)
    c_Delta = _c_delta(gains.c, nc, delta)
    c_s = _c_s(gains.c, nc)

    k_m_upper = np.asarray(nc.k_m_upper, dtype=float)
    k1_star = gains.k1 - nc.b_tilde * gains.iota - 1.0
    k2_star = gains.k2 - 0.5 * gains.k1 ** 2 * k_m_upper ** 2 - 0.5
    k_tilde1 = 2.0 * float(k1_star.min()) - c_s
    k_tilde2 = 2.0 * float(np.min(k2_star / k_m_upper))
    sigma_min = float(gains.sigma.min())
    sigma_max = float(gains.sigma.max())
    k_tilde = min(k_tilde1, k_tilde2, sigma_min)

    if k_tilde <= 0:
        message = (f"DC4 margin violated: k_tilde = {k_tilde:.6g} "
                   f"(k_tilde1={k_tilde1:.6g}, k_tilde2={k_tilde2:.6g}, sigma_min={sigma_min:.6g})")
        if strict:
            raise DesignError(message)
        logger.debug(message)
        l1 = math.inf
    else:
        l1 = c_Delta / k_tilde

    return DerivedConstants(
        c_star=c_star,
        delta=delta,
        delta_bar=delta_bar,
        delta_underbar=delta_underbar,
        eps_bar=eps_bar,
        eps_underbar=eps_underbar,
        c_Delta=c_Delta,
        c_s=c_s,
        k1_star=tuple(float(k) for k in k1_star),
        k2_star=tuple(float(k) for k in k2_star),
        k_tilde1=k_tilde1,
        k_tilde2=k_tilde2,
        sigma_min=sigma_min,
        sigma_max=sigma_max,
        k_tilde=k_tilde,
        l1=l1,
        l2=c_s / (c_star * delta_underbar),
    )


def required_c(nc: NetworkConstants, c_star: float, iota: float) -> float:
    """c = 2 delta_bar c* + 4 iota b_tilde + 4 delta_bar iota b_tilde"""
    delta = lyapunov_delta(nc)
    delta_bar = delta * max(1.0, 1.0 / nc.lambda2) / 2.0 + 0.5
    return (2.0 * delta_bar * c_star + 4.0 * iota * nc.b_tilde
            + 4.0 * delta_bar * iota * nc.b_tilde)


def synthesize(nc: NetworkConstants, c_star: float, iota: float,
               margin: float = 0.1) -> ControlGains:
    """Gains meeting DC1-DC4, each strict inequality exceeded by (1 + margin).

    Args:
        nc: network constants
        c_star: target decay rate c* > 0
        iota: mapping exponent, iota > 2
        margin: multiplicative slack on every strict lower bound

    Returns:
        ControlGains with uniform sigma
    """
    if not iota > 2:
        raise DesignError(f"DC1 requires iota > 2, got {iota}")
    if not c_star > 0:
        raise DesignError(f"c* must be positive, got {c_star}")
    if not margin > 0:
        raise DesignError(f"margin must be positive, got {margin}")

    slack = 1.0 + margin
    delta = lyapunov_delta(nc)
    delta_underbar = delta * min(1.0, 1.0 / nc.lambdaN) / 2.0
    c = required_c(nc, c_star, iota)
    c_Delta = _c_delta(c, nc, delta)
    c_s = _c_s(c, nc)
    threshold = c_Delta * c_s / (c_star * delta_underbar)

    k_m_upper = np.asarray(nc.k_m_upper, dtype=float)
    sigma = np.full(nc.N, max(nc.b_tilde, threshold) * slack)
    k1_star = c_s * (c_Delta / (c_star * delta_underbar) + 1.0) / 2.0 * slack
    k1 = np.full(nc.N, k1_star + nc.b_tilde * iota + 1.0)
    k1_term = 0.5 * k1 ** 2 * k_m_upper ** 2
    # k2* must stay resolvable after subtracting the k1 term back out
    k2_star = np.maximum(threshold * k_m_upper / 2.0 * slack, 1e-6 * k1_term)
    k2 = k2_star + k1_term + 0.5

    logger.info(f"Synthesized gains: c={c:.6g}, iota={iota}, k1={k1[0]:.6g}, "
                f"k2 in [{k2.min():.6g}, {k2.max():.6g}], sigma={sigma[0]:.6g}")
    return ControlGains(c=c, iota=iota, k1=k1, k2=k2, sigma=sigma)


@dataclass
class CriterionCheck:
    """One inequality lhs > rhs (or >= for equalities checked as lower bounds)."""
    name: str
    lhs: float
    rhs: float
    passed: bool
    detail: str = ""

    @property
    def margin(self) -> float:
        return self.lhs - self.rhs


@dataclass
class DesignReport:
    checks: List[CriterionCheck] = field(default_factory=list)
    derived: Optional[DerivedConstants] = None
    smallgain_product: float = math.inf

    @property
    def all_pass(self) -> bool:
        return all(c.passed for c in self.checks)

    def failures(self) -> List[str]:
        return [c.name for c in self.checks if not c.passed]

    def as_dict(self) -> dict:
        return {
            "all_pass": self.all_pass,
            "smallgain_product": self.smallgain_product,
            "checks": {c.name: {"lhs": c.lhs, "rhs": c.rhs, "margin": c.margin,
                                "passed": c.passed} for c in self.checks},
        }


def verify_design(nc: NetworkConstants, gains: ControlGains, c_star: float) -> DesignReport:
    """Check DC1-DC4 one by one and the induced small-gain product."""
    report = DesignReport()
    derived = derive_constants(nc, gains, c_star, strict=False)
    report.derived = derived
    rel = 1e-12

    report.checks.append(CriterionCheck("DC1 iota > 2", gains.iota, 2.0, gains.iota > 2.0))

    c_req = required_c(nc, c_star, gains.iota)
    report.checks.append(CriterionCheck(
        "DC2 c >= 2 delta_bar c* + 4 iota b~ (1 + delta_bar)", gains.c, c_req,
        gains.c >= c_req * (1.0 - rel)))

    threshold = derived.coupling_threshold
    sigma_bound = max(nc.b_tilde, threshold)
    report.checks.append(CriterionCheck(
        "DC3 sigma_min > max{b~, c_Delta c_s / (c* delta_)}", derived.sigma_min, sigma_bound,
        derived.sigma_min > sigma_bound))

    k1_bound = derived.c_s * (derived.c_Delta / (c_star * derived.delta_underbar) + 1.0) / 2.0
    k1_min = min(derived.k1_star)
    report.checks.append(CriterionCheck(
        "DC4 min k1* > c_s (c_Delta / (c* delta_) + 1) / 2", k1_min, k1_bound,
        k1_min > k1_bound))

    for i, (k2s, kmu) in enumerate(zip(derived.k2_star, nc.k_m_upper)):
        bound = threshold * kmu / 2.0
        report.checks.append(CriterionCheck(
            f"DC4 k2*[{i}] > c_Delta c_s k_m[{i}] / (2 c* delta_)", k2s, bound, k2s > bound))

    report.checks.append(CriterionCheck(
        "sigma_i >= b~", float(gains.sigma.min()), nc.b_tilde,
        bool(np.all(gains.sigma >= nc.b_tilde))))

    product = derived.smallgain_product
    report.smallgain_product = product
    report.checks.append(CriterionCheck("small-gain l1 l2 < 1", 1.0, product, product < 1.0))

    if not report.all_pass:
        logger.info(f"Design check failures: {report.failures()}")
    return report


@dataclass(frozen=True)
class ScalarFamily:
    """coef * s**power"""
    coef: float
    power: int = 1

    def __call__(self, s):
        return self.coef * np.asarray(s, dtype=float) ** self.power


@dataclass(frozen=True)
class ISSGainDescriptor:
    """Prescribed-time ISS Lyapunov data of one subsystem."""
    alpha: ScalarFamily
    gamma: ScalarFamily
    l: float
    alpha_lower: ScalarFamily = ScalarFamily(1.0, 2)
    alpha_upper: ScalarFamily = ScalarFamily(1.0, 2)
    epsilon: float = 0.0

    def __post_init__(self):
        coefficients = [self.alpha.coef, self.gamma.coef, self.alpha_lower.coef,
                        self.alpha_upper.coef]
        if min(coefficients) <= 0 or self.l < 0 or self.epsilon < 0:
            raise DesignError("ISS descriptor coefficients must be positive")


def iss_descriptors(derived: DerivedConstants,
                      theta_norm: float) -> Tuple[ISSGainDescriptor, ISSGainDescriptor]:
    """Descriptors of the optimizer-error (U) and tracking-error (W) subsystems."""
    if not derived.k_tilde > 0:
        raise DesignError("Descriptors need k_tilde > 0")
    d1 = ISSGainDescriptor(
        alpha=ScalarFamily(derived.c_star, 1),
        gamma=ScalarFamily(1.0, 1),
        l=derived.l1,
        alpha_lower=ScalarFamily(derived.delta_underbar, 2),
        alpha_upper=ScalarFamily(derived.delta_bar, 2),
    )
    d2 = ISSGainDescriptor(
        alpha=ScalarFamily(derived.k_tilde, 1),
        gamma=ScalarFamily(1.0, 1),
        l=derived.l2,
        alpha_lower=ScalarFamily(derived.eps_underbar, 2),
        alpha_upper=ScalarFamily(derived.eps_bar, 2),
        epsilon=derived.sigma_max * theta_norm ** 2,
    )
    return d1, d2


@dataclass
class SmallGainResult:
    passed: bool
    product: float
    order_ratio: float
    eta1: float = math.nan
    eta2_theta_sq: float = math.nan
    eta3: float = math.nan
    alpha_tilde: Optional[Callable] = None


def smallgain_check(d1: ISSGainDescriptor, d2: ISSGainDescriptor) -> SmallGainResult:
    """l1 l2 < 1 and sup (gamma1 + gamma2) / min(alpha1, alpha2) < inf.

    On success the result carries the bound map
    alpha_tilde(s) = (delta_^-1/2 + eps_^-1/2) (sqrt(eta2 ||theta||^2) + sqrt(eta3) s),
    where ||theta||^2 enters through d2.epsilon / sigma_max.
    """
    product = d1.l * d2.l
    same_order = (d1.alpha.power == d2.alpha.power == d1.gamma.power == d2.gamma.power)
    order_ratio = ((d1.gamma.coef + d2.gamma.coef) / min(d1.alpha.coef, d2.alpha.coef)
                   if same_order else math.inf)
    passed = product < 1.0 and math.isfinite(order_ratio)
    result = SmallGainResult(passed=passed, product=product, order_ratio=order_ratio)
    if not passed:
        return result

    eta1 = math.sqrt(product)
    a_min = min(d1.alpha.coef, d2.alpha.coef)
    # d2.epsilon = sigma_max ||theta||^2, so eta2 ||theta||^2 = 2 eta1 epsilon / (a_min (1 - eta1))
    eta2_theta2 = 2.0 * eta1 * d2.epsilon / (a_min * (1.0 - eta1))
    eta3 = max(d2.l, eta1) * (d1.alpha_upper.coef + d2.alpha_upper.coef)
    scale = d1.alpha_lower.coef ** -0.5 + d2.alpha_lower.coef ** -0.5
    offset = math.sqrt(eta2_theta2)
    slope = math.sqrt(eta3)

    def alpha_tilde(s):
        return scale * (offset + slope * np.asarray(s, dtype=float))

    result.eta1 = eta1
    result.eta2_theta_sq = eta2_theta2
    result.eta3 = eta3
    result.alpha_tilde = alpha_tilde
    return result
