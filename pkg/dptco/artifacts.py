#!/usr/bin/env python3
"""
Run Artifacts
Summary report, CSV/JSON writers and the offline trace checker.

Features:
- build_summary: optimum, error/gradient figures, max norms, design report, acceptance flags
- write_artifacts: trace.csv, metrics.csv, summary.json staged, then renamed into out_dir
- read_trace / check_trace: re-verify the recorded invariants from files alone
"""

import os
import json
import math
import shutil
import logging
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
import pandas as pd

from dptco.design import (DesignError, iss_descriptors, network_constants, smallgain_check,
                          verify_design)
from dptco.gain import mu_series
from dptco.sim import (METRIC_COLUMNS, TRACE_COLUMNS, Scenario, Trace, design_status,
                       gamma_s_coefficient)

logger = logging.getLogger(__name__)

GRADIENT_TOL = 1e-2
POSITION_TOL = 1e-2
CONSERVATION_TOL = 1e-8
SWITCH_TORQUE_TOL = 0.1
FROZEN_SPEED_TOL = 1e-3
FROZEN_DRIFT_TOL = 1e-6
BOUND_SLACK = 1e-9
# Lyapunov rate residuals, relative to their local scale
RATE_TOL = 1e-3
RATE_SHARE = 0.99
DEADLINE_GUARD_STEPS = 100


class TraceFormatError(ValueError):
    """Trace files are missing or malformed."""


def _clean(value):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to None."""
    if isinstance(value, dict):
        return {str(k): _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    if isinstance(value, np.ndarray):
        return _clean(value.tolist())
    if isinstance(value, (np.bool_, bool)):
        return bool(value)
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return value if math.isfinite(value) else None
    return value


def _phase_by_time(trace_df: pd.DataFrame) -> pd.Series:
    return trace_df.groupby("t", sort=True)["phase"].first()


def _positions(trace_df: pd.DataFrame, t: float) -> np.ndarray:
    rows = trace_df[trace_df["t"] == t].sort_values("agent")
    return rows[["q1", "q2"]].to_numpy()


def _lyapunov_window(metrics_df: pd.DataFrame, active_times,
                     scenario: Scenario) -> pd.DataFrame:
    """Active metric rows up to DEADLINE_GUARD_STEPS steps before the deadline."""
    m = metrics_df[metrics_df["t"].isin(active_times)]
    limit = scenario.gain.deadline - DEADLINE_GUARD_STEPS * scenario.settings.h
    return m[m["t"] <= limit]


def _rate_share(m: pd.DataFrame) -> float:
    """Share of rows whose exact rate residuals are within RATE_TOL (NaN counts as outside)."""
    if m.empty:
        return math.nan
    ok = (m["res_U_rel"] <= RATE_TOL) & (m["res_W_rel"] <= RATE_TOL)
    return float(ok.mean())


def _discrete_share(m: pd.DataFrame) -> float:
    d = m.dropna(subset=["dres_U", "dres_W"])
    if d.empty:
        return math.nan
    return float(((d["dres_U"] <= 0) & (d["dres_W"] <= 0)).mean())


def build_summary(scenario: Scenario, trace: Trace) -> dict:
    """Deterministic run report (no timestamps)."""
    trace_df = trace.trace_frame()
    metrics_df = trace.metrics_frame()
    phases = _phase_by_time(trace_df)
    active_times = phases.index[phases == "Active"]
    frozen_times = phases.index[phases == "Frozen"]
    grad = metrics_df.set_index("t")["grad_norm"]

    z_star = trace.z_star
    target = z_star + scenario.objective.omega
    final = trace.final_state
    position_error = float(np.max(np.abs(final.q - target)))

    t_last = float(active_times[-1])
    last_rows = trace_df[trace_df["t"] == t_last]
    tau_last = float(np.max(np.hypot(last_rows["tau1"], last_rows["tau2"])))

    frozen = None
    if len(frozen_times):
        frozen_rows = trace_df[trace_df["phase"] == "Frozen"]
        y_switch = _positions(trace_df, float(frozen_times[0]))
        drift = max(float(np.max(np.abs(_positions(trace_df, float(t)) - y_switch)))
                    for t in frozen_times)
        frozen = {
            "grad_norm_max": float(grad.loc[frozen_times].max()),
            "qdot_norm_max": float(np.max(np.hypot(frozen_rows["qd1"], frozen_rows["qd2"]))),
            "position_drift_max": drift,
        }

    report, smallgain = _design_section(scenario, trace)
    window = _lyapunov_window(metrics_df, active_times, scenario)
    rate_share = _rate_share(window)
    lyapunov = {
        "design_compliant": trace.design_compliant,
        "samples": int(len(window)),
        "rate_within_tol": rate_share,
        "discrete_nonpositive": _discrete_share(window),
    }
    acceptance = {
        "gradient_below_tol": bool(grad.loc[t_last] < GRADIENT_TOL),
        "position_within_tol": position_error <= POSITION_TOL,
        "conservation_within_tol": trace.extrema["conservation"] <= CONSERVATION_TOL,
        "switch_torque_within_tol": tau_last <= SWITCH_TORQUE_TOL,
        "frozen_speed_within_tol": None if frozen is None
        else frozen["qdot_norm_max"] <= FROZEN_SPEED_TOL,
        "frozen_drift_within_tol": None if frozen is None
        else frozen["position_drift_max"] <= FROZEN_DRIFT_TOL,
        "lyapunov_rates_within_tol": None if not trace.design_compliant or window.empty
        else rate_share >= RATE_SHARE,
    }
    summary = {
        "agents": scenario.N,
        "z_star": z_star,
        "t_switch": scenario.t_switch,
        "t_final": final.t,
        "grad_norm": {
            "initial": float(grad.iloc[0]),
            "last_active": float(grad.loc[t_last]),
            "frozen_max": None if frozen is None else frozen["grad_norm_max"],
        },
        "position_error_max": position_error,
        "switch_torque_norm": tau_last,
        "frozen": frozen,
        "max_norms": {
            "qdot": trace.extrema["qdot"],
            "tau": trace.extrema["tau"],
            "theta_hat": trace.extrema["theta_hat"],
        },
        "sup_er_tilde": trace.extrema["er_tilde"],
        "sup_es_tilde": trace.extrema["es_tilde"],
        "conservation_max": trace.extrema["conservation"],
        "substeps": {"total": trace.total_substeps, "max_per_step": trace.max_substeps_used},
        "design": report,
        "smallgain": smallgain,
        "lyapunov": lyapunov,
        "acceptance": acceptance,
        "acceptance_pass": all(v is not False for v in acceptance.values()),
    }
    return _clean(summary)


def _design_section(scenario: Scenario, trace: Trace) -> Tuple[dict, dict]:
    try:
        nc = network_constants(scenario.topology, scenario.objective, scenario.bounds,
                               scenario.gain)
    except DesignError as e:
        logger.warning(f"Design constants unavailable: {e}")
        return {"error": str(e)}, {}
    report = verify_design(nc, scenario.gains, scenario.c_star)
    smallgain = {"product": report.smallgain_product, "alpha_tilde_at_sup_er": None}
    derived = report.derived
    if derived.k_tilde > 0:
        theta_norm = float(np.linalg.norm(scenario.theta))
        result = smallgain_check(*iss_descriptors(derived, theta_norm))
        smallgain["passed"] = result.passed
        if result.passed:
            smallgain["alpha_tilde_at_sup_er"] = float(result.alpha_tilde(trace.extrema["er_tilde"]))
    return report.as_dict(), smallgain


def write_artifacts(out_dir, trace: Trace, summary: dict) -> Path:
    """Write trace.csv, metrics.csv and summary.json, each replaced atomically.

    Files are staged first and renamed in that order, summary.json last, so a
    failure while staging leaves the previous artifacts untouched.

    Args:
        out_dir: target directory (created if missing)
        trace: recorded run
        summary: output of build_summary

    Returns:
        the output directory
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    staging = Path(tempfile.mkdtemp(prefix=".dptco-", dir=out))
    try:
        trace.trace_frame().to_csv(staging / "trace.csv", index=False,
                                   float_format="%.17g", na_rep="")
        trace.metrics_frame().to_csv(staging / "metrics.csv", index=False,
                                     float_format="%.17g", na_rep="")
        with open(staging / "summary.json", "w") as f:
            json.dump(summary, f, indent=2, sort_keys=True, allow_nan=False)
            f.write("\n")
        for name in ("trace.csv", "metrics.csv", "summary.json"):
            os.replace(staging / name, out / name)
    finally:
        shutil.rmtree(staging, ignore_errors=True)
    logger.info(f"Artifacts written to {out}")
    return out


def read_trace(trace_dir) -> Tuple[pd.DataFrame, Optional[pd.DataFrame]]:
    """Load trace.csv (required) and metrics.csv (optional) from a run directory."""
    path = Path(trace_dir)
    trace_file = path / "trace.csv" if path.is_dir() else path
    if not trace_file.exists():
        raise TraceFormatError(f"No trace.csv at {trace_file}")
    try:
        trace_df = pd.read_csv(trace_file)
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise TraceFormatError(f"Unreadable trace {trace_file}: {e}") from e
    missing = [c for c in TRACE_COLUMNS if c not in trace_df.columns]
    if missing:
        raise TraceFormatError(f"Trace is missing columns {missing}")
    if trace_df.empty:
        raise TraceFormatError("Trace has no rows")
    bad_phase = set(trace_df["phase"].unique()) - {"Active", "Frozen"}
    if bad_phase:
        raise TraceFormatError(f"Unknown phase labels {sorted(bad_phase)}")

    metrics_df = None
    metrics_file = trace_file.parent / "metrics.csv"
    if metrics_file.exists():
        metrics_df = pd.read_csv(metrics_file)
        missing = [c for c in METRIC_COLUMNS if c not in metrics_df.columns]
        if missing:
            raise TraceFormatError(f"Metrics file is missing columns {missing}")
    return trace_df, metrics_df


@dataclass
class CheckReport:
    violations: List[str] = field(default_factory=list)
    notes: List[str] = field(default_factory=list)
    partial: bool = False
    samples: int = 0

    @property
    def passed(self) -> bool:
        return not self.violations


def _check_mapped_bounds(metrics_df: pd.DataFrame, active_times, scenario: Scenario,
                        report: CheckReport):
    m = metrics_df[metrics_df["t"].isin(active_times)].sort_values("t")
    if m.empty:
        return
    mu = mu_series(scenario.gain, m["t"].to_numpy())
    iota = scenario.gains.iota
    sup_r = np.maximum.accumulate(m["er_tilde_norm"].to_numpy())
    sup_s = np.maximum.accumulate(m["es_tilde_norm"].to_numpy())
    gamma = gamma_s_coefficient(scenario.gains, scenario.gain.b)
    bound_r = mu ** -iota * sup_r * (1.0 + BOUND_SLACK)
    bound_s = mu ** (1.0 - iota) * gamma * sup_s * (1.0 + BOUND_SLACK)
    over_r = np.flatnonzero(m["e_r_norm"].to_numpy() > bound_r)
    over_s = np.flatnonzero(m["e_s_norm"].to_numpy() > bound_s)
    if over_r.size:
        report.violations.append(
            f"||e_r|| exceeds its mapped bound at {over_r.size} samples "
            f"(first t={m['t'].iloc[over_r[0]]})")
    if over_s.size:
        report.violations.append(
            f"||e_s|| exceeds its mapped bound at {over_s.size} samples "
            f"(first t={m['t'].iloc[over_s[0]]})")


def _check_lyapunov_residuals(metrics_df: pd.DataFrame, active_times, scenario: Scenario,
                              report: CheckReport):
    window = _lyapunov_window(metrics_df, active_times, scenario)
    if window.empty:
        return
    share = _rate_share(window)
    _, compliant = design_status(scenario)
    if not compliant:
        report.notes.append(
            f"design criteria not met: Lyapunov residuals not enforced "
            f"({share:.1%} of {len(window)} samples within tolerance)")
    elif share < RATE_SHARE:
        report.violations.append(
            f"Lyapunov rate residuals exceed {RATE_TOL:g} of their local scale at "
            f"{1.0 - share:.1%} of {len(window)} samples")


def check_trace(trace_df: pd.DataFrame, metrics_df: Optional[pd.DataFrame],
                scenario: Scenario) -> CheckReport:
    """Re-verify run invariants from recorded data.

    Checks finiteness, increasing time, conservation of sum(v), phase
    ordering, the frozen hold (tau = 0, varpi/v/theta_hat constant), the
    switch torque, the mapped-error bounds and, when the gains meet every
    design criterion, the Lyapunov rate residuals. A trace that stops before the
    deadline is checked in partial mode without the Frozen assertions.
    """
    report = CheckReport()
    numeric = [c for c in TRACE_COLUMNS if c != "phase"]
    try:
        values = trace_df[numeric].astype(float)
    except ValueError as e:
        raise TraceFormatError(f"Non-numeric trace entries: {e}") from e
    if not np.all(np.isfinite(values.to_numpy())):
        report.violations.append("Trace contains NaN or infinite values")

    report.samples = int(trace_df["t"].nunique())
    for agent, rows in trace_df.groupby("agent"):
        if not np.all(np.diff(rows["t"].to_numpy()) > 0):
            report.violations.append(f"Timestamps of agent {agent} are not strictly increasing")

    sums = trace_df.groupby("t")[["v1", "v2"]].sum()
    conservation = np.hypot(sums["v1"], sums["v2"])
    if conservation.max() > CONSERVATION_TOL:
        report.violations.append(
            f"sum of v drifts to {conservation.max():.3e} (t={conservation.idxmax()})")

    phases = _phase_by_time(trace_df)
    labels = phases.to_numpy()
    frozen_idx = np.flatnonzero(labels == "Frozen")
    active_times = phases.index[labels == "Active"]
    if frozen_idx.size and np.any(labels[frozen_idx[0]:] == "Active"):
        report.violations.append("Active samples recorded after the Frozen phase began")

    if not frozen_idx.size:
        if phases.index.max() < scenario.gain.deadline:
            report.partial = True
            report.notes.append("no Frozen-phase assertions")
    else:
        frozen = trace_df[trace_df["phase"] == "Frozen"]
        if np.any(frozen[["tau1", "tau2"]].to_numpy() != 0.0):
            report.violations.append("Nonzero torque recorded in the Frozen phase")
        held = ["varpi1", "varpi2", "v1", "v2", "th1", "th2", "th3"]
        for agent, rows in frozen.groupby("agent"):
            if np.any(rows[held].nunique().to_numpy() > 1):
                report.violations.append(f"Agent {agent} changed its frozen controller state")
        if len(active_times):
            last = trace_df[trace_df["t"] == active_times[-1]]
            tau = float(np.max(np.hypot(last["tau1"], last["tau2"])))
            if tau > SWITCH_TORQUE_TOL:
                report.violations.append(
                    f"Torque at the last Active sample is {tau:.3e} > {SWITCH_TORQUE_TOL}")

    if metrics_df is None:
        report.notes.append("metrics.csv absent: mapped-error bounds not checked")
    else:
        _check_mapped_bounds(metrics_df, active_times, scenario, report)
        _check_lyapunov_residuals(metrics_df, active_times, scenario, report)

    level = logging.INFO if report.passed else logging.WARNING
    logger.log(level, f"Checked {report.samples} samples: {len(report.violations)} violations")
    return report
