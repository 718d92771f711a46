#!/usr/bin/env python3
"""
DPTCO Command Line
Runs scenarios, checks gain designs, prints the optimum and re-verifies
recorded traces.

Usage:
    python main.py simulate --config scenarios/heat_source_formation.yaml --out runs/sec6
    python main.py design --config scenarios/heat_source_formation.yaml
    python main.py oracle --config scenarios/heat_source_formation.yaml
    python main.py check --config scenarios/heat_source_formation.yaml --trace runs/sec6

Exit codes: 0 ok, 1 check found violations, 2 invalid input, 3 numerical failure, 4 I/O error.
"""

import sys
import logging
import argparse
from pathlib import Path

import numpy as np

from dptco.artifacts import TraceFormatError, build_summary, check_trace, read_trace, write_artifacts
from dptco.config import ConfigError, LoggingConfig, build_scenario, load_config
from dptco.design import (DesignError, derive_constants, iss_descriptors, network_constants,
                          smallgain_check, synthesize, verify_design)
from dptco.gain import GainDomainError
from dptco.graph import SpectrumError, TopologyError
from dptco.objective import (ObjectiveError, OracleError, measured_gradients, optimality_residual,
                             optimum_oracle)
from dptco.plant import SingularMassError
from dptco.sim import NumericalAbort, StepAcrossSingularityError, run

try:
    from pythonjsonlogger.json import JsonFormatter
except ImportError:
    from pythonjsonlogger.jsonlogger import JsonFormatter

logger = logging.getLogger(__name__)

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'

EXIT_OK = 0
EXIT_VIOLATIONS = 1
EXIT_INVALID = 2
EXIT_NUMERICAL = 3
EXIT_IO = 4


# ANSI styles for the human-readable report; plain text when stdout is not a terminal
_STYLES = {"bold": '\033[1m', "cyan": '\033[96m', "green": '\033[92m', "yellow": '\033[93m',
           "red": '\033[91m', "blue": '\033[94m', "end": '\033[0m'}


def _styled(text: str, *styles: str) -> str:
    if not sys.stdout.isatty():
        return text
    return "".join(_STYLES[s] for s in styles) + text + _STYLES["end"]


def print_header(text):
    rule = "=" * 70
    print("\n" + _styled(f"{rule}\n{text}\n{rule}", "bold", "cyan") + "\n")


def print_success(text):
    print(_styled(f"✓ {text}", "green"))


def print_warning(text):
    print(_styled(f"⚠️  {text}", "yellow"))


def print_error(text):
    print(_styled(f"✗ {text}", "red"))


def print_info(text):
    print(_styled(f"ℹ {text}", "blue"))


def setup_logging(settings: LoggingConfig):
    """Console handler plus an optional JSON-lines file handler on the package logger."""
    root = logging.getLogger("dptco")
    root.setLevel(settings.level)
    for handler in list(root.handlers):
        root.removeHandler(handler)
        handler.close()

    console = logging.StreamHandler()
    console.setFormatter(logging.Formatter(LOG_FORMAT))
    root.addHandler(console)

    if settings.file_path:
        log_path = Path(settings.file_path)
        log_path.parent.mkdir(parents=True, exist_ok=True)
        file_handler = logging.FileHandler(log_path)
        if settings.json:
            file_handler.setFormatter(JsonFormatter(LOG_FORMAT))
        else:
            file_handler.setFormatter(logging.Formatter(LOG_FORMAT))
        root.addHandler(file_handler)
    return root


def _load(args):
    config = load_config(args.config)
    if getattr(args, "step", None) is not None:
        config.sim.h = float(args.step)
    if getattr(args, "t_end", None) is not None:
        config.sim.t_end = float(args.t_end)
    if config.sim.t_end <= config.gain.t0 or config.sim.h <= 0:
        raise ConfigError("--step must be positive and --t-end must exceed t0")
    setup_logging(config.logging)
    return config


def cmd_simulate(args) -> int:
    config = _load(args)
    scenario = build_scenario(config)

    logger.info("=" * 80)
    logger.info(f"DPTCO simulation: {args.config}")
    logger.info("=" * 80)
    logger.info("\n[1/3] Integrating closed loop...")
    trace = run(scenario)
    logger.info("\n[2/3] Building summary...")
    summary = build_summary(scenario, trace)
    logger.info("\n[3/3] Writing artifacts...")
    out = write_artifacts(args.out, trace, summary)

    if not args.quiet:
        print_header("DPTCO SIMULATION")
        print_info(f"z* = {summary['z_star']}")
        print_info(f"grad norm: initial {summary['grad_norm']['initial']:.6g}, "
                   f"last Active {summary['grad_norm']['last_active']:.3e}")
        print_info(f"max |y - (z* + omega)| = {summary['position_error_max']:.3e}")
        for name, ok in summary["acceptance"].items():
            if ok is None:
                print_warning(f"{name}: not applicable")
            elif ok:
                print_success(name)
            else:
                print_error(name)
        for message in config.warnings:
            print_warning(message)
        print_success(f"Artifacts in {out}")
    return EXIT_OK


def _print_report(title: str, report):
    print_header(title)
    for check in report.checks:
        line = f"{check.name}: {check.lhs:.6g} vs {check.rhs:.6g}"
        (print_success if check.passed else print_error)(line)
    print_info(f"l1 * l2 = {report.smallgain_product:.6g}")


def cmd_design(args) -> int:
    config = _load(args)
    scenario = build_scenario(config)
    nc = network_constants(scenario.topology, scenario.objective, scenario.bounds,
                           scenario.gain)
    c_star = config.design.c_star

    configured = verify_design(nc, scenario.gains, c_star)
    synthesized_gains = synthesize(nc, c_star, max(scenario.gains.iota, 2.0 + config.design.margin),
                                   margin=config.design.margin)
    synthesized = verify_design(nc, synthesized_gains, c_star)
    derived = derive_constants(nc, synthesized_gains, c_star)
    result = smallgain_check(*iss_descriptors(derived, float(np.linalg.norm(scenario.theta))))

    if not args.quiet:
        _print_report("CONFIGURED GAINS", configured)
        _print_report("SYNTHESIZED GAINS", synthesized)
        print_info(f"c = {synthesized_gains.c:.6g}, k1 = {synthesized_gains.k1[0]:.6g}, "
                   f"k2 max = {synthesized_gains.k2.max():.6g}, "
                   f"sigma = {synthesized_gains.sigma[0]:.6g}")
        if result.passed:
            print_success(f"small-gain holds: l1 l2 = {result.product:.6g}, "
                          f"alpha_tilde(0) = {float(result.alpha_tilde(0.0)):.6g}")
        else:
            print_error(f"small-gain fails: l1 l2 = {result.product:.6g}")
    if configured.all_pass:
        logger.info("Configured gains satisfy every design criterion")
    else:
        logger.warning(f"Configured gains fail: {configured.failures()}")
    return EXIT_OK


def cmd_oracle(args) -> int:
    config = _load(args)
    scenario = build_scenario(config)
    z_star = optimum_oracle(scenario.objective, scenario.topology)
    z_iter = optimum_oracle(scenario.objective, scenario.topology, method="iterative")
    grad_star = measured_gradients(scenario.objective, np.tile(z_star, (scenario.N, 1)))
    residual = optimality_residual(scenario.objective, z_star)
    if not args.quiet:
        print_header("OPTIMUM ORACLE")
        print_info(f"z* (closed form) = {z_star.tolist()}")
        print_info(f"z* (iterative)   = {z_iter.tolist()}")
        for i, g in enumerate(grad_star):
            print_info(f"grad f_{i}(z*) = {g.tolist()}")
        print_info(f"residual ||sum grad f_i(z*)|| = {residual:.3e}")
    else:
        print(" ".join(f"{x:.17g}" for x in z_star))
        print(" ".join(f"{x:.17g}" for x in grad_star.ravel()))
        print(f"{residual:.17g}")
    return EXIT_OK


def cmd_check(args) -> int:
    config = _load(args)
    scenario = build_scenario(config)
    trace_df, metrics_df = read_trace(args.trace)
    report = check_trace(trace_df, metrics_df, scenario)
    if not args.quiet:
        print_header("TRACE CHECK")
        print_info(f"{report.samples} samples{' (partial)' if report.partial else ''}")
        for note in report.notes:
            print_warning(note)
        for violation in report.violations:
            print_error(violation)
        if report.passed:
            print_success("All invariants hold")
    return EXIT_OK if report.passed else EXIT_VIOLATIONS


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description='Distributed prescribed-time convex optimization for Euler-Lagrange networks'
    )
    sub = parser.add_subparsers(dest='command', required=True)

    def common(p):
        p.add_argument('--config', required=True, help='Path to scenario YAML file')
        p.add_argument('--quiet', action='store_true', help='Suppress the human-readable report')
        return p

    p = common(sub.add_parser('simulate', help='Run a scenario and write artifacts'))
    p.add_argument('--out', required=True, help='Output directory')
    p.add_argument('--step', type=float, help='Step size h (overrides config)')
    p.add_argument('--t-end', dest='t_end', type=float, help='End time (overrides config)')
    p.set_defaults(func=cmd_simulate)

    p = common(sub.add_parser('design', help='Verify configured gains and synthesize compliant ones'))
    p.set_defaults(func=cmd_design)

    p = common(sub.add_parser('oracle', help='Print the network optimum z*'))
    p.set_defaults(func=cmd_oracle)

    p = common(sub.add_parser('check', help='Re-verify invariants of a recorded trace'))
    p.add_argument('--trace', required=True, help='Run directory or trace.csv')
    p.set_defaults(func=cmd_check)
    return parser


def main(argv=None) -> int:
    """Main entry point with command-line arguments"""
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DesignError, TopologyError, ObjectiveError, GainDomainError,
            TraceFormatError) as e:
        logger.error(f"Invalid input: {e}")
        print_error(str(e))
        return EXIT_INVALID
    except (NumericalAbort, OracleError, SpectrumError, SingularMassError,
            StepAcrossSingularityError) as e:
        logger.error(f"Numerical failure: {e}")
        print_error(str(e))
        return EXIT_NUMERICAL
    except OSError as e:
        logger.error(f"I/O error: {e}")
        print_error(str(e))
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
