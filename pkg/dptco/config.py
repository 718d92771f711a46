#!/usr/bin/env python3
"""
Scenario Configuration
YAML scenario files loaded into a dataclass tree, validated, and turned into
a ready-to-run Scenario.

Sections: gain, graph, objective, plant, control, initial, sim, design, logging.
Per-agent entries may be given as a single value and are broadcast to N.
"""

import os
import math
import logging
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Dict, List, Optional

import numpy as np
import yaml

from dptco.controller import ControlGains
from dptco.gain import GAIN_FORMS, GainFunction
from dptco.graph import Topology, TopologyError
from dptco.objective import ObjectiveError, QuadraticObjective
from dptco.plant import PARAMETER_BOX, ManipulatorParams, PlantBounds, estimate_bounds
from dptco.sim import NetworkState, Scenario, SimSettings

logger = logging.getLogger(__name__)

# Load environment variables from .env file
try:
    from dotenv import load_dotenv
    load_dotenv()
except ImportError:
    pass

CONSERVATION_TOL = 1e-12
JOINTS = 2

_HEXAGON = [[1.0, 0.0], [0.5, math.sqrt(3) / 2], [-0.5, math.sqrt(3) / 2],
            [-1.0, 0.0], [-0.5, -math.sqrt(3) / 2], [0.5, -math.sqrt(3) / 2]]
_INITIAL_Y = [[1.0, 1.0], [2.0, 2.0], [3.0, 3.0], [-2.0, -3.0], [-2.0, -2.0], [-3.0, -3.0]]


class ConfigError(ValueError):
    """Scenario file could not be parsed or violates an invariant."""


@dataclass
class GainConfig:
    form: str = "power"
    T: float = 2.0
    t0: float = 0.0
    m: float = 1.0
    scale: float = 5.0
    mu_cap: float = 1e9


@dataclass
class GraphConfig:
    kind: str = "ring"
    agents: int = 6
    # flat row-major list of N*N weights, or nested rows
    adjacency: Optional[List[Any]] = None


@dataclass
class ObjectiveConfig:
    s1: Any = 1.0
    s2: Any = 1.0
    d_star: List[float] = field(default_factory=lambda: [0.0, 0.0])
    omega: List[List[float]] = field(default_factory=lambda: [list(r) for r in _HEXAGON])
    anchor_from_initial: bool = True
    anchors: Optional[List[List[float]]] = None


@dataclass
class PlantConfig:
    theta: Any = field(default_factory=lambda: [1.301, 0.056, 0.296])
    bounds: Optional[Dict[str, float]] = None
    estimate_bounds: bool = False


@dataclass
class ControlConfig:
    c: float = 1.3
    iota: float = 2.44
    k1: Any = 5.0
    k2: Any = 30.0
    sigma: Any = 4.0
    theta_hat0: Any = field(default_factory=lambda: [2.0, 2.0, 2.0])


@dataclass
class InitialConfig:
    q: List[List[float]] = field(default_factory=lambda: [list(r) for r in _INITIAL_Y])
    qdot: Optional[Any] = None
    varpi: Optional[List[List[float]]] = None
    v: Optional[Any] = None


@dataclass
class SimConfig:
    h: float = 1e-4
    t_end: float = 5.0
    record_every: float = 1e-2
    dense_tail: int = 100
    abort_norm: float = 1e12
    adaptive_substeps: bool = True
    max_substeps: int = 4096
    stability_factor: float = 2.0
    seed: int = 0
    progress: bool = False


@dataclass
class DesignConfig:
    c_star: float = 1.0
    margin: float = 0.1


@dataclass
class LoggingConfig:
    level: str = "INFO"
    file_path: Optional[str] = None
    json: bool = True


@dataclass
class ScenarioConfig:
    gain: GainConfig = field(default_factory=GainConfig)
    graph: GraphConfig = field(default_factory=GraphConfig)
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    plant: PlantConfig = field(default_factory=PlantConfig)
    control: ControlConfig = field(default_factory=ControlConfig)
    initial: InitialConfig = field(default_factory=InitialConfig)
    sim: SimConfig = field(default_factory=SimConfig)
    design: DesignConfig = field(default_factory=DesignConfig)
    logging: LoggingConfig = field(default_factory=LoggingConfig)
    warnings: List[str] = field(default_factory=list, compare=False)

    @property
    def N(self) -> int:
        return self.graph.agents

    def to_dict(self) -> dict:
        data = asdict(self)
        data.pop("warnings")
        return data


_SECTIONS = {f.name: f.default_factory for f in fields(ScenarioConfig) if f.name != "warnings"}


def _section(name: str, cls, raw) -> Any:
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigError(f"Section '{name}' must be a mapping")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"Unknown keys in section '{name}': {unknown}")
    return cls(**raw)


def from_dict(data: Optional[dict]) -> ScenarioConfig:
    """Build and normalize a ScenarioConfig from parsed YAML."""
    data = data or {}
    if not isinstance(data, dict):
        raise ConfigError("Scenario file must contain a mapping at the top level")
    unknown = sorted(set(data) - set(_SECTIONS))
    if unknown:
        raise ConfigError(f"Unknown sections: {unknown}")
    try:
        sections = {name: _section(name, factory, data.get(name))
                    for name, factory in _SECTIONS.items()}
    except TypeError as e:
        raise ConfigError(f"Invalid section contents: {e}") from e
    config = ScenarioConfig(**sections)
    _normalize(config)
    config.warnings = _validate(config)
    return config


def _floats(value, what: str) -> np.ndarray:
    try:
        arr = np.asarray(value, dtype=float)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{what} must be numeric: {e}") from e
    if not np.all(np.isfinite(arr)):
        raise ConfigError(f"{what} must be finite")
    return arr


def _per_agent_scalar(value, N: int, what: str) -> List[float]:
    arr = _floats(value, what)
    if arr.ndim == 0:
        arr = np.full(N, float(arr))
    if arr.shape != (N,):
        raise ConfigError(f"{what} must have one entry per agent ({N}), got shape {arr.shape}")
    return [float(x) for x in arr]


def _per_agent_vector(value, N: int, width: int, what: str) -> List[List[float]]:
    arr = _floats(value, what)
    if arr.ndim == 1 and arr.shape == (width,):
        arr = np.tile(arr, (N, 1))
    elif arr.ndim == 0:
        arr = np.full((N, width), float(arr))
    if arr.shape != (N, width):
        raise ConfigError(f"{what} must be ({N}, {width}), got shape {arr.shape}")
    return arr.tolist()


def _normalize(config: ScenarioConfig):
    """Broadcast per-agent values to lists of floats, fill defaults."""
    N = config.graph.agents
    if not isinstance(N, int) or N < 1:
        raise ConfigError(f"graph.agents must be a positive integer, got {N!r}")

    obj = config.objective
    obj.s1 = _per_agent_scalar(obj.s1, N, "objective.s1")
    obj.s2 = _per_agent_scalar(obj.s2, N, "objective.s2")
    obj.d_star = [float(x) for x in _floats(obj.d_star, "objective.d_star").ravel()]
    obj.omega = _per_agent_vector(obj.omega, N, JOINTS, "objective.omega")
    if obj.anchors is not None:
        obj.anchors = _per_agent_vector(obj.anchors, N, JOINTS, "objective.anchors")

    config.plant.theta = _per_agent_vector(config.plant.theta, N, 3, "plant.theta")

    ctl = config.control
    for name in ("c", "iota"):
        setattr(ctl, name, float(_floats(getattr(ctl, name), f"control.{name}")))
    ctl.k1 = _per_agent_scalar(ctl.k1, N, "control.k1")
    ctl.k2 = _per_agent_scalar(ctl.k2, N, "control.k2")
    ctl.sigma = _per_agent_scalar(ctl.sigma, N, "control.sigma")
    ctl.theta_hat0 = _per_agent_vector(ctl.theta_hat0, N, 3, "control.theta_hat0")

    init = config.initial
    init.q = _per_agent_vector(init.q, N, JOINTS, "initial.q")
    init.qdot = _per_agent_vector(0.0 if init.qdot is None else init.qdot, N, JOINTS,
                                  "initial.qdot")
    init.v = _per_agent_vector(0.0 if init.v is None else init.v, N, JOINTS, "initial.v")
    if init.varpi is None:
        init.varpi = (np.asarray(init.q) - np.asarray(obj.omega)).tolist()
    else:
        init.varpi = _per_agent_vector(init.varpi, N, JOINTS, "initial.varpi")

    for name in ("T", "t0", "m", "scale", "mu_cap"):
        setattr(config.gain, name, float(getattr(config.gain, name)))
    for name in ("h", "t_end", "record_every", "abort_norm", "stability_factor"):
        setattr(config.sim, name, float(getattr(config.sim, name)))
    config.design.c_star = float(config.design.c_star)
    config.design.margin = float(config.design.margin)


def _validate(config: ScenarioConfig) -> List[str]:
    """Hard invariants raise ConfigError; policy issues come back as warnings."""
    N = config.N
    if config.gain.form not in GAIN_FORMS:
        raise ConfigError(f"gain.form must be one of {GAIN_FORMS}, got '{config.gain.form}'")
    gain = _gain(config)

    if len(config.objective.d_star) != JOINTS:
        raise ConfigError(f"objective.d_star must have {JOINTS} entries")
    v_sum = np.asarray(config.initial.v).sum(axis=0)
    if np.linalg.norm(v_sum) > CONSERVATION_TOL:
        raise ConfigError(f"initial.v must sum to zero across agents (sum = {v_sum.tolist()})")

    top = _topology(config)
    if not top.is_connected():
        raise ConfigError("Communication graph is disconnected")

    sim = config.sim
    if not sim.h > 0:
        raise ConfigError(f"sim.h must be positive, got {sim.h}")
    if not sim.t_end > config.gain.t0:
        raise ConfigError(f"sim.t_end ({sim.t_end}) must exceed t0 ({config.gain.t0})")
    if not sim.record_every > 0 or sim.dense_tail < 0 or sim.max_substeps < 1:
        raise ConfigError("sim.record_every > 0, sim.dense_tail >= 0, sim.max_substeps >= 1 required")
    if not config.design.c_star > 0:
        raise ConfigError(f"design.c_star must be positive, got {config.design.c_star}")

    try:
        gains = _gains(config)
    except ValueError as e:
        raise ConfigError(str(e)) from e

    warnings = gains.compliance_warnings(gain.b_tilde)
    for i, theta in enumerate(config.plant.theta):
        if not ManipulatorParams.from_sequence(theta).in_box(PARAMETER_BOX):
            warnings.append(f"Agent {i} parameters {theta} lie outside {PARAMETER_BOX}")
    if gain.form != "constant" and gain.b < 1:
        warnings.append(f"b = mu(t0) = {gain.b:.6g} is below 1")
    for message in warnings:
        logger.warning(message)
    return warnings


def _gain(config: ScenarioConfig) -> GainFunction:
    g = config.gain
    try:
        return GainFunction(form=g.form, T=g.T, t0=g.t0, m=g.m, scale=g.scale, mu_cap=g.mu_cap)
    except ValueError as e:
        raise ConfigError(f"Invalid gain: {e}") from e


def _topology(config: ScenarioConfig) -> Topology:
    N, kind = config.N, config.graph.kind
    try:
        if kind == "ring":
            return Topology.ring(N)
        if kind == "complete":
            return Topology.complete(N)
        if kind == "custom":
            if config.graph.adjacency is None:
                raise ConfigError("graph.kind 'custom' needs graph.adjacency")
            adjacency = np.asarray(config.graph.adjacency, dtype=float)
            if adjacency.ndim == 1:
                return Topology.from_flat(N, adjacency.tolist())
            return Topology(adjacency)
    except TopologyError as e:
        raise ConfigError(f"Invalid graph: {e}") from e
    raise ConfigError(f"graph.kind must be ring, complete or custom, got '{kind}'")


def _gains(config: ScenarioConfig) -> ControlGains:
    ctl = config.control
    return ControlGains(c=ctl.c, iota=ctl.iota, k1=ctl.k1, k2=ctl.k2, sigma=ctl.sigma)


def _bounds(config: ScenarioConfig):
    if config.plant.bounds is not None:
        try:
            shared = PlantBounds(**config.plant.bounds)
        except TypeError as e:
            raise ConfigError(f"plant.bounds: {e}") from e
    elif config.plant.estimate_bounds:
        shared = estimate_bounds(seed=config.sim.seed)
    else:
        shared = PlantBounds()
    return tuple(shared for _ in range(config.N))


def build_scenario(config: ScenarioConfig) -> Scenario:
    """Turn a validated config into arrays and model objects."""
    obj = config.objective
    anchors = obj.anchors
    if obj.anchor_from_initial or anchors is None:
        anchors = config.initial.q
    try:
        objective = QuadraticObjective(s1=obj.s1, s2=obj.s2, d_star=obj.d_star,
                                       anchors=anchors, omega=obj.omega)
    except ObjectiveError as e:
        raise ConfigError(f"Invalid objective: {e}") from e

    init = config.initial
    initial = NetworkState(
        t=config.gain.t0,
        q=np.asarray(init.q, dtype=float),
        qdot=np.asarray(init.qdot, dtype=float),
        varpi=np.asarray(init.varpi, dtype=float),
        v=np.asarray(init.v, dtype=float),
        theta_hat=np.asarray(config.control.theta_hat0, dtype=float),
    )
    s = config.sim
    settings = SimSettings(h=s.h, t_end=s.t_end, record_every=s.record_every,
                           dense_tail=s.dense_tail, abort_norm=s.abort_norm,
                           adaptive_substeps=s.adaptive_substeps, max_substeps=s.max_substeps,
                           stability_factor=s.stability_factor, progress=s.progress)
    return Scenario(gain=_gain(config), topology=_topology(config), objective=objective,
                    theta=np.asarray(config.plant.theta, dtype=float), gains=_gains(config),
                    initial=initial, settings=settings, bounds=_bounds(config),
                    c_star=config.design.c_star)


def _apply_env_overrides(config: ScenarioConfig):
    level = os.getenv("DPTCO_LOG_LEVEL")
    if level:
        config.logging.level = level.upper()
    log_file = os.getenv("DPTCO_LOG_FILE")
    if log_file:
        config.logging.file_path = log_file


def load_config(path) -> ScenarioConfig:
    """Parse and validate a scenario YAML file.

    Args:
        path: scenario file

    Returns:
        normalized ScenarioConfig (warnings attached)
    """
    try:
        with open(path, "r") as f:
            data = yaml.safe_load(f)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        where = f"{path}:{mark.line + 1}" if mark is not None else str(path)
        problem = getattr(e, "problem", None) or str(e)
        raise ConfigError(f"{where}: {problem}") from e
    config = from_dict(data)
    _apply_env_overrides(config)
    logger.debug(f"Loaded scenario from {path} ({config.N} agents)")
    return config


def dump_config(config: ScenarioConfig, path):
    with open(path, "w") as f:
        yaml.safe_dump(config.to_dict(), f, sort_keys=False, default_flow_style=None)
