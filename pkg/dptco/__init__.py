# DPTCO Package
# Distributed prescribed-time convex optimization for networks of uncertain
# Euler-Lagrange manipulators.

from dptco.gain import GainFunction, eval_mu, eval_mu_dot, eval_mu_tilde, kappa, verify_class_KT
from dptco.graph import Topology, laplacian, spectrum, relative_output
from dptco.objective import QuadraticObjective, local_gradient, constants, optimum_oracle
from dptco.plant import ManipulatorParams, PlantBounds, mass_matrix, coriolis_matrix, regression
from dptco.controller import ControlGains, Phase
from dptco.design import derive_constants, synthesize, verify_design, smallgain_check
from dptco.sim import NetworkState, Scenario, run

__version__ = "0.1.0"
