"""Generalized shortest-path routing for the bridge queueing network.

Submodules
----------
network
    Topology, cuts and the (beta, gamma) stability region.
plq
    Piecewise-linear path costs, bottlenecks and weight tiers.
policy
    GSP, simple shortest-path and Bernoulli routing/scheduling.
sim
    Bernoulli-step and event-driven simulators, rate estimation.
learn
    Least-squares parameter fits, policy iteration, Bernoulli grid search.
analysis
    Lyapunov drift, drift certificates and policy comparison.
"""

from .analysis import certify_drift, generator_drift, lyapunov_v, nast
from .errors import ConfigInvalid, GspError, InfeasibleParams, NotStabilizable
from .learn import fit_beta, fit_gamma, optimize_bernoulli, policy_iteration
from .network import REFERENCE_SPEC, NetworkSpec, feasible_region, stability_constants
from .plq import GspParams, bottlenecks, q_values
from .policy import Policy, gsp_route, gsp_schedule
from .sim import SimConfig, average_system_time, run_episode

__version__ = "0.1.0"

__all__ = [
    "ConfigInvalid",
    "GspError",
    "GspParams",
    "InfeasibleParams",
    "NetworkSpec",
    "NotStabilizable",
    "REFERENCE_SPEC",
    "Policy",
    "SimConfig",
    "average_system_time",
    "bottlenecks",
    "certify_drift",
    "feasible_region",
    "fit_beta",
    "fit_gamma",
    "generator_drift",
    "gsp_route",
    "gsp_schedule",
    "lyapunov_v",
    "nast",
    "optimize_bernoulli",
    "policy_iteration",
    "q_values",
    "run_episode",
    "stability_constants",
]
