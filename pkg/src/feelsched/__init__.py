"""Energy-aware device scheduling and resource allocation for federated
edge learning with streaming data."""
from .system import SystemConfig, load_config
from .numerics import RngStream, SolverOptions, Source, lambert_w_m1, solve_barrier
from .harness import ExperimentSpec, compare_policies, load_spec, run_experiment
from .convergence import BenchmarkConfig, ConvergenceParams, verify_convergence

__all__ = [
    "SystemConfig", "load_config", "RngStream", "SolverOptions", "Source", "lambert_w_m1", "solve_barrier",
    "ExperimentSpec", "compare_policies", "load_spec", "run_experiment",
    "BenchmarkConfig", "ConvergenceParams", "verify_convergence",
]
