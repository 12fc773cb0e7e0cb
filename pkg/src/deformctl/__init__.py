"""Closed-loop shape control of a pneumatic membrane toward a target surface."""
from .config import ConfigError, ExperimentConfig, load_config, parse_config
from .experiments import oracle_grid, run_ablation, run_fixed_step_baseline, run_solve
from .solver import SolverConfig, SolveResult, hybrid_solve

__all__ = [
    "ConfigError", "ExperimentConfig", "load_config", "parse_config",
    "oracle_grid", "run_ablation", "run_fixed_step_baseline", "run_solve",
    "SolverConfig", "SolveResult", "hybrid_solve",
]
