"""Convergent message passing for convex free energies on factor graphs."""

from .block_engine import BlockProblem, DualState, run_parallel, run_sequential
from .bp import sum_product_bp
from .convex_mp import (BeliefSet, FreeEnergySpec, MessageSet, beliefs_from_messages,
                        free_energy, free_energy_gradient, make_spec, parallel_step, run,
                        sequential_sweep)
from .counting import (EPS_POS, CountingNumbers, check_admissible, derive_constants,
                       fit_bethe, fit_convex_l2, fit_convex_maxent, fit_trw,
                       solve_admissible, trw_pairwise_counting)
from .exact import brute_force_marginals, elimination_marginals, projected_minimize
from .factor_graph import (FactorGraph, build_graph, ising_grid, parse_model, random_graph,
                           read_model, serialize_model, write_model)

__all__ = [
    "BeliefSet", "BlockProblem", "CountingNumbers", "DualState", "EPS_POS", "FactorGraph",
    "FreeEnergySpec", "MessageSet", "beliefs_from_messages", "brute_force_marginals",
    "build_graph", "check_admissible", "derive_constants", "elimination_marginals",
    "fit_bethe", "fit_convex_l2", "fit_convex_maxent", "fit_trw", "free_energy",
    "free_energy_gradient", "ising_grid", "make_spec", "parallel_step", "parse_model",
    "projected_minimize", "random_graph", "read_model", "run", "run_parallel",
    "run_sequential", "sequential_sweep", "serialize_model", "solve_admissible",
    "sum_product_bp", "trw_pairwise_counting", "write_model",
]

__version__ = "0.1.0"
