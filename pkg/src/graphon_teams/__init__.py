"""Feedback Nash equilibria of linear-quadratic games between two graphon teams."""

from .graphon import (Constant, DiscretizedOperator, Grid, NamedAnalytic, StepFunction,
                      apply, discretize, evaluate_kernel, operator_norm)
from .game import (AssembledGame, GameSpec, NoiseSpec, assemble, assemble_cost_blocks,
                   h4_operator_norms)
from .riccati import (RiccatiSolution, SolverConfig, best_response_riccati, compute_q,
                      epsilon_continuation, existence_bound, feedback_gain, solve_block_form,
                      solve_coupled, solve_decoupled, value_at)
from .simulate import (CostEstimate, PathConfig, StrategyPerturbation, deviation_test,
                       estimate_costs, simulate_closed_loop)

__version__ = "0.1.0"
