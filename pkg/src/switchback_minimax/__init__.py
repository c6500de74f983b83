"""Minimax optimal switchback designs with spillover and carryover effects.

Design search, two-stage assignment simulation, Horvitz-Thompson
estimation with exact and conservative variances, the carryover-order
test, and an enumeration oracle for small instances.
"""

__version__ = "0.1.0"

from .design import DecisionContext, Design, design_from_ab, iter_feasible_designs, make_standard_design
from .engine import (
    AssignmentPolicy,
    CenterSpec,
    Model1,
    Model2,
    Model2Spec,
    PathTable,
    Trajectory,
    derive_seed,
    draw_assignment,
    run_multicenter,
    run_trial,
)
from .estimation import ESTIMANDS, EffectEstimate, estimate_all, ht_direct, ht_spillover, pooled_estimate, true_effects
from .exceptions import (
    InfeasibleError,
    InstanceTooLargeError,
    RegimeIndeterminateError,
    SwitchbackError,
    ValidationError,
)
from .minimax import (
    ExperimentParams,
    closed_form_design,
    gamma_coefficients,
    optimal_design,
    optimal_selection_probability,
    theta_star_formula,
    worst_case_objective_closed,
    worst_case_objective_general,
)
from .simulate import ScenarioConfig, run_scenario
from .variance import (
    block_decompose,
    confidence_interval,
    conservative_variance_estimate,
    exact_variance,
    multicenter_variance,
    order_wald_test,
    variance_upper_bound,
)

__all__ = [
    "AssignmentPolicy", "CenterSpec", "DecisionContext", "Design", "ESTIMANDS", "EffectEstimate",
    "ExperimentParams", "InfeasibleError", "InstanceTooLargeError", "Model1", "Model2", "Model2Spec",
    "PathTable", "RegimeIndeterminateError", "ScenarioConfig", "SwitchbackError", "Trajectory",
    "ValidationError", "block_decompose", "closed_form_design", "confidence_interval",
    "conservative_variance_estimate", "derive_seed", "design_from_ab", "draw_assignment", "estimate_all",
    "exact_variance", "gamma_coefficients", "ht_direct", "ht_spillover", "iter_feasible_designs",
    "make_standard_design", "multicenter_variance", "optimal_design", "optimal_selection_probability",
    "order_wald_test", "pooled_estimate", "run_multicenter", "run_scenario", "run_trial",
    "theta_star_formula", "true_effects", "variance_upper_bound", "worst_case_objective_closed",
    "worst_case_objective_general",
]
