import numpy as np
import pytest

from switchback_minimax.design import DecisionContext, Design, make_standard_design
from switchback_minimax.engine import AssignmentPolicy, Model1, PathTable
from switchback_minimax.estimation import ESTIMANDS
from switchback_minimax.exceptions import InstanceTooLargeError, ValidationError
from switchback_minimax.minimax import ExperimentParams, optimal_design, worst_case_objective_general
from switchback_minimax.oracle import (
    CornerModel,
    Enumeration,
    exact_moments_all,
    exhaustive_design_search,
    misspecified_target,
    worst_case_corner_search,
)
from switchback_minimax.verify import run_oracle_suite


def test_size_guard():
    pol = AssignmentPolicy(make_standard_design("independent", 12, 0))
    with pytest.raises(InstanceTooLargeError, match="2\\^"):
        Enumeration(pol, Model1(), 2)
    with pytest.raises(InstanceTooLargeError):
        exhaustive_design_search(19, ExperimentParams(20, 19, 1))


def test_atom_probabilities_by_hand():
    """One unit, one decision point: P(Q=q1, Z=1) = r q1 etc."""
    enum = Enumeration(AssignmentPolicy(Design(2, (1,)), r_q1=0.3), Model1(), 1)
    probs = sorted(a.probability for a in enum.atoms())
    assert probs == pytest.approx(sorted([0.3 * 0.6, 0.3 * 0.4, 0.7 * 0.4, 0.7 * 0.6]))


def test_model1_exact_risk_zero_bias():
    d = Design(4, (1, 3))
    mom = exact_moments_all(Enumeration(AssignmentPolicy(d), Model1(), 2), 1)
    for n in ESTIMANDS:
        assert mom[n].expectation == pytest.approx(mom[n].target, abs=1e-12)
        assert mom[n].risk == pytest.approx(mom[n].variance)
    assert mom["direct_q1"].target == pytest.approx(2.0)
    assert mom["spillover_1"].target == pytest.approx(0.0)


@pytest.mark.parametrize("N", [1, 2])
def test_corner_search_matches_analytic(N):
    d = Design(4, (1, 3))
    params = ExperimentParams(N, 4, 1)
    res = worst_case_corner_search(d, params)
    assert len(res.values) == 16
    assert res.value == pytest.approx(worst_case_objective_general(d, params), rel=1e-10)


def test_corner_model_realize():
    m = CornerModel({(0.6, 1): 1.0, (0.6, 0): -1.0, (0.4, 1): 2.0, (0.4, 0): -2.0}, 0.6, 1, 3)
    Y = m.realize(np.array([0.6, 0.4, 0.4]), np.array([[1, 0, 1]]))
    assert Y.tolist() == [[1.0, -2.0, 2.0]]


@pytest.mark.parametrize("T", [10, 12, 14, 16])
@pytest.mark.parametrize("p", [1, 2])
@pytest.mark.parametrize("psi", [0.0, 0.5, 1.0])
def test_search_matches_exhaustive(T, p, psi):
    params = ExperimentParams(20, T, p, psi_d=psi)
    brute = exhaustive_design_search(T, params)
    found = worst_case_objective_general(optimal_design(params).design, params)
    assert found <= brute.objective * (1 + 1e-9)
    assert brute.n_designs > 0


def test_exhaustive_T16_example():
    params = ExperimentParams(20, 16, 2)
    brute = exhaustive_design_search(16, params)
    assert brute.objective == pytest.approx(worst_case_objective_general(Design(16, (1, 6, 9, 12)), params), rel=1e-9)


def test_search_matches_exhaustive_T18():
    for p in (1, 2):
        params = ExperimentParams(20, 18, p)
        brute = exhaustive_design_search(18, params)
        assert worst_case_objective_general(optimal_design(params).design, params) <= brute.objective * (1 + 1e-9)


def test_misspecified_target_conventions():
    """Order-2 carryover estimated at p = 1 on star1 for T = 8."""
    rng = np.random.default_rng(12)
    d = Design(8, (1, 3, 4, 5, 6, 7))
    pol = AssignmentPolicy(d)
    table = PathTable.random(1, 8, 2, 0.6, rng)
    enum = Enumeration(pol, table, 1)
    mom = exact_moments_all(enum, 1)
    gaps = []
    for n in ESTIMANDS:
        pc = misspecified_target(enum, 1, n, "path_conditioned")
        lit = misspecified_target(enum, 1, n, "literal")
        assert mom[n].expectation == pytest.approx(pc, abs=1e-12)
        gaps.append(abs(mom[n].expectation - lit))
    assert max(gaps) > 1e-3


def test_misspecified_target_equals_estimand_when_order_matches():
    rng = np.random.default_rng(3)
    d = Design(6, (1, 3, 5))
    table = PathTable.random(1, 6, 1, 0.6, rng)
    enum = Enumeration(AssignmentPolicy(d), table, 1)
    mom = exact_moments_all(enum, 1)
    for n in ESTIMANDS:
        assert misspecified_target(enum, 1, n, "literal") == pytest.approx(mom[n].target, abs=1e-12)


def test_misspecified_bad_convention():
    enum = Enumeration(AssignmentPolicy(Design(4, (1, 3))), Model1(), 1)
    with pytest.raises(ValidationError):
        misspecified_target(enum, 1, "direct_q1", "other")


def test_oracle_suite_passes():
    results = run_oracle_suite(0)
    assert len(results) == 6
    for r in results:
        assert r.passed, r.line()
