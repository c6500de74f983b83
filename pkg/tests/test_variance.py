import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from switchback_minimax._normal import norm_ppf, two_sided_pvalue
from switchback_minimax.design import Design, make_standard_design
from switchback_minimax.engine import AssignmentPolicy, Model2, Model2Spec, PathTable, Trajectory, run_trial
from switchback_minimax.estimation import ESTIMANDS, constant_path_tables
from switchback_minimax.exceptions import ValidationError
from switchback_minimax.minimax import ExperimentParams
from switchback_minimax.oracle import Enumeration, exact_moments_all
from switchback_minimax.variance import (
    block_decompose,
    block_structure,
    confidence_interval,
    conservative_variance_batch,
    conservative_variance_estimate,
    exact_variance,
    multicenter_variance,
    order_wald_test,
    variance_upper_bound,
)

Q1, Q2 = 0.6, 0.4
TINY = [(4, (1, 3), 1), (4, (1, 3), 2), (8, (1, 3, 4, 5, 6, 7), 1), (8, (1, 3, 4, 5, 6, 7), 2), (8, (1, 4, 6), 2)]


def tables_for(model, N, T):
    return constant_path_tables(model, N, T, Q1, Q2)


def test_block_structure_example():
    st_ = block_structure(Design(4, (1, 3)), 1)
    assert st_.K == 4
    assert st_.starts.tolist() == [2, 3] and st_.ends.tolist() == [2, 4]
    tabs = {(q, z): np.arange(1.0, 5.0)[None, :] for q in (Q1, Q2) for z in (0, 1)}
    blocks = block_decompose(Design(4, (1, 3)), 1, tabs)
    assert blocks.head[(Q1, 1)][0].tolist() == [0.0]  # first head is empty
    assert blocks.full[(Q1, 1)][:, 0].tolist() == [2.0, 7.0]


def test_block_sums_constant_outcomes():
    d = make_standard_design("star1", 16, 2)
    tabs = {(q, z): np.full((3, 16), 2.5) for q in (Q1, Q2) for z in (0, 1)}
    blocks = block_decompose(d, 2, tabs)
    lengths = blocks.structure.ends - blocks.structure.starts + 1
    np.testing.assert_allclose(blocks.full[(Q1, 0)], 2.5 * np.broadcast_to(lengths[:, None], (len(lengths), 3)))


def test_not_block_structured():
    with pytest.raises(ValidationError, match="block-structured"):
        block_structure(Design(10, (1, 3, 7)), 1)


@pytest.mark.parametrize("T, pts, N", TINY)
def test_exact_variance_matches_enumeration(T, pts, N):
    rng = np.random.default_rng(T * 10 + N + len(pts))
    d = Design(T, pts)
    table = PathTable.random(N, T, 1, Q1, rng)
    mom = exact_moments_all(Enumeration(AssignmentPolicy(d), table, N), 1)
    blocks = block_decompose(d, 1, tables_for(table, N, T))
    params = ExperimentParams(N, T, 1)
    for n in ESTIMANDS:
        assert exact_variance(blocks, params, n) == pytest.approx(mom[n].variance, abs=1e-10)


def test_bound_dominates_exact_on_random_tables():
    rng = np.random.default_rng(2024)
    strict = total = 0
    for k in range(200):
        T, pts, N = TINY[k % len(TINY)]
        d = Design(T, pts)
        blocks = block_decompose(d, 1, tables_for(PathTable.random(N, T, 1, Q1, rng), N, T))
        params = ExperimentParams(N, T, 1)
        for n in ESTIMANDS:
            ex, ub = exact_variance(blocks, params, n), variance_upper_bound(blocks, params, n)
            assert ub >= ex - 1e-12
            strict += ub > ex + 1e-10
            total += 1
    assert strict / total > 0.95


def test_bound_equality_pattern():
    """Y(q, 1) = Y(q, 0) per unit and time, and Y_2 = Y_3 on {1, 3}, T = 4, p = 1."""
    rng = np.random.default_rng(5)
    d = Design(4, (1, 3))
    params = ExperimentParams(1, 4, 1)
    tabs = {}
    for q in (Q1, Q2):
        y = rng.uniform(-1, 1, size=(1, 4))
        y[:, 2] = y[:, 1]
        tabs[(q, 1)] = y
        tabs[(q, 0)] = y.copy()
    blocks = block_decompose(d, 1, tabs)
    for n in ("direct_q1", "direct_q2"):
        assert variance_upper_bound(blocks, params, n) - exact_variance(blocks, params, n) == pytest.approx(0, abs=1e-10)
    # the sign-flipped pattern leaves slack
    flipped = dict(tabs)
    flipped[(Q1, 0)] = -tabs[(Q1, 1)]
    fb = block_decompose(d, 1, flipped)
    assert variance_upper_bound(fb, params, "direct_q1") > exact_variance(fb, params, "direct_q1") + 1e-6


def test_zero_outcomes():
    d = Design(8, (1, 3, 4, 5, 6, 7))
    params = ExperimentParams(2, 8, 1)
    blocks = block_decompose(d, 1, {(q, z): np.zeros((2, 8)) for q in (Q1, Q2) for z in (0, 1)})
    pol = AssignmentPolicy(d)
    tr = run_trial(pol, PathTable(np.zeros((2, 8, 4, 4)), Q1), 2, 0)
    for n in ESTIMANDS:
        assert exact_variance(blocks, params, n) == 0.0
        assert variance_upper_bound(blocks, params, n) == 0.0
        assert conservative_variance_estimate(tr, d, params, n) == 0.0


@pytest.mark.parametrize("T, pts, N", TINY[:3])
def test_estimator_unbiased_for_bound_by_enumeration(T, pts, N):
    rng = np.random.default_rng(77 + T + N)
    d = Design(T, pts)
    pol = AssignmentPolicy(d)
    table = PathTable.random(N, T, 1, Q1, rng)
    m1, _ = Enumeration(pol, table, N).moments(lambda Q, Z, Y: conservative_variance_batch(d, 1, pol, Q, Z, Y))
    blocks = block_decompose(d, 1, tables_for(table, N, T))
    params = ExperimentParams(N, T, 1)
    for k, n in enumerate(ESTIMANDS):
        assert m1[k] == pytest.approx(variance_upper_bound(blocks, params, n), abs=1e-10)


def test_estimator_unbiased_monte_carlo():
    """N=2, T=8: mean of 2000 estimates within 3 MC SE of the bound."""
    rng = np.random.default_rng(31)
    d = Design(8, (1, 3, 4, 5, 6, 7))
    pol = AssignmentPolicy(d)
    table = PathTable.random(2, 8, 1, Q1, rng)
    Q, Z, Y = [], [], []
    for r in range(2000):
        tr = run_trial(pol, table, 2, np.random.default_rng([31, r]))
        Q.append(tr.Q), Z.append(tr.Z), Y.append(tr.Y)
    est = conservative_variance_batch(d, 1, pol, np.array(Q), np.array(Z), np.array(Y))
    blocks = block_decompose(d, 1, tables_for(table, 2, 8))
    params = ExperimentParams(2, 8, 1)
    for k, n in enumerate(ESTIMANDS):
        se = est[:, k].std(ddof=1) / math.sqrt(len(est))
        assert abs(est[:, k].mean() - variance_upper_bound(blocks, params, n)) < 3 * se


def test_single_estimate_matches_batch():
    rng = np.random.default_rng(8)
    d = make_standard_design("star1", 16, 2)
    pol = AssignmentPolicy(d)
    tr = run_trial(pol, PathTable.random(3, 16, 2, Q1, rng), 3, 4)
    batch = conservative_variance_batch(d, 2, pol, tr.Q, tr.Z, tr.Y)
    params = ExperimentParams(3, 16, 2)
    for k, n in enumerate(ESTIMANDS):
        assert conservative_variance_estimate(tr, d, params, n) == pytest.approx(batch[k], rel=1e-12, abs=1e-14)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_unit_relabelling_invariance(seed):
    rng = np.random.default_rng(seed)
    d = Design(8, (1, 3, 4, 5, 6, 7))
    table = PathTable.random(3, 8, 1, Q1, rng)
    tabs = tables_for(table, 3, 8)
    perm = rng.permutation(3)
    params = ExperimentParams(3, 8, 1)
    a = block_decompose(d, 1, tabs)
    b = block_decompose(d, 1, {c: v[perm] for c, v in tabs.items()})
    pol = AssignmentPolicy(d)
    tr = run_trial(pol, table, 3, rng)
    trp = Trajectory(tr.Q, tr.Z[perm], tr.Y[perm])
    for n in ESTIMANDS:
        assert exact_variance(a, params, n) == pytest.approx(exact_variance(b, params, n), rel=1e-12, abs=1e-14)
        assert variance_upper_bound(a, params, n) == pytest.approx(variance_upper_bound(b, params, n), rel=1e-12, abs=1e-14)
        assert conservative_variance_estimate(tr, d, params, n) == pytest.approx(
            conservative_variance_estimate(trp, d, params, n), rel=1e-10, abs=1e-12)


def test_requires_half_selection():
    d = Design(4, (1, 3))
    blocks = block_decompose(d, 1, {(q, z): np.ones((1, 4)) for q in (Q1, Q2) for z in (0, 1)})
    with pytest.raises(ValidationError, match="r_q1"):
        exact_variance(blocks, ExperimentParams(1, 4, 1, r_q1=0.3), "direct_q1")


def test_missing_table():
    blocks = block_decompose(Design(4, (1, 3)), 1, {(Q1, 1): np.ones((1, 4))})
    with pytest.raises(ValidationError, match="missing"):
        exact_variance(blocks, ExperimentParams(1, 4, 1), "direct_q1")


def test_overspecified_order_costs_variance():
    """Model 2 (m = 2) at N=10, T=480: star1 built for p=3 has larger exact variance than for p=2."""
    model = Model2(Model2Spec(), 10, 480, Q1, 0)
    tabs = tables_for(model, 10, 480)
    out = {}
    for p in (2, 3):
        d = make_standard_design("star1", 480, p)
        out[p] = {n: exact_variance(block_decompose(d, p, tabs), ExperimentParams(10, 480, p), n) for n in ESTIMANDS}
    for n in ESTIMANDS:
        assert out[3][n] > out[2][n]
    assert out[2]["direct_q1"] == pytest.approx(3.2, abs=0.2)


def test_confidence_interval():
    assert confidence_interval(1.5, 0.0) == (1.5, 1.5)
    lo, hi = confidence_interval(0.0, 4.0, 0.05)
    assert hi == pytest.approx(1.959964 * 2, abs=1e-6) and lo == -hi
    assert confidence_interval(0.0, -1.0) == (0.0, 0.0)
    assert confidence_interval(0.0, 1.0, 0.01)[1] > confidence_interval(0.0, 1.0, 0.05)[1]
    with pytest.raises(ValidationError):
        confidence_interval(0.0, 1.0, 1.5)


@settings(max_examples=200, deadline=None)
@given(st.floats(1e-12, 1 - 1e-12))
def test_norm_ppf_against_scipy(u):
    assert norm_ppf(u) == pytest.approx(stats.norm.ppf(u), abs=1e-9, rel=1e-9)


def test_two_sided_pvalue():
    assert two_sided_pvalue(1.959963984540054) == pytest.approx(0.05, abs=1e-12)
    assert two_sided_pvalue(0.0) == pytest.approx(1.0)


def test_multicenter_variance():
    assert multicenter_variance([1.0, 1.0], [0.5, 0.5]) == pytest.approx(0.5)
    assert multicenter_variance([3.0], [1.0]) == 3.0
    with pytest.raises(ValidationError):
        multicenter_variance([1.0, 2.0], [1.0])


def _four(x):
    return dict.fromkeys(ESTIMANDS, x)


def test_order_test_equal_points():
    res = order_wald_test(_four(1.0), _four(1.0), _four(0.5), _four(0.5))
    assert all(s == 0 for s in res.statistics.values())
    assert not res.reject_overall and not any(res.reject.values())


def test_order_test_rejects_and_bonferroni():
    e1 = _four(0.0)
    e2 = dict(_four(0.0), direct_q1=2.3)
    res = order_wald_test(e1, e2, _four(0.5), _four(0.5))
    assert res.statistics["direct_q1"] == pytest.approx(-2.3)
    assert res.reject["direct_q1"] and res.reject_overall
    bon = order_wald_test(e1, e2, _four(0.5), _four(0.5), combine="bonferroni")
    assert bon.overall_critical_value == pytest.approx(stats.norm.ppf(1 - 0.05 / 8))
    assert bon.reject["direct_q1"] and not bon.reject_overall


def test_order_test_errors():
    with pytest.raises(ValidationError, match="var_p1"):
        order_wald_test(_four(0.0), _four(1.0), _four(0.0), _four(0.0))
    with pytest.raises(ValidationError, match="differ"):
        order_wald_test(_four(0.0), {"direct_q1": 0.0}, _four(1.0), _four(1.0))
    with pytest.raises(ValidationError, match="combine"):
        order_wald_test(_four(0.0), _four(0.0), _four(1.0), _four(1.0), combine="holm")
