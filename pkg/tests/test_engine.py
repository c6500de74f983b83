import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from switchback_minimax.design import Design, make_standard_design
from switchback_minimax.engine import (
    AssignmentPolicy,
    CenterSpec,
    Model1,
    Model2,
    Model2Spec,
    PathTable,
    Trajectory,
    center_weights,
    derive_seed,
    draw_assignment,
    realize_outcomes,
    run_multicenter,
    run_trial,
)
from switchback_minimax.exceptions import ValidationError


def test_degenerate_selection():
    Q, _ = draw_assignment(AssignmentPolicy(Design(10, (1, 4, 8)), r_q1=1.0), 3, 0)
    assert np.all(Q == 0.6)


def test_persistence_within_intervals():
    pol = AssignmentPolicy(Design(4, (1, 3)))
    for seed in range(20):
        Q, Z = draw_assignment(pol, 5, seed)
        assert Q[0] == Q[1] and Q[2] == Q[3]
        assert np.array_equal(Z[:, 0], Z[:, 1]) and np.array_equal(Z[:, 2], Z[:, 3])


def test_unit_assignment_frequency():
    pol = AssignmentPolicy(Design(2, (1, 2)))
    Q, Z = draw_assignment(pol, 100_000, 11)
    for t in range(2):
        rate = Z[:, t].mean()
        sd = math.sqrt(Q[t] * (1 - Q[t]) / 100_000)
        assert abs(rate - Q[t]) < max(3 * sd, 0.01)


def test_selection_frequency():
    pol = AssignmentPolicy(make_standard_design("independent", 2000, 0), r_q1=0.3)
    Q, _ = draw_assignment(pol, 1, 3)
    assert abs((Q == 0.6).mean() - 0.3) < 3 * math.sqrt(0.21 / 2000)


def test_seed_required_and_reproducible():
    pol = AssignmentPolicy(Design(6, (1, 3, 5)))
    with pytest.raises(ValidationError, match="seed"):
        draw_assignment(pol, 2, None)
    a = run_trial(pol, Model1(), 3, 42)
    b = run_trial(pol, Model1(), 3, 42)
    assert np.array_equal(a.Q, b.Q) and np.array_equal(a.Z, b.Z) and np.array_equal(a.Y, b.Y)


def test_model1_values():
    pol = AssignmentPolicy(Design(8, (1, 4, 6)))
    tr = run_trial(pol, Model1(B=1.0), 4, 0)
    assert np.array_equal(tr.Y, np.where(tr.Z == 1, 1.0, -1.0))


def model2(N=1, T=8, noise=0.0, seed=0):
    return Model2(Model2Spec(noise_sd=noise), N, T, 0.6, seed)


def test_model2_constant_path_value():
    m = model2()
    assert m.eval(0, 8, [0.6] * 3, [1] * 3) == pytest.approx(math.log(8) + 9)
    Y = m.realize(np.full(8, 0.6), np.ones((1, 8), dtype=np.int8))
    assert Y[0, 7] == pytest.approx(math.log(8) + 9)
    # lags before t = 1 contribute nothing
    assert Y[0, 0] == pytest.approx(0.0 + 3)


def test_model2_direct_contrasts():
    m = model2()
    def y(q, z):
        return m.eval(0, 8, [q] * 3, [z] * 3)
    assert y(0.6, 1) - y(0.6, 0) == pytest.approx(6.0)
    assert y(0.4, 1) - y(0.4, 0) == pytest.approx(3.0)


def test_model2_noise_frozen():
    a, b = model2(N=3, noise=1.0, seed=5), model2(N=3, noise=1.0, seed=5)
    assert np.array_equal(a.eps, b.eps)
    assert not np.array_equal(a.eps, model2(N=3, noise=1.0, seed=6).eps)


def test_model2_spec_validation():
    with pytest.raises(ValidationError, match="delta_q"):
        Model2Spec(m=1, delta_q=(1.0,))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(0, 3))
def test_realize_matches_eval(seed, m):
    rng = np.random.default_rng(seed)
    T, N = 7, 2
    pol = AssignmentPolicy(Design(T, (1, 3, 4, 6)))
    Q, Z = draw_assignment(pol, N, rng)
    models = [Model2(Model2Spec(m=m, noise_sd=1.0), N, T, 0.6, seed), PathTable.random(N, T, m, 0.6, rng)]
    for model in models:
        Y = realize_outcomes(model, Q, Z)
        for i in range(N):
            for t in range(1, T + 1):
                lo = max(1, t - m)
                assert Y[i, t - 1] == pytest.approx(model.eval(i, t, Q[lo - 1:t], Z[i, lo - 1:t]))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_non_anticipative_and_finite_memory(seed):
    rng = np.random.default_rng(seed)
    T, N, m = 8, 2, 1
    model = PathTable.random(N, T, m, 0.6, rng)
    Q = rng.choice([0.6, 0.4], size=T)
    Z = rng.integers(0, 2, size=(N, T))
    Y = model.realize(Q, Z)
    t = int(rng.integers(1, T))  # 0-based cut
    Q2, Z2 = Q.copy(), Z.copy()
    Q2[t:] = rng.choice([0.6, 0.4], size=T - t)
    Z2[:, t:] = 1 - Z2[:, t:]
    assert np.array_equal(model.realize(Q2, Z2)[:, :t], Y[:, :t])
    # entries older than m+1 lags do not matter for the last period
    Q3, Z3 = Q.copy(), Z.copy()
    Q3[: T - m - 1] = 0.4
    Z3[:, : T - m - 1] = 0
    assert np.array_equal(model.realize(Q3, Z3)[:, -1], Y[:, -1])


def test_path_table_from_model_agrees():
    m = model2(N=2, T=5, noise=1.0, seed=1)
    table = PathTable.from_model(m, 2, 5, 0.6, 0.4)
    pol = AssignmentPolicy(Design(5, (1, 2, 4)))
    for seed in range(5):
        Q, Z = draw_assignment(pol, 2, seed)
        np.testing.assert_allclose(table.realize(Q, Z), m.realize(Q, Z))


def test_model1_bounded():
    tr = run_trial(AssignmentPolicy(Design(6, (1, 4))), Model1(B=2.5), 5, 1)
    assert np.abs(tr.Y).max() <= 2.5


def test_trajectory_csv_round_trip(tmp_path):
    tr = run_trial(AssignmentPolicy(Design(6, (1, 3, 5))), model2(N=3, T=6, noise=1.0), 3, 9)
    path = tmp_path / "tr.csv"
    text = tr.to_csv(path)
    assert text.splitlines()[0] == "unit,time,q,z,y"
    back = Trajectory.from_csv(path)
    assert np.array_equal(back.Q, tr.Q) and np.array_equal(back.Z, tr.Z) and np.array_equal(back.Y, tr.Y)


@pytest.mark.parametrize("text, msg", [
    ("a,b,c\n1,1,0.6,1,1\n", "header"),
    ("unit,time,q,z,y\n1,1,0.6,1\n", "malformed"),
    ("unit,time,q,z,y\n1,1,0.6,1,1\n1,1,0.6,1,1\n", "one row"),
    ("unit,time,q,z,y\n1,1,0.6,1,1\n2,1,0.4,1,1\n", "identical"),
    ("unit,time,q,z,y\n1,1,0.6,2,1\n", "0 or 1"),
])
def test_trajectory_csv_errors(text, msg):
    with pytest.raises(ValidationError, match=msg):
        Trajectory.from_csv(text)


def test_horizon_mismatch():
    tr = run_trial(AssignmentPolicy(Design(6, (1, 4))), Model1(), 2, 0)
    with pytest.raises(ValidationError, match="horizon mismatch"):
        tr.check_design(Design(8, (1, 4)))


def test_persistence_check():
    tr = Trajectory(np.array([0.6, 0.4]), np.array([[1, 1]]), np.zeros((1, 2)))
    with pytest.raises(ValidationError, match="constant between"):
        tr.check_design(Design(2, (1,)))


def test_multicenter_single_center_equals_trial():
    pol = AssignmentPolicy(Design(8, (1, 3, 6)))
    [tr] = run_multicenter([CenterSpec("a", 4, pol)], seed=3, rep=2)
    ref = run_trial(pol, Model1(), 4, derive_seed(3, 0, 2))
    assert np.array_equal(tr.Z, ref.Z) and np.array_equal(tr.Q, ref.Q)


def test_multicenter_table4_shape():
    pol = AssignmentPolicy(make_standard_design("star1", 24, 1))
    specs = [CenterSpec(f"c{g}", 5, pol) for g in range(48)]
    trs = run_multicenter(specs, seed=0)
    assert len(trs) == 48 and all(t.Z.shape == (5, 24) for t in trs)
    assert len({t.Q.tobytes() for t in trs}) > 1
    np.testing.assert_allclose(center_weights(specs), 1 / 48)


def test_multicenter_requires_centers():
    with pytest.raises(ValidationError):
        run_multicenter([], seed=0)


def test_derive_seed_independent_of_order():
    a = [np.random.default_rng(derive_seed(1, g, r)).random() for g in range(3) for r in range(3)]
    b = [np.random.default_rng(derive_seed(1, g, r)).random() for g in reversed(range(3)) for r in reversed(range(3))]
    assert sorted(a) == sorted(b) and len(set(a)) == 9
