import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from policylab.core import DataValidationError, SchemaMismatchError
from policylab.policies import (
    Policy,
    argmax_lowest,
    assignment_vector,
    best_on_average,
    constant_policy,
    cp_policy,
    load_policy,
    op_policy,
    save_policy,
    tp_policy,
    write_assignments,
)
from policylab.synthgen import ScenarioConfig, generate, scenario_preset
from policylab.trees import Hyperparams, fit_assignment_tree, fit_causal_tree, fit_outcome_tree

from conftest import make_dataset


def test_argmax_examples():
    # outcome scores of the two toy models at a single x
    assert argmax_lowest(np.array([4.7, 0.3])) == 0
    assert argmax_lowest(np.array([2.2, 2.8])) == 1
    assert argmax_lowest(np.array([1.0, 1.0, 1.0])) == 0
    # causal scores: control's fixed 0 candidate, then the two treated arms
    assert argmax_lowest(np.array([0.0, 3.7, -0.7])) == 1
    assert argmax_lowest(np.array([0.0, 1.2, 1.8])) == 2
    assert argmax_lowest(np.array([0.0, -1.0, -0.2])) == 0
    assert argmax_lowest(np.array([0.0, 10.0, 2.0, 2.0])) == 1
    assert argmax_lowest(np.zeros(4)) == 0


@settings(max_examples=200)
@given(
    scores=st.lists(st.integers(-1000, 1000), min_size=2, max_size=6),
    c=st.one_of(st.integers(1, 1000), st.sampled_from([0.5, 0.25, 2.0**-10])),
)
def test_argmax_scale_invariance(scores, c):
    # integer scores and exact scale factors keep ties exact
    s = np.array(scores, dtype=float)
    assert argmax_lowest(s) == argmax_lowest(s * c)


def small_data(seed=0, n=20_000):
    return generate(ScenarioConfig(n_rows=n, seed=seed, effect_scale=0.5))


def test_wrong_task_and_missing_arm_errors():
    d, _ = small_data()
    out = fit_outcome_tree(d, Hyperparams(max_depth=2))
    with pytest.raises(DataValidationError):
        tp_policy(out)
    with pytest.raises(DataValidationError):
        op_policy(fit_assignment_tree(d, Hyperparams(max_depth=1)))
    trees = [fit_causal_tree(d, j, Hyperparams(max_depth=2)) for j in (1, 3)]
    with pytest.raises(DataValidationError, match="arm"):
        cp_policy(trees)


def test_cp_chooses_control_iff_no_positive_effect():
    d, _ = small_data(1)
    pol = cp_policy([fit_causal_tree(d, j, Hyperparams(max_depth=3, min_samples_leaf=200)) for j in (1, 2, 3)])
    s = pol.scores(d.features)
    arms = pol.assign(d.features)
    assert np.array_equal(arms == 0, s[:, 1:].max(axis=1) <= 0)


def test_policies_total_and_pure():
    d, _ = small_data(2)
    pols = [
        op_policy(fit_outcome_tree(d, Hyperparams(max_depth=4))),
        tp_policy(fit_assignment_tree(d, Hyperparams(max_depth=4))),
        cp_policy([fit_causal_tree(d, j, Hyperparams(max_depth=3)) for j in (1, 2, 3)]),
        constant_policy(2, 4, d.schema_hash),
    ]
    grid = np.stack(np.meshgrid(*[np.arange(c) for c in d.schema.feature_cardinalities], indexing="ij"), -1)
    X = grid.reshape(-1, d.schema.n_features)
    for p in pols:
        a = assignment_vector(p, d)
        assert np.array_equal(a, assignment_vector(p, d))
        assert ((a >= 0) & (a < 4)).all()
        full = p.assign(X)
        assert ((full >= 0) & (full < 4)).all()
        assert [p.apply(x) for x in d.features[:50]] == a[:50].tolist()
    assert (assignment_vector(constant_policy(0, 4, d.schema_hash), d) == 0).all()


def test_best_on_average_examples():
    X = [[0]] * 8
    t = [0, 0, 1, 1, 2, 2, 3, 3]
    y = [2.0, 2.0, 2.1, 2.1, 1.9, 1.9, 2.0, 2.0]
    assert best_on_average(make_dataset(X, t, y, (1,), 4)).arm == 1
    with pytest.raises(DataValidationError, match="arm 3 has no observations"):
        best_on_average(make_dataset(X[:6], t[:6], y[:6], (1,), 4))


def test_best_on_average_dominant_arm():
    cfg = scenario_preset("null-effects", n_rows=20_000, seed=4)
    d, truth = generate(cfg)
    # lift arm 2 well above noise by adding a constant to its rows
    y = d.outcome + 5.0 * (d.treatment == 2)
    assert best_on_average(d.with_outcome(y)).arm == 2


def test_best_on_average_varies_across_folds_under_null():
    from policylab.core import make_folds

    d, _ = generate(scenario_preset("null-effects", n_rows=100_000, seed=5))
    plan = make_folds(d, 10, seed=5)
    picks = {best_on_average(d.take(plan.train_rows(k))).arm for k in range(10)}
    sub = {best_on_average(d.take(np.flatnonzero(plan.assignment == k))).arm for k in range(10)}
    assert len(picks | sub) > 1


def test_policy_serialization_and_schema_check(tmp_path):
    d, _ = small_data(3)
    pol = cp_policy([fit_causal_tree(d, j, Hyperparams(max_depth=3)) for j in (1, 2, 3)], {"seed": 3})
    back = load_policy(save_policy(pol, tmp_path / "p.json"))
    assert back.kind == "causal-effect" and back.provenance == {"seed": 3}
    assert np.array_equal(back.assign(d.features), pol.assign(d.features))
    pol.check_compatible(d)
    other, _ = generate(ScenarioConfig(n_rows=1000, seed=1, propensity_table=(0.25,) * 4))
    with pytest.raises(SchemaMismatchError):
        pol.check_compatible(other)


def test_write_assignments(tmp_path):
    path = write_assignments(np.array([0, 3, 1]), tmp_path / "a.csv")
    assert path.read_text() == "row,arm\n0,0\n1,3\n2,1\n"


def test_constant_policy_range():
    with pytest.raises(DataValidationError):
        constant_policy(4, 4, "x")
    assert isinstance(constant_policy(3, 4, "x"), Policy)
