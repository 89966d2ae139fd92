import numpy as np
import pytest
from scipy import stats

from policylab.core import DataValidationError, Schema
from policylab.synthgen import (
    BLOCK_ROWS,
    PAPER_PROPENSITIES,
    ScenarioConfig,
    SyntheticTruth,
    conditional_means,
    generate,
    preset_names,
    scenario_preset,
    true_policy_value,
    true_regret,
)

from conftest import make_dataset


def test_config_validation_names_field():
    with pytest.raises(DataValidationError, match="base_scale"):
        ScenarioConfig(base_scale=-1).validate()
    with pytest.raises(DataValidationError, match="effect_feature_mask"):
        ScenarioConfig(effect_scale=0.5, effect_feature_mask=()).validate()
    with pytest.raises(DataValidationError, match="noise_model"):
        ScenarioConfig(noise_model="cauchy").validate()
    with pytest.raises(DataValidationError, match="propensity_table"):
        ScenarioConfig(propensity_table=(0.5, 0.5)).validate()


def test_config_round_trip(tmp_path):
    cfg = scenario_preset("effect-dominant", n_rows=123, seed=9)
    assert ScenarioConfig.load(cfg.save(tmp_path / "c.json")) == cfg


def test_zero_effects_give_zero_cate_and_control_optimal():
    d, truth = generate(scenario_preset("null-effects", n_rows=5000, seed=1))
    assert truth.true_cate.shape == (5000, 3)
    assert np.all(truth.true_cate == 0.0)
    assert np.all(truth.optimal_arm == 0)


def test_arm_shares_match_paper_propensities():
    d, _ = generate(scenario_preset("level-dominant", n_rows=1_000_000, seed=7))
    shares = d.arm_counts() / d.n_rows
    assert np.abs(shares - np.array(PAPER_PROPENSITIES)).max() < 0.002


@pytest.mark.parametrize("noise", ["poisson", "truncated-gaussian"])
def test_generate_is_deterministic(noise):
    cfg = ScenarioConfig(n_rows=70_000, seed=3, noise_model=noise)
    a, ta = generate(cfg)
    b, tb = generate(cfg)
    assert a.content_hash() == b.content_hash()
    assert np.array_equal(ta.potential_outcomes, tb.potential_outcomes)
    c, _ = generate(cfg.replace(seed=4))
    assert c.content_hash() != a.content_hash()


def test_prefix_stability_across_sizes():
    # blockwise streams: complete blocks do not depend on the total size
    small, _ = generate(ScenarioConfig(n_rows=70_000, seed=2))
    big, _ = generate(ScenarioConfig(n_rows=140_000, seed=2))
    full = BLOCK_ROWS
    assert np.array_equal(small.outcome[:full], big.outcome[:full])
    assert np.array_equal(small.features[:full], big.features[:full])


def test_truth_invariants():
    _, truth = generate(ScenarioConfig(n_rows=20_000, seed=5, effect_scale=0.6))
    mu = truth.potential_outcomes
    assert np.array_equal(truth.true_cate, mu[:, 1:] - mu[:, :1])
    assert np.array_equal(mu[np.arange(mu.shape[0]), truth.optimal_arm], mu.max(axis=1))
    tied = SyntheticTruth(np.array([[1.0, 2.0, 2.0], [3.0, 3.0, 0.0]]))
    assert tied.optimal_arm.tolist() == [1, 0]


def test_true_value_and_regret_examples():
    d = make_dataset([[0], [0]], [0, 1], [1.0, 1.0], (1,), 2)
    truth = SyntheticTruth(np.array([[3.0, 2.0], [1.0, 4.0]]))
    assert true_policy_value(np.array([0, 1]), d, truth) == 3.5
    assert true_regret(np.array([0, 1]), d, truth) == 0.0
    assert true_policy_value(np.array([0, 0]), d, truth) == 2.0
    one = make_dataset([[0]], [0], [1.0], (1,), 2)
    assert true_regret(np.array([1]), one, SyntheticTruth(np.array([[3.0, 2.0]]))) == 1.0
    with pytest.raises(DataValidationError):
        true_policy_value(np.array([0]), d, truth)


def test_regret_nonnegative_and_optimum():
    d, truth = generate(ScenarioConfig(n_rows=10_000, seed=8, effect_scale=0.5))
    rng = np.random.default_rng(0)
    for _ in range(5):
        assert true_regret(rng.integers(0, 4, d.n_rows), d, truth) >= 0.0
    assert true_regret(truth.optimal_arm, d, truth) == 0.0
    assert true_policy_value(truth.optimal_arm, d, truth) == pytest.approx(truth.potential_outcomes.max(1).mean())
    assert true_policy_value(np.zeros(d.n_rows, int), d, truth) == pytest.approx(truth.potential_outcomes[:, 0].mean())


def test_outcomes_nonnegative():
    for noise in ("poisson", "truncated-gaussian"):
        d, _ = generate(ScenarioConfig(n_rows=20_000, seed=1, noise_model=noise, noise_scale=2.0))
        assert d.outcome.min() >= 0.0


@pytest.mark.parametrize("noise", ["poisson", "truncated-gaussian"])
def test_binned_means_match_truth(noise):
    """Monte Carlo: per-(x, t) sample means sit within 4.5 standard errors of the truth."""
    schema = Schema((2, 3), 2)
    cfg = ScenarioConfig(schema=schema, propensity_table=(0.5, 0.5), n_rows=300_000, seed=4,
                         effect_scale=0.5, effect_feature_mask=(0, 1), noise_model=noise)
    d, truth = generate(cfg)
    keys = d.cell_keys() * 2 + d.treatment
    for k in np.unique(keys):
        rows = keys == k
        arm = k % 2
        y = d.outcome[rows]
        expect = truth.potential_outcomes[rows, arm][0]
        assert abs(y.mean() - expect) < 4.5 * y.std(ddof=1) / np.sqrt(y.size)


def test_unconfoundedness_chi_square():
    pvals = []
    for seed in range(20):
        d, _ = generate(ScenarioConfig(n_rows=20_000, seed=seed))
        table = np.zeros((19, 4))
        np.add.at(table, (d.features[:, 0], d.treatment), 1)
        pvals.append(stats.chi2_contingency(table)[1])
    # under independence p-values are uniform; a KS test against U(0,1) should not reject
    assert stats.kstest(pvals, "uniform").pvalue > 0.001


def test_conditional_means_matches_generate():
    cfg = ScenarioConfig(n_rows=5000, seed=6)
    d, truth = generate(cfg)
    assert np.allclose(conditional_means(cfg, d.features), truth.potential_outcomes, rtol=1e-12)


def test_presets():
    assert set(preset_names()) == {"level-dominant", "effect-dominant", "null-effects"}
    assert scenario_preset("null-effects").effect_scale == 0
    with pytest.raises(DataValidationError, match="unknown preset"):
        scenario_preset("nope")
    for name in preset_names():
        cfg = scenario_preset(name)
        assert cfg.schema.feature_cardinalities == (19, 6, 3, 4, 8)
        assert cfg.propensity_table == PAPER_PROPENSITIES


def _ate_stats(d):
    means = np.array([d.outcome[d.treatment == j].mean() for j in range(4)])
    ses = np.array([d.outcome[d.treatment == j].std(ddof=1) / np.sqrt((d.treatment == j).sum()) for j in range(4)])
    return means, ses


def test_level_dominant_calibration():
    d, truth = generate(scenario_preset("level-dominant", n_rows=100_000, seed=11))
    means, ses = _ate_stats(d)
    # per-arm differences against control: indistinguishable at N = 1e5 (|z| < 3)
    z = (means[1:] - means[0]) / np.sqrt(ses[1:] ** 2 + ses[0] ** 2)
    assert np.all(np.abs(z) < 3)
    # exact population means are equal by construction
    mu = truth.potential_outcomes
    best_const = mu.mean(axis=0).max()
    assert mu.max(axis=1).mean() >= 1.02 * best_const


def test_effect_dominant_calibration():
    d, _ = generate(scenario_preset("effect-dominant", n_rows=100_000, seed=11))
    means, ses = _ate_stats(d)
    ate = means[1:] - means[0]
    i, k = int(np.argmax(ate)), int(np.argmin(ate))
    se = np.sqrt(ses[i + 1] ** 2 + ses[k + 1] ** 2)
    assert ate[i] - ate[k] > 5 * se


def test_shared_effect_validation_and_round_trip(tmp_path):
    with pytest.raises(DataValidationError, match="shared_effect_mask"):
        ScenarioConfig(shared_effect_scale=0.3).validate()
    with pytest.raises(DataValidationError, match="shared_effect_scale"):
        ScenarioConfig(shared_effect_scale=-0.1, shared_effect_mask=(0,)).validate()
    cfg = scenario_preset("level-dominant", n_rows=10, seed=2)
    assert ScenarioConfig.load(cfg.save(tmp_path / "c.json")) == cfg


def test_shared_effect_moves_treated_arms_together():
    # with no arm-specific effects every treated arm has the same conditional mean
    cfg = ScenarioConfig(n_rows=5000, seed=3, effect_scale=0.0, effect_feature_mask=(),
                         shared_effect_scale=0.4, shared_effect_mask=(0, 1))
    _, truth = generate(cfg)
    cate = truth.true_cate
    assert np.array_equal(cate[:, 0], cate[:, 1]) and np.array_equal(cate[:, 0], cate[:, 2])
    assert cate[:, 0].std() > 0.1
    # balancing still equalizes the population means
    grid = np.stack(np.unravel_index(np.arange(19 * 6 * 3 * 4 * 8), (19, 6, 3, 4, 8)), axis=1)
    pop = conditional_means(cfg, grid).mean(axis=0)
    assert np.allclose(pop, pop[0], rtol=1e-10)
