import numpy as np
import pandas as pd
import pytest

from binning import BinLabels, assign_bins, make_bins
from clustering import Partition, kmeans_fit
from data_model import from_frame
from density import SoftmaxClassifierConfig, fit_softmax_classifier, predict_cond_dist
from errors import EmptyStratumError, MatchingError, RankDeficiencyError, SchemaError, SeparationError
from inference import (
    BIASED_LABEL,
    CAUSAL_LABEL,
    SELECTION_BIAS_CAVEAT,
    MatchResult,
    ate_bootstrap,
    balance_report,
    cluster_indicator_regression,
    default_caliper,
    distribution_heterogeneity,
    heterogeneity_flags,
    heterogeneity_regression,
    macrostate_indicators,
    nn_match,
    ols,
    propensity_fit,
    rows_partition,
    standardized_mean_difference,
    stratified_ate,
    unconfoundedness_preservation_test,
)
from scm_oracle import tolerance_partition
from tests.synthetic import CONFOUNDED_ROLES, confounded_frame

ROLES = {"x": "covariate", "treat": "treatment", "y": "outcome"}


def gauss_solve(A, b):
    """Gaussian elimination with partial pivoting"""
    A = np.array(A, dtype=float)
    b = np.array(b, dtype=float)
    n = b.size
    for i in range(n):
        pivot = i + int(np.argmax(np.abs(A[i:, i])))
        A[[i, pivot]] = A[[pivot, i]]
        b[[i, pivot]] = b[[pivot, i]]
        for j in range(i + 1, n):
            f = A[j, i] / A[i, i]
            A[j, i:] -= f * A[i, i:]
            b[j] -= f * b[i]
    x = np.zeros(n)
    for i in range(n - 1, -1, -1):
        x[i] = (b[i] - A[i, i + 1:] @ x[i + 1:]) / A[i, i]
    return x


def cell_dataset(cells, labels=None, reps=3):
    """Rows for (treat, x) cells, `reps` copies each; y is a placeholder"""
    rows = [{"x": float(x), "treat": float(t), "y": float(i)} for i, (t, x) in enumerate(cells) for _ in range(reps)]
    d = from_frame(pd.DataFrame(rows), ROLES)
    if labels is None:
        return d
    return d, Partition(np.repeat(labels, reps), int(max(labels)) + 1)


# Least squares

def test_ols_exact_fit():
    x = np.arange(1.0, 6.0)
    result = ols(2.0 * x, np.column_stack([np.ones(5), x]), ["Intercept", "x"])
    np.testing.assert_allclose(result.coef, [0.0, 2.0], atol=1e-12)
    assert result.r2 == pytest.approx(1.0)
    assert result.n == 5 and result.df_resid == 3


def test_ols_matches_gaussian_elimination():
    rng = np.random.default_rng(0)
    for _ in range(100):
        X = rng.normal(size=(20, 3))
        y = rng.normal(size=20)
        result = ols(y, X, ["a", "b", "c"])
        np.testing.assert_allclose(result.coef, gauss_solve(X.T @ X, X.T @ y), atol=1e-8)


def test_ols_residuals_orthogonal_to_design():
    rng = np.random.default_rng(1)
    X = np.column_stack([np.ones(200), rng.normal(size=(200, 2))])
    y = X @ [1.0, -2.0, 0.5] + rng.normal(size=200)
    result = ols(y, X, ["Intercept", "a", "b"])
    assert np.abs(X.T @ (y - result.fitted)).max() < 1e-6 * 200


def test_ols_slope_standard_error():
    rng = np.random.default_rng(2)
    x = rng.normal(size=30)
    y = 1.0 + 0.5 * x + rng.normal(size=30)
    result = ols(y, np.column_stack([np.ones(30), x]), ["Intercept", "x"])

    resid = y - result.fitted
    s2 = resid @ resid / 28
    assert result["x"]["se"] == pytest.approx(np.sqrt(s2 / ((x - x.mean()) ** 2).sum()))
    assert result["x"]["t"] == pytest.approx(result["x"]["coef"] / result["x"]["se"])
    assert 0.0 <= result["x"]["p"] <= 1.0


def test_ols_robust_intercept_only():
    # with a single intercept, HC1 and classical errors both equal sd / sqrt(n)
    y = np.random.default_rng(3).normal(size=50)
    classical = ols(y, np.ones(50), ["Intercept"])
    robust = ols(y, np.ones(50), ["Intercept"], robust=True)
    expected = y.std(ddof=1) / np.sqrt(50)
    assert classical.se[0] == pytest.approx(expected)
    assert robust.se[0] == pytest.approx(expected)
    assert robust.to_dict()["robust"] is True


def test_ols_rank_deficiency_names_columns():
    x = np.arange(6.0)
    with pytest.raises(RankDeficiencyError) as info:
        ols(x, np.column_stack([np.ones(6), x, 2.0 * x]), ["Intercept", "x", "x2"])
    assert info.value.columns == ("x2",)


def test_ols_needs_more_rows_than_columns():
    with pytest.raises(RankDeficiencyError):
        ols([1.0, 2.0], np.eye(2), ["a", "b"])


def test_bracket_table_layout():
    x = np.arange(1.0, 9.0)
    y = x + np.array([0.1, -0.1, 0.2, -0.2, 0.1, -0.1, 0.05, -0.05])
    result = ols(y, np.column_stack([np.ones(8), x]), ["Intercept", "x"])
    cell = result.bracket_table(["x"]).loc[0, "estimate"]
    assert cell.startswith(f"{result['x']['coef']:.4f} (")
    assert cell.endswith("]")


def test_heterogeneity_regression_design():
    frame = confounded_frame(4, n=300)
    d = from_frame(frame, CONFOUNDED_ROLES)
    result = heterogeneity_regression(d, "age")
    assert result.names == ("Intercept", "treat", "age_dummy", "treat:age_dummy")

    dummy = (frame["age"] > frame["age"].mean()).astype(float).to_numpy()
    t = frame["treat"].to_numpy()
    design = np.column_stack([np.ones(300), t, dummy, t * dummy])
    np.testing.assert_allclose(result.coef, gauss_solve(design.T @ design, design.T @ frame["y"].to_numpy()), atol=1e-8)


# Macrostate indicators and cluster regression

def test_macrostate_indicators():
    assert macrostate_indicators(Partition(np.zeros(4, dtype=int), 1)).width == 0

    M = macrostate_indicators(Partition(np.array([0, 1, 2, 1]), 3))
    np.testing.assert_array_equal(M.matrix, [[1, 0], [0, 1], [0, 0], [0, 1]])
    assert M.names == ("cluster_0", "cluster_1")
    assert set(M.matrix.sum(axis=1)) <= {0.0, 1.0}


def test_indicators_match_full_dummy_fit():
    rng = np.random.default_rng(5)
    labels = rng.permutation(np.arange(60) % 4)
    y = rng.normal(size=60)
    M = macrostate_indicators(Partition(labels, 4))
    with_intercept = ols(y, np.column_stack([np.ones(60), M.matrix]), ["Intercept", *M.names])
    full = ols(y, np.eye(4)[labels], ["c0", "c1", "c2", "c3"])
    np.testing.assert_allclose(with_intercept.fitted, full.fitted, atol=1e-12)


def test_cluster_regression_single_cluster_is_plain_regression(confounded):
    p = Partition(np.zeros(confounded.n, dtype=int), 1)
    result = cluster_indicator_regression(confounded, p)
    assert result.names == ("Intercept", "treat")

    t, y = confounded.column("treat"), confounded.column("y")
    assert result["treat"]["coef"] == pytest.approx(y[t == 1].mean() - y[t == 0].mean())


def test_cluster_regression_saturated_fit():
    rng = np.random.default_rng(6)
    labels = np.tile([0, 1], 20)
    treat = np.repeat([0.0, 1.0], 20)
    y = 1.0 + 2.0 * treat + 3.0 * (labels == 0)
    frame = pd.DataFrame({"x": rng.normal(size=40), "treat": treat, "y": y})
    d = from_frame(frame, ROLES)
    result = cluster_indicator_regression(d, Partition(labels, 2))
    assert result.r2 == pytest.approx(1.0)
    assert result["treat"]["coef"] == pytest.approx(2.0)


def test_cluster_collinear_with_treatment():
    d = cell_dataset([(1, 0), (0, 0), (1, 1), (0, 1)])
    t = d.column("treat").astype(int)
    with pytest.raises(RankDeficiencyError):
        cluster_indicator_regression(d, Partition(t, 2))


# Heterogeneity

def test_single_cluster_flags_nothing():
    d, p = cell_dataset([(1, 0), (0, 0), (1, 1), (0, 1)], [0, 0, 0, 0])
    report = heterogeneity_flags(d, p, "x")
    assert not report.heterogeneous
    assert report.label == BIASED_LABEL


def test_case_one_flag():
    # stratum 0 co-clustered across arms, stratum 1 split
    d, p = cell_dataset([(1, 0), (0, 0), (1, 1), (0, 1)], [0, 0, 1, 0])
    report = heterogeneity_flags(d, p, "x", randomized=True)
    assert report.case1 == (0.0, 1.0)
    assert report.heterogeneous
    assert report.label == CAUSAL_LABEL
    assert report.to_dict()["caveat"] == SELECTION_BIAS_CAVEAT


def test_case_two_flag():
    # treated cells share a cluster, control cells do not
    d, p = cell_dataset([(1, 0), (0, 0), (1, 1), (0, 1)], [0, 1, 0, 2])
    report = heterogeneity_flags(d, p, "x")
    assert report.case1 is None
    assert report.case2 == (0.0, 1.0, 1)


def analytic_partition(tables, cells):
    """Exact observational partition of (treat, x) cells lifted to dataset rows"""
    exact = tolerance_partition(np.array(tables))
    d = cell_dataset(cells)
    states = np.repeat(np.arange(len(cells)), 3)
    return d, rows_partition(exact.labels, states)


def test_case_two_from_analytic_conditionals():
    p_a, p_b, p_c = [0.7, 0.3], [0.2, 0.8], [0.5, 0.5]
    cells = [(1, 0), (0, 0), (1, 1), (0, 1)]
    d, p = analytic_partition([p_a, p_b, p_a, p_c], cells)
    report = heterogeneity_flags(d, p, "x")
    assert report.case1 is None
    assert report.case2 == (0.0, 1.0, 1)


def test_constant_effect_flags_nothing():
    def shift(v):
        return [0.0, v[0], v[1] + v[2]]

    base = {0: [0.6, 0.3, 0.1], 1: [0.6, 0.3, 0.1], 2: [0.2, 0.3, 0.5]}
    cells = [(t, x) for x in range(3) for t in (1, 0)]
    tables = [shift(base[x]) if t else base[x] for t, x in cells]
    d, p = analytic_partition(tables, cells)
    report = heterogeneity_flags(d, p, "x")
    assert not report.heterogeneous


def constant_effect_frame(seed, n=2000, tau=0.5):
    """Stratum x moves the outcome by 3; treatment adds tau everywhere"""
    rng = np.random.default_rng(seed)
    x = rng.integers(0, 2, n).astype(float)
    t = (rng.random(n) < 0.5).astype(float)
    y = 3.0 * x + tau * t + rng.normal(size=n)
    return pd.DataFrame({"x": x, "treat": t, "y": y})


@pytest.mark.slow
def test_constant_effect_rarely_flagged_through_estimator():
    flagged = 0
    for seed in range(20):
        d = from_frame(constant_effect_frame(seed), ROLES)
        y = d.column("y")
        labels = assign_bins(y, make_bins(y, 10, "quantile"))
        cfg = SoftmaxClassifierConfig.default_for(2, seed, epochs=200)
        cond = predict_cond_dist(fit_softmax_classifier(d, labels, cfg, ["x", "treat"]), d)
        p = kmeans_fit(cond, 2, seed)
        flagged += heterogeneity_flags(d, p, "x", randomized=True).heterogeneous
    assert flagged <= 2


def test_one_arm_stratum_is_skipped(caplog):
    d, p = cell_dataset([(1, 0), (0, 0), (1, 1), (0, 1), (1, 2)], [0, 0, 1, 0, 1])
    with caplog.at_level("WARNING"):
        report = heterogeneity_flags(d, p, "x")
    assert report.skipped == (2.0,)
    assert len(report.strata) == 2
    assert "lacks a treatment arm" in caplog.text
    assert list(report.to_frame()["stratum"]) == [0.0, 1.0]


def test_distribution_heterogeneity():
    d = cell_dataset([(1, 0), (0, 0), (1, 1), (0, 1)], reps=2)
    same = BinLabels(np.array([1, 1, 2, 2, 1, 1, 2, 2]), 2)
    report = distribution_heterogeneity(d, same, "x")
    assert report.max_gap == 0.0
    assert not report.heterogeneous

    different = BinLabels(np.array([1, 1, 2, 2, 2, 2, 2, 2]), 2)
    report = distribution_heterogeneity(d, different, "x", randomized=True)
    np.testing.assert_allclose(report.differences, [[1.0, -1.0], [0.0, 0.0]])
    assert report.max_gap == pytest.approx(1.0)
    assert report.heterogeneous
    assert report.to_dict()["label"] == CAUSAL_LABEL


# Propensity score matching

def test_propensity_without_signal():
    rng = np.random.default_rng(7)
    n = 2000
    frame = pd.DataFrame({"x": rng.normal(size=n), "treat": (rng.random(n) < 0.3).astype(float), "y": np.zeros(n)})
    d = from_frame(frame, ROLES)
    model = propensity_fit(d)
    assert model.converged
    assert model.scores.mean() == pytest.approx(frame["treat"].mean(), abs=1e-6)
    assert np.abs(model.scores - frame["treat"].mean()).max() < 0.1


def test_propensity_recovers_logit_coefficients():
    rng = np.random.default_rng(8)
    n = 5000
    x = rng.normal(1.0, 2.0, n)
    t = (rng.random(n) < 1.0 / (1.0 + np.exp(-(-0.5 + 0.7 * x)))).astype(float)
    d = from_frame(pd.DataFrame({"x": x, "treat": t, "y": np.zeros(n)}), ROLES)
    model = propensity_fit(d)
    np.testing.assert_allclose(model.coef, [-0.5, 0.7], atol=0.12)
    assert ((model.scores > 0) & (model.scores < 1)).all()


def test_propensity_separation():
    t = np.repeat([0.0, 1.0], 10)
    d = from_frame(pd.DataFrame({"x": t.copy(), "treat": t, "y": np.zeros(20)}), ROLES)
    with pytest.raises(SeparationError):
        propensity_fit(d)


def test_propensity_needs_both_arms():
    d = from_frame(pd.DataFrame({"x": [1.0, 2.0], "treat": [1.0, 1.0], "y": [0.0, 0.0]}), ROLES)
    with pytest.raises(MatchingError, match="no controls"):
        propensity_fit(d)


def greedy_reference(scores, treat, caliper=None):
    treated = sorted((i for i in range(len(treat)) if treat[i] == 1), key=lambda i: (-scores[i], i))
    free = [i for i in range(len(treat)) if treat[i] == 0]
    pairs = []
    for i in treated:
        if not free:
            continue
        j = min(free, key=lambda c: (abs(scores[c] - scores[i]), c))
        if caliper is not None and abs(scores[j] - scores[i]) > caliper:
            continue
        free.remove(j)
        pairs.append((i, j))
    return tuple(pairs)


def test_nn_match_nearest_control():
    m = nn_match([0.5, 0.4, 0.8], [1, 0, 0])
    assert m.pairs == ((0, 1),)


def test_nn_match_caliper_binds():
    m = nn_match([0.5, 0.4, 0.6], [1, 0, 0], caliper=0.01)
    assert m.pairs == ()
    assert m.unmatched_treated == (0,)


def test_nn_match_agrees_with_reference_greedy():
    rng = np.random.default_rng(9)
    for _ in range(20):
        scores = rng.random(30)
        treat = rng.permutation(np.repeat([1.0, 0.0], [10, 20]))
        m = nn_match(scores, treat)
        assert m.pairs == greedy_reference(scores, treat)
        controls = [b for _, b in m.pairs]
        assert len(set(controls)) == len(controls)
        assert all(treat[a] == 1 and treat[b] == 0 for a, b in m.pairs)

        tight = nn_match(scores, treat, caliper=0.02)
        assert tight.pairs == greedy_reference(scores, treat, 0.02)


def test_nn_match_more_treated_than_controls():
    m = nn_match([0.9, 0.8, 0.7, 0.1], [1, 1, 1, 0])
    assert len(m.pairs) == 1
    assert m.pairs[0][1] == 3
    assert len(m.unmatched_treated) == 2


def test_nn_match_input_errors():
    with pytest.raises(MatchingError):
        nn_match([0.1, 0.2], [1, 0, 0])
    with pytest.raises(MatchingError):
        nn_match([0.1, 0.2], [1, 0], caliper=0.0)


def test_balance_identical_samples():
    frame = pd.DataFrame({"x": [1.0, 2.0, 3.0, 1.0, 2.0, 3.0], "treat": [1.0, 1.0, 1.0, 0.0, 0.0, 0.0], "y": np.zeros(6)})
    d = from_frame(frame, ROLES)
    m = MatchResult(((0, 3), (1, 4), (2, 5)), np.full(6, 0.5), None)
    report = balance_report(d, m)
    assert report.rows[0].smd_before == 0.0
    assert report.rows[0].smd_after == 0.0
    assert not report.rows[0].flagged


def test_smd_of_shifted_sample():
    base = np.array([0.0, 1.0, 2.0, 3.0])
    smd, flagged = standardized_mean_difference(base + 1.0, base)
    assert smd == pytest.approx(1.0 / base.std(ddof=1))
    assert not flagged


def test_zero_pooled_sd_is_flagged():
    assert standardized_mean_difference(np.ones(3), np.ones(3)) == (0.0, True)
    frame = pd.DataFrame({"x": np.full(4, 5.0), "treat": [1.0, 1.0, 0.0, 0.0], "y": np.zeros(4)})
    report = balance_report(from_frame(frame, ROLES), MatchResult(((0, 2), (1, 3)), np.full(4, 0.5), None))
    assert report.rows[0].flagged


def test_balance_needs_pairs(confounded):
    with pytest.raises(MatchingError):
        balance_report(confounded, MatchResult((), np.zeros(confounded.n), None))


def test_ate_constant_effect_has_zero_se():
    t = np.repeat([1.0, 0.0], 5)
    frame = pd.DataFrame({"x": np.tile(np.arange(5.0), 2), "treat": t, "y": 3.0 + 2.0 * t})
    d = from_frame(frame, ROLES)
    m = MatchResult(tuple((i, i + 5) for i in range(5)), np.full(10, 0.5), None)
    estimate = ate_bootstrap(d, m, B=100, seed=1)
    assert estimate.ate == 2.0
    assert estimate.se == 0.0
    assert estimate.pairs == 5


def test_ate_input_errors(confounded):
    m = MatchResult(((0, 1),), np.zeros(confounded.n), None)
    with pytest.raises(ValueError, match="at least 100"):
        ate_bootstrap(confounded, m, B=99)
    with pytest.raises(MatchingError):
        ate_bootstrap(confounded, MatchResult((), np.zeros(confounded.n), None), B=100)


def test_ate_bootstrap_is_seeded(confounded):
    model = propensity_fit(confounded)
    m = nn_match(model.scores, confounded.column("treat"))
    a = ate_bootstrap(confounded, m, B=200, seed=3, n_jobs=1)
    b = ate_bootstrap(confounded, m, B=200, seed=3, n_jobs=2)
    assert a == b


def test_matching_improves_balance_on_most_seeds():
    improved = 0
    for seed in range(20):
        d = from_frame(confounded_frame(seed, n=800), CONFOUNDED_ROLES)
        model = propensity_fit(d)
        report = balance_report(d, nn_match(model.scores, d.column("treat")))
        improved += report.max_smd_after <= report.max_smd_before
    assert improved >= 18


def test_default_caliper():
    logits = np.array([-1.0, 0.0, 1.0, 2.0])
    assert default_caliper(logits) == pytest.approx(0.2 * logits.std(ddof=1))
    assert default_caliper(logits, width=0.5) == pytest.approx(0.5 * logits.std(ddof=1))
    assert default_caliper(np.full(5, 0.3)) is None
    with pytest.raises(MatchingError):
        default_caliper(logits, width=0.0)


def test_propensity_logits_match_scores(confounded):
    model = propensity_fit(confounded)
    np.testing.assert_allclose(1.0 / (1.0 + np.exp(-model.logits)), model.scores, rtol=1e-12)


def test_caliper_drops_tail_matches():
    d = from_frame(confounded_frame(0, n=2000, treat_intercept=-1.2), CONFOUNDED_ROLES)
    model = propensity_fit(d)
    t = d.column("treat")
    loose = nn_match(model.logits, t)
    tight = nn_match(model.logits, t, default_caliper(model.logits))
    assert loose.unmatched_treated == ()
    assert tight.unmatched_treated
    assert len(tight.pairs) + len(tight.unmatched_treated) == int(t.sum())
    gaps = np.abs(model.logits[tight.treated_rows] - model.logits[tight.control_rows])
    assert gaps.max() <= tight.caliper


@pytest.mark.slow
def test_psm_recovers_effect():
    hits = 0
    for seed in range(20):
        d = from_frame(confounded_frame(seed, n=4000, treat_intercept=-1.2), CONFOUNDED_ROLES)
        model = propensity_fit(d)
        m = nn_match(model.logits, d.column("treat"), default_caliper(model.logits))
        balance = balance_report(d, m)
        estimate = ate_bootstrap(d, m, B=300, seed=seed)
        hits += balance.max_smd_after < 0.1 and abs(estimate.ate - 2.0) < 3 * estimate.se
    assert hits >= 18


# Unconfoundedness preservation

def test_stratified_ate_by_hand():
    y = np.array([3.0, 1.0, 5.0, 7.0, 2.0])
    t = np.array([1.0, 0.0, 1.0, 1.0, 0.0])
    strata = np.array([0, 0, 1, 1, 1])
    assert stratified_ate(y, t, strata) == pytest.approx((2 * 2.0 + 3 * 4.0) / 5)
    with pytest.raises(EmptyStratumError):
        stratified_ate(y, t, np.array([0, 0, 1, 1, 2]))


def test_rows_partition_relabels():
    p = rows_partition((0, 2, 0), [1, 0, 2, 1])
    np.testing.assert_array_equal(p.labels, [1, 0, 0, 1])
    assert p.K == 2


def randomized_design(seed, n=20_000, tau=1.0):
    """Four x levels in two outcome classes {0, 1} and {2, 3}; treatment is a coin flip"""
    rng = np.random.default_rng(seed)
    x = rng.integers(0, 4, n)
    t = (rng.random(n) < 0.5).astype(float)
    y = tau * t + (x >= 2) + rng.normal(size=n)
    return from_frame(pd.DataFrame({"x": x.astype(float), "treat": t, "y": y}), ROLES)


def check_preservation(seed):
    d = randomized_design(seed)
    p = rows_partition((0, 0, 1, 1), d.column("x").astype(int))
    report = unconfoundedness_preservation_test(d, p, "x", true_tau=1.0)
    assert report.macro_cells == 2 and report.micro_cells == 4
    assert report.discrepancy < 0.02 * report.sd_y
    assert abs(report.ate_macro - 1.0) < 0.1
    return report


def test_merged_levels_preserve_ate():
    report = check_preservation(0)
    assert report.max_abs_discrepancy >= report.discrepancy


@pytest.mark.slow
def test_merged_levels_preserve_ate_across_seeds():
    for seed in range(20):
        check_preservation(seed)


def test_randomized_design_survives_any_coarsening():
    d = randomized_design(1, tau=0.5)
    coarse = Partition(np.zeros(d.n, dtype=int), 1)
    report = unconfoundedness_preservation_test(d, coarse, "x", true_tau=0.5)
    assert report.macro_cells == 1
    assert abs(report.ate_macro - 0.5) < 0.1


def test_preservation_checks_alignment(confounded):
    with pytest.raises(SchemaError):
        unconfoundedness_preservation_test(confounded, Partition(np.array([0, 1]), 2), "age")
