from collections import Counter

import numpy as np
import pandas as pd
import pytest

from binning import BinLabels
from data_model import from_frame
from density import (
    CondDistMatrix,
    FrequencyTable,
    SoftmaxClassifierConfig,
    estimator_from_dict,
    fit_frequency_table,
    fit_softmax_classifier,
    loss_and_gradients,
    predict_cond_dist,
)
from errors import DensityError, SchemaError, UnseenCovariateError


def toy_dataset(x, y_bins, m):
    d = from_frame(pd.DataFrame({"x": np.asarray(x, float), "y": np.asarray(y_bins, float)}),
                   {"x": "covariate", "y": "outcome"})
    return d, BinLabels(np.asarray(y_bins), m)


def total_variation(p, q):
    return 0.5 * np.abs(np.asarray(p) - np.asarray(q)).sum()


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(6, 1))
    Y = np.eye(2)[rng.integers(0, 2, 6)]
    # one input, one tanh unit, two outputs
    layers = [(rng.normal(size=(1, 1)), rng.normal(size=1)), (rng.normal(size=(1, 2)), rng.normal(size=2))]
    l2 = 1e-3
    _, grads = loss_and_gradients(layers, X, Y, l2)

    h = 1e-6
    for li, (W, b) in enumerate(layers):
        for which, param, analytic in ((0, W, grads[li][0]), (1, b, grads[li][1])):
            for idx in np.ndindex(param.shape):
                plus = [(w.copy(), c.copy()) for w, c in layers]
                minus = [(w.copy(), c.copy()) for w, c in layers]
                plus[li][which][idx] += h
                minus[li][which][idx] -= h
                numeric = (loss_and_gradients(plus, X, Y, l2)[0] - loss_and_gradients(minus, X, Y, l2)[0]) / (2 * h)
                assert abs(numeric - analytic[idx]) <= 1e-4 * max(1.0, abs(numeric))


def test_separable_two_bins():
    rng = np.random.default_rng(1)
    x = rng.uniform(-1.0, 1.0, 600)
    x = x[np.abs(x) > 0.05]
    y = np.where(x < 0, 1, 2)
    train, test = slice(0, 400), slice(400, None)
    d, labels = toy_dataset(x[train], y[train], 2)
    cfg = SoftmaxClassifierConfig(hidden_layers=(), epochs=200, seed=3)
    model = fit_softmax_classifier(d, labels, cfg)

    held_out, _ = toy_dataset(x[test], y[test], 2)
    predicted = predict_cond_dist(model, held_out).values.argmax(axis=1) + 1
    assert (predicted == y[test]).mean() >= 0.99


def test_noise_labels_give_flat_predictions():
    rng = np.random.default_rng(2)
    x = rng.normal(size=1000)
    y = rng.permutation(np.repeat([1, 2], 500))
    d, labels = toy_dataset(x, y, 2)
    model = fit_softmax_classifier(d, labels, SoftmaxClassifierConfig(epochs=100, seed=0))
    mean = predict_cond_dist(model, d).values.mean(axis=0)
    np.testing.assert_allclose(mean, [0.5, 0.5], atol=0.05)


@pytest.mark.slow
def test_classifier_converges_to_frequency_table():
    rng = np.random.default_rng(4)
    truth = np.array([[0.6, 0.3, 0.1], [0.2, 0.5, 0.3], [0.1, 0.2, 0.7]])
    level = np.repeat([0, 1, 2], 500)
    y = np.array([rng.choice(3, p=truth[l]) for l in level]) + 1
    frame = pd.DataFrame({
        "x1": (level == 1).astype(float),
        "x2": (level == 2).astype(float),
        "y": y.astype(float),
    })
    d = from_frame(frame, {"x1": "covariate", "x2": "covariate", "y": "outcome"})
    labels = BinLabels(y, 3)

    model = fit_softmax_classifier(d, labels, SoftmaxClassifierConfig(epochs=300, seed=1))
    oracle = fit_frequency_table(d, labels)
    predicted = predict_cond_dist(model, d).values
    expected = predict_cond_dist(oracle, d).values
    for l in range(3):
        row = np.flatnonzero(level == l)[0]
        assert total_variation(predicted[row], expected[row]) <= 0.05


def test_training_is_reproducible():
    rng = np.random.default_rng(6)
    x = rng.normal(size=300)
    y = (x + rng.normal(scale=0.5, size=300) > 0).astype(int) + 1
    d, labels = toy_dataset(x, y, 2)
    cfg = SoftmaxClassifierConfig(hidden_layers=(4,), epochs=20, seed=9)
    a = predict_cond_dist(fit_softmax_classifier(d, labels, cfg), d).values
    b = predict_cond_dist(fit_softmax_classifier(d, labels, cfg), d).values
    np.testing.assert_array_equal(a, b)


def test_predictions_are_row_stochastic_and_deterministic():
    d, labels = toy_dataset([0.0, 1.0, 1.0, 2.0, 3.0, 3.0], [1, 2, 2, 3, 3, 1], 3)
    model = fit_softmax_classifier(d, labels, SoftmaxClassifierConfig(epochs=10, seed=0))
    cond = predict_cond_dist(model, d)

    assert cond.m == 3
    np.testing.assert_allclose(cond.values.sum(axis=1), 1.0, atol=1e-6)
    # rows 1 and 2 share x
    np.testing.assert_array_equal(cond.values[1], cond.values[2])


def test_single_bin_cannot_be_fit():
    d, labels = toy_dataset([0.0, 1.0, 2.0], [1, 1, 1], 2)
    with pytest.raises(DensityError, match="two distinct bins"):
        fit_softmax_classifier(d, labels, SoftmaxClassifierConfig())


def test_divergence_names_epoch_and_rate():
    rng = np.random.default_rng(7)
    x = rng.normal(size=200)
    d, labels = toy_dataset(x, (x > 0).astype(int) + 1, 2)
    cfg = SoftmaxClassifierConfig(learning_rate=1e6, l2_penalty=1e-2, epochs=50, batch_size=10)
    with pytest.raises(DensityError, match=r"epoch \d+ with learning rate 1000000"):
        fit_softmax_classifier(d, labels, cfg)


def test_predict_requires_training_features():
    d, labels = toy_dataset([0.0, 1.0, 2.0, 3.0], [1, 2, 1, 2], 2)
    model = fit_softmax_classifier(d, labels, SoftmaxClassifierConfig(epochs=5))
    other = from_frame(pd.DataFrame({"z": [1.0]}), {"z": "covariate"})
    with pytest.raises(SchemaError):
        predict_cond_dist(model, other)


def test_default_config_by_covariate_count():
    assert SoftmaxClassifierConfig.default_for(3).hidden_layers == ()
    assert SoftmaxClassifierConfig.default_for(4).hidden_layers == (16,)
    assert SoftmaxClassifierConfig.default_for(2, seed=5, epochs=7).epochs == 7


def test_softmax_json_form_predicts_identically():
    d, labels = toy_dataset([0.0, 1.0, 2.0, 3.0, 4.0], [1, 1, 2, 2, 2], 2)
    model = fit_softmax_classifier(d, labels, SoftmaxClassifierConfig(hidden_layers=(3,), epochs=5))
    rebuilt = estimator_from_dict(model.to_dict())
    np.testing.assert_allclose(predict_cond_dist(rebuilt, d).values, predict_cond_dist(model, d).values)


def test_frequency_table_counts():
    d, labels = toy_dataset([7.0, 7.0, 7.0], [1, 1, 2], 2)
    table = fit_frequency_table(d, labels)
    np.testing.assert_allclose(predict_cond_dist(table, d).values[0], [2 / 3, 1 / 3])


def test_frequency_table_unique_rows_are_one_hot():
    d, labels = toy_dataset([1.0, 2.0, 3.0], [3, 1, 2], 3)
    np.testing.assert_array_equal(predict_cond_dist(fit_frequency_table(d, labels), d).values, np.eye(3)[[2, 0, 1]])


def test_frequency_table_matches_groupby():
    rng = np.random.default_rng(12)
    x = rng.integers(0, 4, 300)
    y = rng.integers(1, 4, 300)
    d, labels = toy_dataset(x, y, 3)
    cond = predict_cond_dist(fit_frequency_table(d, labels), d).values

    shares = pd.crosstab(x, y, normalize="index").reindex(columns=[1, 2, 3], fill_value=0.0)
    np.testing.assert_allclose(cond, shares.loc[x].to_numpy())


def test_frequency_table_two_features_with_empty_bin():
    rng = np.random.default_rng(14)
    a = rng.integers(0, 2, 200).astype(float)
    b = rng.integers(0, 3, 200).astype(float)
    # bin 4 never occurs
    y = rng.integers(1, 4, 200)
    frame = pd.DataFrame({"a": a, "b": b, "y": y.astype(float)})
    d = from_frame(frame, {"a": "covariate", "b": "covariate", "y": "outcome"})
    table = fit_frequency_table(d, BinLabels(y, 4))

    counts = Counter(zip(a.tolist(), b.tolist(), y.tolist()))
    totals = Counter(zip(a.tolist(), b.tolist()))
    assert set(table.table) == set(totals)
    for key, total in totals.items():
        expected = [counts[(*key, k)] / total for k in range(1, 5)]
        np.testing.assert_allclose(table.table[key], expected)
        assert table.table[key][3] == 0.0


def test_frequency_table_is_order_free():
    rng = np.random.default_rng(13)
    x = rng.integers(0, 3, 100)
    y = rng.integers(1, 3, 100)
    order = rng.permutation(100)
    a = fit_frequency_table(*toy_dataset(x, y, 2))
    b = fit_frequency_table(*toy_dataset(x[order], y[order], 2))
    assert a.table == b.table


def test_frequency_table_unseen_combination():
    d, labels = toy_dataset([0.0, 1.0], [1, 2], 2)
    table = fit_frequency_table(d, labels)
    unseen, _ = toy_dataset([5.0], [1], 2)
    with pytest.raises(UnseenCovariateError):
        predict_cond_dist(table, unseen)
    assert isinstance(estimator_from_dict(table.to_dict()), FrequencyTable)


def test_cond_dist_rejects_bad_rows():
    with pytest.raises(ValueError):
        CondDistMatrix(np.array([[0.5, 0.6]]))
