import numpy as np
import pandas as pd
import pytest

from data_model import ColumnKind, Role, detect_kind, from_frame, load_csv, standardize, unstandardize
from errors import SchemaError

ROLES = {"age": "covariate", "treat": "treatment", "outcome": "outcome"}


def test_load_csv_reads_roles_and_rows(write_csv):
    path = write_csv("age,treat,outcome\n25,1,100.5\n31,0,80\n40,1,120\n")
    d = load_csv(path, ROLES)

    assert d.n == 3
    assert d.dropped_rows == 0
    assert d.roles == {"age": Role.COVARIATE, "treat": Role.TREATMENT, "outcome": Role.OUTCOME}
    assert d.treatment == "treat" and d.outcome == "outcome"
    np.testing.assert_array_equal(d.column("age"), [25.0, 31.0, 40.0])


def test_non_numeric_token_drops_row(write_csv):
    path = write_csv("age,treat,outcome\n25,1,100\nabc,0,80\n40,1,120\n")
    d = load_csv(path, ROLES)

    assert d.n == 2
    assert d.dropped_rows == 1
    # row order preserved
    np.testing.assert_array_equal(d.column("age"), [25.0, 40.0])


def test_unnamed_columns_are_ignored(write_csv):
    path = write_csv("id,age,treat,outcome,note\n1,25,1,100,x\n2,31,0,80,\n")
    d = load_csv(path, ROLES)
    assert d.n == 2
    assert d.roles["note"] == Role.IGNORED
    assert d.covariates == ["age"]


def test_difference_column_can_be_the_outcome(write_csv):
    path = write_csv("age,treat,re75,re78\n25,1,100,250\n31,0,abc,80\n40,1,0,120.5\n")
    roles = {"age": "covariate", "treat": "treatment", "change": "outcome"}
    d = load_csv(path, roles, {"change": ("re78", "re75")})

    assert d.outcome == "change"
    assert d.dropped_rows == 1
    np.testing.assert_array_equal(d.column("change"), [150.0, 120.5])
    assert d.roles["re75"] == Role.IGNORED


def test_difference_column_errors(write_csv):
    path = write_csv("age,treat,re75,re78\n25,1,100,250\n")
    with pytest.raises(SchemaError, match="unknown column"):
        load_csv(path, {"age": "covariate"}, {"change": ("re78", "re74")})
    with pytest.raises(SchemaError, match="already exists"):
        load_csv(path, {"age": "covariate"}, {"age": ("re78", "re75")})


def test_missing_file():
    with pytest.raises(FileNotFoundError):
        load_csv("/nonexistent/data.csv", ROLES)


def test_unknown_role_column(write_csv):
    path = write_csv("age,treat,outcome\n25,1,100\n")
    with pytest.raises(SchemaError, match="unknown columns"):
        load_csv(path, {**ROLES, "income": "covariate"})


def test_treatment_outside_binary(write_csv):
    path = write_csv("age,treat,outcome\n25,2,100\n31,0,80\n")
    with pytest.raises(SchemaError, match="outside"):
        load_csv(path, ROLES)


def test_load_is_deterministic(write_csv):
    path = write_csv("age,treat,outcome\n25,1,100\n31,0,80\n")
    a, b = load_csv(path, ROLES), load_csv(path, ROLES)
    pd.testing.assert_frame_equal(a.to_frame(), b.to_frame())


def test_detect_kind():
    assert detect_kind(np.array([0.0, 1.0, 1.0])) == ColumnKind.BINARY
    assert detect_kind(np.array([1.0, 2.0, 7.0])) == ColumnKind.INTEGER
    assert detect_kind(np.array([0.5, 2.0])) == ColumnKind.NUMERIC


def test_require_inference_roles():
    d = from_frame(pd.DataFrame({"age": [1.0, 2.0], "y": [0.0, 1.0]}), {"age": "covariate", "y": "outcome"})
    with pytest.raises(SchemaError, match="exactly one treatment"):
        d.require_inference_roles()


def test_standardize_sample_convention():
    d = from_frame(pd.DataFrame({"a": [1.0, 2.0, 3.0]}), {"a": "covariate"})
    scaled, params = standardize(d, ["a"])

    np.testing.assert_allclose(scaled.column("a"), [-1.0, 0.0, 1.0], atol=1e-12)
    assert params.means["a"] == pytest.approx(2.0)
    assert params.stds["a"] == pytest.approx(1.0)
    assert params.flagged == ()


def test_standardize_constant_column_is_flagged():
    d = from_frame(pd.DataFrame({"a": [5.0, 5.0, 5.0]}), {"a": "covariate"})
    scaled, params = standardize(d, ["a"])
    np.testing.assert_array_equal(scaled.column("a"), [5.0, 5.0, 5.0])
    assert params.flagged == ("a",)


def test_standardize_is_idempotent():
    d = from_frame(pd.DataFrame({"a": [-1.0, 0.0, 1.0]}), {"a": "covariate"})
    scaled, params = standardize(d, ["a"])
    np.testing.assert_allclose(scaled.column("a"), [-1.0, 0.0, 1.0], atol=1e-12)
    assert params.means["a"] == pytest.approx(0.0)
    assert params.stds["a"] == pytest.approx(1.0)


def test_unstandardize_recovers_values():
    rng = np.random.default_rng(3)
    frame = pd.DataFrame({"a": rng.normal(50.0, 12.0, 200), "b": rng.exponential(3.0, 200)})
    d = from_frame(frame, {"a": "covariate", "b": "covariate"})
    scaled, params = standardize(d, ["a", "b"])

    assert scaled.column("a").mean() == pytest.approx(0.0, abs=1e-9)
    assert scaled.column("b").std(ddof=1) == pytest.approx(1.0, abs=1e-9)
    restored = unstandardize(scaled, params)
    np.testing.assert_allclose(restored.matrix(["a", "b"]), d.matrix(["a", "b"]), rtol=1e-10)


def test_standardize_unknown_column():
    d = from_frame(pd.DataFrame({"a": [1.0, 2.0]}), {"a": "covariate"})
    with pytest.raises(SchemaError):
        standardize(d, ["missing"])


def test_subset_keeps_order_and_roles():
    d = from_frame(pd.DataFrame({"a": [1.0, 2.0, 3.0], "t": [0.0, 1.0, 0.0]}), {"a": "covariate", "t": "treatment"})
    sub = d.subset([2, 0])
    np.testing.assert_array_equal(sub.column("a"), [3.0, 1.0])
    assert sub.treatment == "t"


def test_standardization_params_round_trip():
    d = from_frame(pd.DataFrame({"a": [1.0, 2.0, 4.0]}), {"a": "covariate"})
    _, params = standardize(d, ["a"])
    assert type(params).from_dict(params.to_dict()) == params
