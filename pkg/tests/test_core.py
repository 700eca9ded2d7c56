from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fluxmice.core import (
    ColumnSpec,
    DataError,
    DataTable,
    DomainError,
    ParseError,
    SchemaError,
    StratificationError,
    TransformLedger,
    apply_transforms,
    filter_high_missing_rows,
    forward_transform,
    inverse_transform,
    load_csv,
    save_csv,
    split_train_validation,
)

NAN = math.nan


def _table(values, kinds=None, roles=None, transforms=None):
    values = np.asarray(values, dtype=float)
    p = values.shape[1]
    kinds = kinds or ["continuous"] * p
    roles = roles or ["predictor"] * p
    transforms = transforms or [None] * p
    cols = tuple(ColumnSpec(f"v{j}", k, r, t) for j, (k, r, t) in enumerate(zip(kinds, roles, transforms)))
    return DataTable(cols, values)


def test_missing_mask_marks_nan_only():
    t = _table([[1.0, NAN], [0.0, 2.5]])
    assert t.mask.tolist() == [[True, False], [True, True]]


def test_binary_column_rejects_other_values():
    with pytest.raises(DataError):
        _table([[0.5]], kinds=["binary"])


def test_duplicate_names_rejected():
    with pytest.raises(SchemaError):
        DataTable((ColumnSpec("a"), ColumnSpec("a")), np.zeros((1, 2)))


def test_unknown_role_rejected():
    with pytest.raises(SchemaError):
        ColumnSpec("a", role="target")


def test_outcome_must_be_unique_binary():
    t = _table([[1.0, 0.0]], kinds=["continuous", "binary"], roles=["predictor", "outcome"])
    assert t.outcome == "v1"
    with pytest.raises(SchemaError):
        _table([[1.0, 0.0]], roles=["outcome", "outcome"]).outcome


def test_csv_round_trip_preserves_values_and_missingness(tmp_path):
    rng = np.random.default_rng(5)
    v = rng.normal(size=(40, 3)) * 1e3
    v[rng.random(v.shape) < 0.2] = NAN
    v[:, 2] = rng.integers(0, 2, 40)
    v[3, 2] = NAN
    t = _table(v, kinds=["continuous", "continuous", "binary"])
    save_csv(t, tmp_path / "t.csv")
    back = load_csv(tmp_path / "t.csv", t.columns)
    assert back.equals(t)


def test_parse_error_names_row_and_column(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("v0,v1\n1,2\n3,abc\n")
    with pytest.raises(ParseError) as err:
        load_csv(p, (ColumnSpec("v0"), ColumnSpec("v1")))
    assert err.value.row == 2 and err.value.column == "v1"


def test_missing_schema_column_is_schema_error(tmp_path):
    p = tmp_path / "t.csv"
    p.write_text("v0\n1\n")
    with pytest.raises(SchemaError):
        load_csv(p, (ColumnSpec("v0"), ColumnSpec("v1")))


def test_empty_cells_and_na_are_missing(tmp_path):
    p = tmp_path / "t.csv"
    p.write_text("a,b\n,NA\n1,2\n")
    t = load_csv(p, (ColumnSpec("a"), ColumnSpec("b")))
    assert np.isnan(t.values[0]).all() and t.values[1].tolist() == [1.0, 2.0]


def test_row_filter_threshold_and_idempotence():
    v = np.array([[1, NAN, NAN, 0], [1, 2, NAN, 1], [NAN, NAN, NAN, 0], [1, 2, 3, 1]], dtype=float)
    t = _table(v, kinds=["continuous"] * 3 + ["binary"], roles=["predictor"] * 3 + ["outcome"])
    out, rep = filter_high_missing_rows(t, 0.6)
    # 2/3 and 3/3 missing predictors reach the 0.6 threshold
    assert rep["removed"] == 2 and out.n_rows == 2
    again, rep2 = filter_high_missing_rows(out, 0.6)
    assert rep2["removed"] == 0 and again.equals(out)


def test_transform_appends_derived_columns_and_inverts():
    t = _table([[4.0, 1.0], [NAN, 9.0]], transforms=["log", "sqrt"])
    ledger = TransformLedger.from_schema(t.columns)
    out = apply_transforms(t, ledger)
    assert out.names == ["v0", "v1", "log_v0", "sqrt_v1"]
    assert np.isnan(out.column("log_v0")[1])
    assert out.column("sqrt_v1").tolist() == [1.0, 3.0]
    assert ledger.analysis_name("v0") == "log_v0" and ledger.analysis_name("x") == "x"


def test_log_of_nonpositive_is_domain_error():
    t = _table([[1.0], [0.0]], transforms=["log"])
    with pytest.raises(DomainError) as err:
        apply_transforms(t, TransformLedger.from_schema(t.columns))
    assert err.value.row == 1 and err.value.column == "v0"


@given(st.lists(st.floats(1e-6, 1e6), min_size=1, max_size=30), st.sampled_from(["log", "sqrt"]))
def test_transform_inverse_round_trip(xs, kind):
    x = np.array(xs)
    np.testing.assert_allclose(inverse_transform(kind, forward_transform(kind, x)), x, rtol=1e-12)


def _labelled(n_pos, n_neg):
    y = np.r_[np.ones(n_pos), np.zeros(n_neg)]
    v = np.column_stack([np.arange(y.size, dtype=float), y])
    return _table(v, kinds=["continuous", "binary"], roles=["predictor", "outcome"])


def test_split_is_stratified_and_deterministic():
    t = _labelled(30, 170)
    tr, va = split_train_validation(t, 0.7, seed=11)
    tr2, va2 = split_train_validation(t, 0.7, seed=11)
    assert tr.equals(tr2) and va.equals(va2)
    assert tr.column("v1").sum() == 21 and va.column("v1").sum() == 9
    assert tr.n_rows + va.n_rows == 200
    assert not set(tr.column("v0")) & set(va.column("v0"))


def test_split_keeps_one_row_per_side_in_small_strata():
    tr, va = split_train_validation(_labelled(2, 50), 0.95, seed=0)
    assert tr.column("v1").sum() == 1 and va.column("v1").sum() == 1


def test_split_rejects_singleton_stratum():
    with pytest.raises(StratificationError):
        split_train_validation(_labelled(1, 50), 0.7, seed=0)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 40), st.integers(2, 40), st.floats(0.05, 0.95), st.integers(0, 2**31))
def test_split_partitions_rows(n_pos, n_neg, frac, seed):
    t = _labelled(n_pos, n_neg)
    tr, va = split_train_validation(t, frac, seed)
    ids = np.sort(np.r_[tr.column("v0"), va.column("v0")])
    assert ids.tolist() == list(range(n_pos + n_neg))
