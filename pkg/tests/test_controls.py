import math

import numpy as np
import pytest
from hypothesis import assume, given, strategies as st

from conftest import finite, make_table, tables
from expcontrols.controls import (
    ControlDeclaration,
    ControlKind,
    NcxLabel,
    classify_ncx,
    contrast_control_effect,
    control_value,
    control_values,
    holds_mask,
    validate_control,
)
from expcontrols.errors import DomainError, UnknownIdError

K = ControlKind


def decl_for(kind: ControlKind, **kw) -> ControlDeclaration:
    if kind.axis == "treatment":
        return ControlDeclaration(kind, "p", "w_nt", **kw)
    if kind.axis == "outcome":
        return ControlDeclaration(kind, "k", "w_at", **kw)
    return ControlDeclaration(kind, "k", contrast=("w_at", "w_ct"), **kw)


def test_control_value_examples():
    t = make_table([[[1.7, 3.0, 0.0], [1.7, 3.0, 3.0]]])
    assert control_value(decl_for(K.NULL_TREATMENT), t, "u0") == 0
    assert control_value(decl_for(K.NON_NULL_OUTCOME), t, "u0") == 1.7
    t2 = make_table([[[0.0, 0.0, 0.0], [3.0, 3.0, 0.0]]])
    assert control_value(decl_for(K.NULL_CONTRAST), t2, "u0") == 0


def test_control_value_unknown_ids():
    t = make_table(np.zeros((1, 2, 3)))
    with pytest.raises(UnknownIdError):
        control_value(ControlDeclaration(K.NULL_TREATMENT, "p", "w_zzz"), t, "u0")
    with pytest.raises(UnknownIdError):
        control_value(decl_for(K.NULL_TREATMENT), t, "nobody")


def test_validate_fraction_example():
    vals = np.zeros((3, 1, 3))
    vals[2, 0, 2] = 0.5
    rep = validate_control(decl_for(K.NULL_TREATMENT, epsilon=0.1), make_table(vals))
    assert rep.fraction_holding == pytest.approx(2 / 3)
    assert not rep.holds_for_all
    assert [c.holds for c in rep.per_unit.values()] == [True, True, False]


def test_all_zero_table():
    t = make_table(np.zeros((4, 2, 3)))
    for kind in K:
        rep = validate_control(decl_for(kind, min_magnitude=None if kind.is_null else 0.5), t)
        if kind.is_null:
            assert rep.holds_for_all
        else:
            assert rep.fraction_holding == 0


def test_contrast_control_effect():
    t = make_table([[[0, 0, 0], [2, 0, 0]], [[0, 0, 0], [4, 0, 0]]])
    assert contrast_control_effect(decl_for(K.NON_NULL_CONTRAST), t) == 3
    assert contrast_control_effect(decl_for(K.NULL_CONTRAST), make_table(np.zeros((2, 2, 3)))) == 0
    with pytest.raises(DomainError):
        contrast_control_effect(decl_for(K.NULL_TREATMENT), t)


def test_declaration_validation():
    with pytest.raises(DomainError):
        ControlDeclaration(K.NULL_CONTRAST, "k", contrast=("w_at", "w_at"))
    with pytest.raises(DomainError):
        ControlDeclaration(K.NULL_CONTRAST, "k", "w_at")
    with pytest.raises(DomainError):
        ControlDeclaration(K.NULL_TREATMENT, "p", "w_nt", contrast=("w_at", "w_ct"))
    with pytest.raises(DomainError):
        ControlDeclaration(K.NULL_TREATMENT, "p", "w_nt", epsilon=-1)
    with pytest.raises(DomainError):
        ControlDeclaration(K.NON_NULL_TREATMENT, "p", "w_nt", epsilon=0.5, min_magnitude=0.5)


def test_default_min_magnitude_is_next_float():
    d = decl_for(K.NON_NULL_TREATMENT, epsilon=0.25)
    assert d.nonzero_floor == math.nextafter(0.25, math.inf)


def test_null_value_override():
    t = make_table(np.ones((2, 1, 3)))
    assert validate_control(ControlDeclaration(K.NULL_TREATMENT, "p", "w_nt", null_value=1.0), t).holds_for_all
    assert not validate_control(ControlDeclaration(K.NULL_TREATMENT, "p", "w_nt"), t).holds_for_all


@pytest.mark.parametrize(
    "decl, label",
    [
        (ControlDeclaration(K.NULL_CONTRAST, "p", contrast=("w_at", "w_ct2")), NcxLabel.NEGATIVE_CONTROL_EXPOSURE),
        (ControlDeclaration(K.NULL_CONTRAST, "k", contrast=("w_at", "w_ct")), NcxLabel.NEGATIVE_CONTROL_OUTCOME),
        (ControlDeclaration(K.NON_NULL_CONTRAST, "p", contrast=("w_at", "w_ct2")), NcxLabel.POSITIVE_CONTROL_EXPOSURE),
        (ControlDeclaration(K.NON_NULL_CONTRAST, "k", contrast=("w_at", "w_ct")), NcxLabel.POSITIVE_CONTROL_OUTCOME),
        (ControlDeclaration(K.NULL_CONTRAST, "k", contrast=("w_at", "w_ct2")), NcxLabel.GENERIC_CONTRAST_CONTROL),
        (ControlDeclaration(K.NULL_CONTRAST, "p", contrast=("w_at", "w_ct")), NcxLabel.GENERIC_CONTRAST_CONTROL),
        (ControlDeclaration(K.NULL_TREATMENT, "p", "w_nt"), NcxLabel.NOT_A_CONTRAST_CONTROL),
        (ControlDeclaration(K.NON_NULL_OUTCOME, "k", "w_at"), NcxLabel.NOT_A_CONTRAST_CONTROL),
    ],
)
def test_classify_ncx(decl, label):
    assert classify_ncx(decl, "p", "w_at", "w_ct") is label


def test_kind_metadata():
    assert {k.axis for k in K} == {"treatment", "outcome", "contrast"}
    for k in K:
        assert k.dual.dual is k
        assert k.dual.is_null != k.is_null
        assert k.dual.axis == k.axis


eps_mm = st.tuples(st.floats(0, 2), st.floats(0.01, 2)).map(lambda p: (p[0], p[0] + p[1]))


@given(st.lists(finite, min_size=1, max_size=30), eps_mm, st.floats(-2, 2))
def test_band_disjointness(vals, band, null):
    eps, mm = band
    d = decl_for(K.NULL_TREATMENT, epsilon=eps, min_magnitude=mm)
    null_hold = holds_mask(d, np.array(vals), null)
    other_hold = holds_mask(d.with_kind(K.NON_NULL_TREATMENT), np.array(vals), null)
    assert not np.any(null_hold & other_hold)


@given(tables(), st.sampled_from(list(K)), eps_mm)
def test_kind_duality_and_report_consistency(table, kind, band):
    eps, mm = band
    d = decl_for(kind, epsilon=eps, min_magnitude=mm)
    assume(table.outcome_ids.__contains__(d.outcome))
    r1 = validate_control(d, table)
    r2 = validate_control(d.with_kind(kind.dual), table)
    for u in table.unit_ids:
        assert not (r1.per_unit[u].holds and r2.per_unit[u].holds)
    count = sum(c.holds for c in r1.per_unit.values())
    assert r1.fraction_holding == count / len(table)
    assert r1.holds_for_all == (r1.fraction_holding == 1)


@given(tables(), st.sampled_from([K.NULL_CONTRAST, K.NON_NULL_CONTRAST]))
def test_contrast_symmetry(table, kind):
    d = ControlDeclaration(kind, "p", contrast=("w_at", "w_ct"))
    np.testing.assert_array_equal(control_values(d.swapped(), table), -control_values(d, table))
    assert contrast_control_effect(d.swapped(), table) == pytest.approx(-contrast_control_effect(d, table))
