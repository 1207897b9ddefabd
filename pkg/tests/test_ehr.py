import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ehr_rewrite.ehr import (FeatureCatalog, FeatureInfo, Modality, PatientEHR, Rewrite, format_value,
                             token_length, validate_ehr, verbalize, verbalize_rewrite)
from ehr_rewrite.errors import NotASubset, SchemaError

from conftest import CATALOG, ehrs, random_ehr


def reference_render(ehr, catalog):
    """Independent renderer: group by modality, sort each group by time then position."""
    order = list(Modality)
    rows = sorted(
        ((order.index(catalog[x.feature].modality), x.t, i, x) for i, x in enumerate(ehr.tuples)),
        key=lambda r: r[:3],
    )
    out, last = [], None
    for rank, _, _, x in rows:
        if rank != last:
            out.append("# " + order[rank].value)
            last = rank
        out.append("- " + catalog[x.feature].display_name + ": " + format_value(x.value))
    return "\n".join(out)


def test_single_lab_tuple(catalog):
    ehr = PatientEHR("p", visits=((("potassium", 4.1, 1),),))
    text = verbalize(ehr, catalog).text
    assert text == "# lab\n- potassium: 4.1"


def test_empty_ehr(catalog):
    v = verbalize(PatientEHR("p"), catalog)
    assert v.text == "" and v.token_count == 0


def test_same_feature_in_timestamp_order(catalog):
    ehr = PatientEHR("p", visits=((("potassium", 3.9, 2),), (("potassium", 4.4, 1),)))
    text = verbalize(ehr, catalog).text
    assert text.index("3.9") > text.index("4.4")
    assert text == reference_render(ehr, catalog)


@settings(max_examples=200, deadline=None)
@given(ehrs())
def test_verbalize_matches_reference(ehr):
    assert verbalize(ehr, CATALOG).text == reference_render(ehr, CATALOG)


@settings(max_examples=200, deadline=None)
@given(ehrs(), st.integers(0, 2**31 - 1))
def test_verbalize_rewrite_equals_materialized(ehr, seed):
    keep = np.random.default_rng(seed).random(len(ehr.tuples)) < 0.5
    rw = Rewrite(ehr.patient_id, tuple(np.flatnonzero(keep)), "test")
    assert verbalize_rewrite(ehr, rw, CATALOG) == verbalize(rw.materialize(ehr), CATALOG)


def test_verbalize_is_deterministic(catalog):
    ehr = random_ehr(np.random.default_rng(3))
    assert verbalize(ehr, catalog) == verbalize(PatientEHR(ehr.patient_id, ehr.demographics, ehr.visits), catalog)


def test_format_value():
    assert format_value(4.10) == "4.1"
    assert format_value(3) == "3"
    assert format_value(-0.0) == "0"
    assert format_value(None) == "(missing)"
    assert format_value("F") == "F"


def test_token_length_examples():
    assert token_length("") == 0
    assert token_length("- potassium: 4.1") == 3


def test_token_length_long_ehr(catalog):
    rng = np.random.default_rng(0)
    visits = tuple(tuple(("lab0", float(rng.normal()), t) for _ in range(60)) for t in range(10))
    ehr = PatientEHR("p", visits=visits)
    assert len(ehr.tuples) == 600
    v = verbalize(ehr, catalog)
    assert token_length(v) == len([w for w in v.text.replace("\n", " ").split(" ") if w])


def test_validate_valid(catalog):
    assert validate_ehr(random_ehr(np.random.default_rng(1)), catalog) == []


def test_validate_unknown_feature(catalog):
    ehr = PatientEHR("p", visits=((("sodium", 140.0, 1),),))
    issues = validate_ehr(ehr, catalog)
    assert [i.kind for i in issues] == ["UnknownFeature"]


def test_validate_decreasing_timestamps(catalog):
    ehr = PatientEHR("p", visits=((("lab0", 1.0, 5), ("lab1", 2.0, 3)),))
    issues = validate_ehr(ehr, catalog)
    assert [(i.kind, i.index) for i in issues] == [("TimestampOrder", 1)]


def test_validate_value_kind(catalog):
    ehr = PatientEHR("p", visits=((("cat0", 2.0, 1), ("lab0", "high", 1)),))
    assert [i.kind for i in validate_ehr(ehr, catalog)] == ["ValueKind", "ValueKind"]


def test_abnormal_flag():
    info = FeatureInfo("potassium", Modality.LAB, reference_range=(3.5, 5.0))
    assert info.is_abnormal(6.1) and info.is_abnormal(3.0)
    assert not info.is_abnormal(4.0) and not info.is_abnormal(None)


def test_feature_info_rejects_bad_range():
    with pytest.raises(ValueError):
        FeatureInfo("x", Modality.LAB, reference_range=(5.0, 5.0))


def test_catalog_round_trip(tmp_path, catalog):
    catalog.save(tmp_path / "c.json")
    assert FeatureCatalog.load(tmp_path / "c.json") == catalog


def test_catalog_schema_error():
    with pytest.raises(SchemaError, match="modality"):
        FeatureCatalog.from_json({"k": {"display_name": "k"}})


def test_rewrite_subset_checks():
    ehr = random_ehr(np.random.default_rng(2))
    with pytest.raises(NotASubset):
        Rewrite(ehr.patient_id, (len(ehr.tuples),), "x").check(ehr)
    with pytest.raises(NotASubset):
        Rewrite("other", (0,), "x").check(ehr)
    with pytest.raises(NotASubset):
        Rewrite.from_tuples(ehr, [("lab0", 999.0, 99)], "x")


@settings(max_examples=100, deadline=None)
@given(ehrs(), st.integers(0, 2**31 - 1))
def test_from_tuples_inverts_materialize(ehr, seed):
    keep = np.random.default_rng(seed).random(len(ehr.tuples)) < 0.5
    rw = Rewrite(ehr.patient_id, tuple(np.flatnonzero(keep)), "x")
    back = Rewrite.from_tuples(ehr, rw.materialize(ehr).tuples, "x")
    assert sorted(ehr.tuples[i] for i in back.kept) == sorted(ehr.tuples[i] for i in rw.kept)
