import io

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from funnelwatch.domain import ClaimAggregate, Reattribution, StratumKey, TransformSpec
from funnelwatch.errors import (
    DuplicateCell,
    InsufficientCount,
    SchemaError,
    TransformError,
    UnknownIdentifier,
)
from funnelwatch.ingest import (
    ClaimTable,
    Dataset,
    apply_transforms,
    canonical_bytes,
    largest_remainder,
    parse_claims,
    parse_population,
    parse_transforms,
    validate,
)

from conftest import F_LOW, M_LOW, make_dataset

HEADER = "provider,diagnosis,specialty,sex,age_group,ses,count\n"


class TestParseClaims:
    def test_three_rows(self):
        text = HEADER + (
            "P1,D1,S1,female,40-44,low,10\n"
            "P2,D1,S1,male,40-44,low,3\n"
            "P1,D2,S1,female,90+,high,0\n"
        )
        rows = parse_claims(text)
        assert [c.patient_count for c in rows] == [10, 3, 0]
        assert rows.row_numbers == [2, 3, 4]
        assert rows[2].stratum == StratumKey("female", "90+", "high")

    def test_duplicate_reports_both_rows(self):
        text = HEADER + (
            "P1,D1,S1,female,40-44,low,10\n"
            "P2,D1,S1,female,40-44,low,3\n"
            "P3,D1,S1,female,40-44,low,3\n"
            "P1,D1,S1,female,40-44,low,4\n"
        )
        with pytest.raises(DuplicateCell) as err:
            parse_claims(text)
        assert (err.value.first_row, err.value.second_row) == (2, 5)

    def test_negative_count(self):
        text = HEADER + "P1,D1,S1,female,40-44,low,5\nP1,D2,S1,female,40-44,low,-1\n"
        with pytest.raises(ValueError) as err:
            parse_claims(text)
        assert err.value.row == 3

    def test_non_integer_count(self):
        with pytest.raises(ValueError, match="row 2"):
            parse_claims(HEADER + "P1,D1,S1,female,40-44,low,2.5\n")

    def test_unknown_label(self):
        with pytest.raises(SchemaError, match="ses"):
            parse_claims(HEADER + "P1,D1,S1,female,40-44,posh,2\n")

    def test_missing_column(self):
        with pytest.raises(SchemaError, match="count"):
            parse_claims("provider,diagnosis,specialty,sex,age_group,ses\n")

    def test_column_mapping_and_tabs(self):
        text = "prov\tdx\tspec\tsex\tage_group\tses\tn\nP1\tD1\tS1\tmale\t0-4\tmiddle\t7\n"
        schema = {"provider": "prov", "diagnosis": "dx", "specialty": "spec", "count": "n"}
        (c,) = parse_claims(text, schema, delimiter="\t")
        assert c == ClaimAggregate("P1", "D1", "S1", StratumKey("male", "0-4", "middle"), 7)


class TestParsePopulation:
    def test_region_column(self):
        text = "sex,age_group,ses,region,persons\nfemale,40-44,low,N,100\nfemale,40-44,low,S,50\n"
        cells = parse_population(text)
        assert sum(c.person_count for c in cells) == 150
        assert {c.region_id for c in cells} == {"N", "S"}

    def test_duplicate(self):
        text = "sex,age_group,ses,persons\nfemale,40-44,low,100\nfemale,40-44,low,50\n"
        with pytest.raises(DuplicateCell):
            parse_population(text)


def _base():
    cells = {
        ("P1", "D1", "S1", F_LOW): 10,
        ("P1", "D2", "S1", F_LOW): 5,
        ("P2", "D1", "S1", M_LOW): 7,
        ("P3", "D3", "S2", F_LOW): 4,
    }
    return make_dataset(cells, {F_LOW: 1000, M_LOW: 900}, providers={"P1", "P2", "P3"})


def _counts(ds):
    return {c.cell: c.patient_count for c in ds.claims}


class TestTransforms:
    def test_group_adds(self):
        spec = TransformSpec.from_dict({"diagnosis_groups": {"G": ["D1", "D2"]}})
        out = _counts(apply_transforms(_base(), spec))
        assert out[("P1", "G", F_LOW)] == 15
        assert ("P1", "D1", F_LOW) not in out

    def test_empty_spec_is_identity(self):
        ds = _base()
        assert canonical_bytes(apply_transforms(ds, TransformSpec())) == canonical_bytes(ds)

    def test_reattribution(self):
        spec = TransformSpec(reattributions=(Reattribution("P1", "P2", "D1", count=4),))
        out = _counts(apply_transforms(_base(), spec))
        assert out[("P1", "D1", F_LOW)] == 6
        assert out[("P2", "D1", F_LOW)] == 4

    def test_reattribution_fraction(self):
        spec = TransformSpec(reattributions=(Reattribution("P1", "P2", "D1", fraction=0.5),))
        out = _counts(apply_transforms(_base(), spec))
        assert out[("P1", "D1", F_LOW)] == 5 and out[("P2", "D1", F_LOW)] == 5

    def test_reattribution_too_large(self):
        spec = TransformSpec(reattributions=(Reattribution("P1", "P2", "D1", count=11),))
        with pytest.raises(InsufficientCount):
            apply_transforms(_base(), spec)

    def test_unknown_ids(self):
        with pytest.raises(UnknownIdentifier):
            apply_transforms(_base(), TransformSpec.from_dict({"diagnosis_groups": {"G": ["D1", "D9"]}}))
        with pytest.raises(UnknownIdentifier):
            apply_transforms(_base(), TransformSpec.from_dict(
                {"provider_merges": [{"into": "M", "providers": ["P1", "P9"]}]}))

    def test_group_across_specialties(self):
        with pytest.raises(TransformError):
            apply_transforms(_base(), TransformSpec.from_dict({"diagnosis_groups": {"G": ["D1", "D3"]}}))

    def test_scoped_merge(self):
        spec = TransformSpec.from_dict(
            {"provider_merges": [{"into": "M", "providers": ["P1", "P2"], "diagnoses": ["D1"]}]})
        ds = apply_transforms(_base(), spec)
        out = _counts(ds)
        assert out[("M", "D1", F_LOW)] == 10 and out[("M", "D1", M_LOW)] == 7
        assert out[("P1", "D2", F_LOW)] == 5
        assert "P1" in ds.providers and "M" in ds.providers

    def test_merge_scoped_to_group(self):
        spec = TransformSpec.from_dict({
            "diagnosis_groups": {"G": ["D1", "D2"]},
            "provider_merges": [{"into": "M", "providers": ["P1", "P2"], "diagnoses": ["G"]}],
        })
        out = _counts(apply_transforms(_base(), spec))
        assert out[("M", "G", F_LOW)] == 15 and out[("M", "G", M_LOW)] == 7

    def test_yaml(self):
        text = (
            "diagnosis_groups:\n  G: [D1, D2]\n"
            "reattributions:\n  - {from: P1, to: P2, diagnosis: D1, count: 4}\n"
        )
        spec = parse_transforms(io.StringIO(text))
        assert spec.diagnosis_groups["G"] == frozenset({"D1", "D2"})
        assert spec.reattributions[0].count == 4

    def test_yaml_error_has_line(self):
        with pytest.raises(SchemaError) as err:
            parse_transforms("diagnosis_groups:\n  G: [D1,\n")
        assert err.value.row is not None

    @settings(max_examples=60, deadline=None)
    @given(
        st.lists(st.integers(0, 30), min_size=6, max_size=6),
        st.integers(0, 10), st.booleans(), st.booleans(),
    )
    def test_conservation_and_idempotence(self, counts, moved, group, merge):
        keys = [("P1", "D1", F_LOW), ("P1", "D2", M_LOW), ("P2", "D1", F_LOW),
                ("P2", "D2", F_LOW), ("P3", "D1", M_LOW), ("P3", "D2", F_LOW)]
        cells = {(p, d, "S1", s): n for (p, d, s), n in zip(keys, counts)}
        ds = make_dataset(cells, {F_LOW: 500, M_LOW: 500})
        d = {}
        if group:
            d["diagnosis_groups"] = {"G": ["D1", "D2"]}
        if merge:
            d["provider_merges"] = [{"into": "M", "providers": ["P2", "P3"]}]
        avail = counts[0]
        d["reattributions"] = [{"from": "P1", "to": "P3", "diagnosis": "D1", "count": min(moved, avail)}]
        spec = TransformSpec.from_dict(d)
        out = apply_transforms(ds, spec)

        def by_stratum(x):
            t = {}
            for c in x.claims:
                t[c.stratum] = t.get(c.stratum, 0) + c.patient_count
            return t

        assert by_stratum(out) == by_stratum(ds)
        if group and not merge:
            # reattribution and merges name pre-transform ids; grouping alone is idempotent
            again = apply_transforms(out, TransformSpec.from_dict({"diagnosis_groups": {"G": ["D1", "D2"]}}))
            assert canonical_bytes(again) == canonical_bytes(out)


class TestLargestRemainder:
    @given(st.integers(0, 1000), st.lists(st.integers(0, 100), min_size=1, max_size=10))
    def test_sums(self, total, weights):
        parts = largest_remainder(total, weights)
        if sum(weights):
            assert sum(parts) == total
            assert all(p >= 0 for p in parts)
        else:
            assert parts == [0] * len(weights)


class TestValidate:
    def test_consistent(self):
        assert validate(_base()) == []

    def test_missing_stratum(self):
        other = StratumKey("male", "90+", "high")
        ds = make_dataset({("P1", "D1", "S1", other): 3, ("P2", "D1", "S1", F_LOW): 2}, {F_LOW: 100})
        (d,) = validate(ds)
        assert d.severity == "error" and "90+" in d.location

    def test_zero_claims_warning(self):
        ds = make_dataset({("P1", "D1", "S1", F_LOW): 3, ("P2", "D1", "S1", F_LOW): 0}, {F_LOW: 100})
        (d,) = validate(ds)
        assert d.severity == "warning" and "P2" in d.location

    def test_unregistered_provider(self):
        ds = make_dataset({("P1", "D1", "S1", F_LOW): 3}, {F_LOW: 100}, providers={"P0"})
        sev = sorted(d.severity for d in validate(ds))
        assert "error" in sev

    def test_insured_population_mismatch(self):
        ds = make_dataset({("P1", "D1", "S1", F_LOW): 3}, {F_LOW: 100}, metadata={"insured_population": 99})
        (d,) = validate(ds)
        assert d.location == "population"


class TestClaimTable:
    def test_round_trip(self):
        ds = _base()
        back = ClaimTable.from_dataset(ds).to_dataset()
        assert canonical_bytes(back) == canonical_bytes(ds)

    def test_dataset_rejects_duplicates(self):
        c = ClaimAggregate("P1", "D1", "S1", F_LOW, 1)
        with pytest.raises(ValueError):
            Dataset([c, c], [])
