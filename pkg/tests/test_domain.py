import json

import pytest

from funnelwatch.domain import (
    ClaimAggregate,
    FunnelChart,
    FunnelPoint,
    PopulationCell,
    ProviderDiagnosisStats,
    RandomEffectsFit,
    StratumKey,
    TransformSpec,
    sorted_strata,
)
from funnelwatch.engine import funnel_limits
from funnelwatch.errors import InvariantError


class TestRecords:
    def test_claim_round_trip(self):
        c = ClaimAggregate("P1", "D1", "S1", StratumKey("male", "0-4", "low"), 3)
        assert ClaimAggregate.from_dict(json.loads(json.dumps(c.to_dict()))) == c

    def test_negative_count(self):
        with pytest.raises(InvariantError):
            ClaimAggregate("P1", "D1", "S1", StratumKey("male", "0-4", "low"), -1)

    def test_population_negative(self):
        with pytest.raises(InvariantError):
            PopulationCell(StratumKey("male", "0-4", "low"), -5)

    def test_stats_precision(self):
        s = ProviderDiagnosisStats("P", "D", 10, 1000.0, 12.0, -0.2, 0.25)
        assert s.precision == 4.0
        assert ProviderDiagnosisStats.from_dict(s.to_dict()) == s

    def test_stratum_order(self):
        a = StratumKey("male", "90+", "low")
        b = StratumKey("female", "5-9", "low")
        c = StratumKey("female", "0-4", "low")
        assert sorted_strata([a, b, c]) == [c, b, a]


def _fit(**kw):
    base = dict(diagnosis_id="D", mu_hat=0.0, tau2_hat=3.0, q_statistic=8.0, k=3,
                provider_ids=("a", "b", "c"), excess=(-2.0, 0.0, 2.0), weights=(0.25, 0.25, 0.25),
                shrunken=(-1.5, 0.0, 1.5))
    base.update(kw)
    return RandomEffectsFit(**base)


class TestFit:
    def test_valid(self):
        f = _fit()
        assert f.i_squared == pytest.approx(0.75)
        assert RandomEffectsFit.from_dict(f.to_dict()) == f

    def test_negative_tau(self):
        with pytest.raises(InvariantError) as err:
            _fit(tau2_hat=-0.1)
        assert err.value.field == "tau2_hat"

    def test_mu_not_weighted_mean(self):
        with pytest.raises(InvariantError):
            _fit(mu_hat=0.5, shrunken=(-1.0, 0.5, 1.5))

    def test_shrinkage_outside(self):
        with pytest.raises(InvariantError):
            _fit(shrunken=(-2.5, 0.0, 1.5))


def _chart(points=(), levels=(2.0, 3.0), mu=0.0, tau2=0.01):
    curves = funnel_limits((mu, tau2), [1.0, 5.0, 10.0], levels)
    return FunnelChart("D", tuple(points), mu, tau2, curves, levels, levels[0])


class TestChart:
    def test_counts(self):
        ch = _chart([FunnelPoint("a", 10.0, 1.0, "above"), FunnelPoint("b", 10.0, 0.0, "within")])
        assert ch.flag_counts() == {"above": 1, "below": 0, "within": 1}
        assert FunnelChart.from_dict(json.loads(json.dumps(ch.to_dict()))) == ch

    def test_inconsistent_flag(self):
        with pytest.raises(InvariantError):
            _chart([FunnelPoint("a", 10.0, 0.0, "above")])

    def test_curves_must_match_levels(self):
        curves = funnel_limits((0.0, 0.0), [1.0], [2.0])
        with pytest.raises(InvariantError):
            FunnelChart("D", (), 0.0, 0.0, curves, (2.0, 3.0), 2.0)

    def test_bad_flag(self):
        with pytest.raises(InvariantError):
            FunnelPoint("a", 1.0, 0.0, "sideways")


class TestTransformSpec:
    def test_overlapping_groups(self):
        with pytest.raises(InvariantError):
            TransformSpec.from_dict({"diagnosis_groups": {"G": ["D1", "D2"], "H": ["D2"]}})

    def test_round_trip(self):
        d = {
            "diagnosis_groups": {"G": ["D1", "D2"]},
            "provider_merges": [{"into": "M", "providers": ["P1", "P2"], "diagnoses": ["G"]}],
            "reattributions": [{"from": "P1", "to": "P2", "diagnosis": "D1", "count": 3}],
        }
        spec = TransformSpec.from_dict(d)
        assert TransformSpec.from_dict(spec.to_dict()) == spec
