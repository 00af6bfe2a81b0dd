import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from funnelwatch.engine import (
    AnalysisConfig,
    analyze_dataset,
    excess_log_odds,
    fit_random_effects,
    flag_providers,
    funnel_limits,
    precision_grid,
)
from funnelwatch.errors import (
    InconsistentCounts,
    InsufficientProviders,
    InvalidGrid,
    InvalidPopulation,
    InvalidStandardError,
)

from conftest import F_LOW, M_LOW, make_dataset


def dl_exact(y, s):
    """DerSimonian-Laird in rational arithmetic, with tau2 and mu as Fractions.

    ``s`` enters only through ``s**2``, so the inputs are taken as exact
    variances. The random-effects mean divides by ``s**2 + tau2``, which
    stays rational.
    """
    y = [Fraction(v) for v in y]
    v = [Fraction(x) ** 2 for x in s]
    w = [1 / vi for vi in v]
    sw = sum(w)
    ybar = sum(wi * yi for wi, yi in zip(w, y)) / sw
    q = sum(wi * (yi - ybar) ** 2 for wi, yi in zip(w, y))
    denom = sw - sum(wi * wi for wi in w) / sw
    tau2 = max(Fraction(0), (q - (len(y) - 1)) / denom)
    ws = [1 / (vi + tau2) for vi in v]
    mu = sum(wi * yi for wi, yi in zip(ws, y)) / sum(ws)
    return mu, tau2, q


class TestExcess:
    def test_identity_zero(self):
        y, s = excess_log_odds(50, 100, 50)
        assert y == 0.0
        assert s == pytest.approx(math.sqrt(1 / 50 + 1 / 50), rel=1e-15)
        assert s == pytest.approx(0.2, rel=1e-15)

    def test_ln3(self):
        y, s = excess_log_odds(75, 100, 50)
        assert y == pytest.approx(math.log(3), rel=1e-14)
        assert s == pytest.approx(math.sqrt(1 / 75 + 1 / 25), rel=1e-14)

    def test_zero_observed_is_corrected(self):
        y, s = excess_log_odds(0, 1000, 5)
        o, n = 0.5, 1001.0
        expect = math.log(o / (n - o)) - math.log(5 / 995)
        assert math.isfinite(y) and y < 0
        assert y == pytest.approx(expect, rel=1e-13)
        assert s == pytest.approx(math.sqrt(1 / o + 1 / (n - o)), rel=1e-13)

    def test_boundary_without_correction_raises(self):
        with pytest.raises(InconsistentCounts):
            excess_log_odds(0, 1000, 5, correct=False)

    def test_bad_population(self):
        with pytest.raises(InvalidPopulation):
            excess_log_odds(1, 0, 1)

    def test_observed_far_above_population(self):
        with pytest.raises(InconsistentCounts):
            excess_log_odds(50, 10, 5)

    @given(st.integers(1, 10_000), st.floats(0.01, 0.99), st.floats(0.01, 0.99))
    def test_finite_and_antisymmetric(self, n, po, pe):
        o = max(1, min(n - 1, round(po * n))) if n > 1 else 1
        e = pe * n
        if n < 2:
            return
        y, s = excess_log_odds(o, n, e)
        assert math.isfinite(y) and s > 0
        y2, _ = excess_log_odds(n - o, n, n - e)
        assert y2 == pytest.approx(-y, abs=1e-9)


class TestRandomEffects:
    def test_homogeneous(self):
        fit = fit_random_effects([0.0, 0.0, 0.0], [1.0, 1.0, 1.0])
        assert fit.q_statistic == 0.0
        assert fit.tau2_hat == 0.0
        assert fit.mu_hat == 0.0

    def test_worked_example(self):
        fit = fit_random_effects([-2.0, 0.0, 2.0], [1.0, 1.0, 1.0])
        assert fit.q_statistic == pytest.approx(8.0, rel=1e-12)
        assert fit.tau2_hat == pytest.approx(3.0, rel=1e-12)
        assert fit.mu_hat == pytest.approx(0.0, abs=1e-12)
        assert fit.weights == pytest.approx((0.25, 0.25, 0.25))

    def test_q_equal_to_degrees_of_freedom(self):
        fit = fit_random_effects([-1.0, 0.0, 1.0], [1.0, 1.0, 1.0])
        assert fit.q_statistic == pytest.approx(2.0, rel=1e-15)
        assert fit.tau2_hat == 0.0

    def test_accepts_pairs(self):
        a = fit_random_effects([(-2.0, 1.0), (0.0, 1.0), (2.0, 1.0)])
        b = fit_random_effects([-2.0, 0.0, 2.0], [1.0, 1.0, 1.0])
        assert a.tau2_hat == b.tau2_hat and a.mu_hat == b.mu_hat

    def test_too_few(self):
        with pytest.raises(InsufficientProviders):
            fit_random_effects([0.3], [0.1])

    def test_nonpositive_se(self):
        with pytest.raises(InvalidStandardError):
            fit_random_effects([0.1, 0.2], [0.1, 0.0])

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.tuples(st.integers(-400, 400), st.integers(1, 40)), min_size=2, max_size=30))
    def test_matches_rational_oracle(self, pairs):
        y = [a / 100 for a, _ in pairs]
        s = [b / 20 for _, b in pairs]
        fit = fit_random_effects(y, s)
        mu, tau2, q = dl_exact([Fraction(a, 100) for a, _ in pairs], [Fraction(b, 20) for _, b in pairs])
        scale = max(1.0, float(max(abs(v) for v in y)))
        assert fit.tau2_hat == pytest.approx(float(tau2), rel=1e-9, abs=1e-12 * scale ** 2)
        assert fit.mu_hat == pytest.approx(float(mu), rel=1e-9, abs=1e-12 * scale)
        assert fit.q_statistic == pytest.approx(float(q), rel=1e-9, abs=1e-9)
        if q <= len(pairs) - 1:
            assert fit.tau2_hat == 0.0

    @settings(max_examples=150, deadline=None)
    @given(
        st.lists(st.tuples(st.floats(-3, 3), st.floats(0.05, 2)), min_size=2, max_size=25),
        st.floats(-5, 5),
    )
    def test_translation_equivariance(self, pairs, a):
        y = np.array([p[0] for p in pairs])
        s = np.array([p[1] for p in pairs])
        f0 = fit_random_effects(y, s)
        f1 = fit_random_effects(y + a, s)
        assert f1.mu_hat == pytest.approx(f0.mu_hat + a, abs=1e-9)
        assert f1.tau2_hat == pytest.approx(f0.tau2_hat, rel=1e-7, abs=1e-9)
        np.testing.assert_allclose(np.array(f1.shrunken) - a, f0.shrunken, atol=1e-8)
        # flags move with the fit except for points numerically on a limit
        z0 = (y - f0.mu_hat) / np.sqrt(s * s + f0.tau2_hat)
        clear = np.abs(np.abs(z0) - 2.0) > 1e-6
        g0 = np.array(flag_providers(y, f0, 2.0, std_errors=s))
        g1 = np.array(flag_providers(y + a, f1, 2.0, std_errors=s))
        assert (g0[clear] == g1[clear]).all()

    @settings(max_examples=150, deadline=None)
    @given(st.lists(st.tuples(st.floats(-3, 3), st.floats(0.05, 2)), min_size=2, max_size=25))
    def test_shrinkage_bounds_and_nonnegative_tau(self, pairs):
        y = np.array([p[0] for p in pairs])
        s = np.array([p[1] for p in pairs])
        fit = fit_random_effects(y, s)
        assert fit.tau2_hat >= 0.0
        for yi, sh in zip(y, fit.shrunken):
            lo, hi = min(yi, fit.mu_hat), max(yi, fit.mu_hat)
            assert lo <= sh <= hi


class TestLimits:
    def test_fixed_effect_case(self):
        (curve,) = funnel_limits((0.0, 0.0), [5.0], [2.0])
        assert curve.lower[0] == pytest.approx(-0.4, rel=1e-15)
        assert curve.upper[0] == pytest.approx(0.4, rel=1e-15)

    def test_random_effect_case(self):
        (curve,) = funnel_limits((0.1, 0.03), [10.0], [3.0])
        assert curve.lower[0] == pytest.approx(-0.5, rel=1e-14)
        assert curve.upper[0] == pytest.approx(0.7, rel=1e-14)

    @given(st.floats(0.01, 100), st.floats(0.5, 4))
    def test_half_width_reduces_to_cs(self, p, c):
        (curve,) = funnel_limits((0.0, 0.0), [p], [c])
        assert curve.upper[0] == pytest.approx(c / p, rel=1e-14)

    def test_empty_grid(self):
        with pytest.raises(InvalidGrid):
            funnel_limits((0.0, 0.1), [], [2.0])

    def test_grid_contains_point_precisions(self):
        s = np.array([0.5, 0.2, 0.1])
        g = precision_grid(s, 200)
        assert set((1 / s).tolist()) <= set(g.tolist())
        assert len(g) >= 200

    def test_degenerate_grid_widened(self):
        g = precision_grid([0.5, 0.5], 200)
        assert g[0] == pytest.approx(1.8) and g[-1] == pytest.approx(2.2)


class _Fit:
    def __init__(self, mu, tau2):
        self.mu_hat, self.tau2_hat = mu, tau2


class TestFlags:
    def test_center_within(self):
        assert flag_providers([0.3], _Fit(0.3, 0.01), 2.0, std_errors=[0.1]) == ["within"]

    def test_threshold_crossing(self):
        mu, tau2, s = 0.1, 0.02, 0.15
        y = mu + 2.001 * math.sqrt(s * s + tau2)
        assert flag_providers([y], _Fit(mu, tau2), 2.0, std_errors=[s]) == ["above"]
        assert flag_providers([y], _Fit(mu, tau2), 3.0, std_errors=[s]) == ["within"]
        assert flag_providers([2 * mu - y], _Fit(mu, tau2), 2.0, std_errors=[s]) == ["below"]

    @settings(max_examples=100, deadline=None)
    @given(
        st.lists(st.tuples(st.floats(-3, 3), st.floats(0.05, 2)), min_size=2, max_size=25),
        st.floats(0.5, 3), st.floats(0.0, 2),
    )
    def test_monotone_in_c(self, pairs, c1, dc):
        y = [p[0] for p in pairs]
        s = [p[1] for p in pairs]
        fit = fit_random_effects(y, s)
        f1 = flag_providers(y, fit, c1, std_errors=s)
        f2 = flag_providers(y, fit, c1 + dc, std_errors=s)
        flagged1 = {i for i, f in enumerate(f1) if f != "within"}
        flagged2 = {i for i, f in enumerate(f2) if f != "within"}
        assert flagged2 <= flagged1


class TestPipeline:
    def test_identical_providers(self):
        cells = {}
        for p in ("A", "B"):
            cells[(p, "D", "S", F_LOW)] = 40
            cells[(p, "D", "S", M_LOW)] = 40
        ds = make_dataset(cells, {F_LOW: 10_000, M_LOW: 10_000})
        (r,) = analyze_dataset(ds)
        assert r.analyzed
        assert r.flags == {"A": "within", "B": "within"}
        assert r.stats[0].excess == r.stats[1].excess
        assert r.fit.tau2_hat == 0.0

    def test_observed_equals_expected(self):
        # one stratum and identical market shares: every provider has o = e
        cells = {(p, "D", "S", F_LOW): 25 for p in "ABCD"}
        ds = make_dataset(cells, {F_LOW: 20_000})
        (r,) = analyze_dataset(ds)
        for stat in r.stats:
            assert stat.observed == pytest.approx(stat.expected, rel=1e-12)
            assert stat.excess == pytest.approx(0.0, abs=1e-12)
        assert set(r.flags.values()) == {"within"}

    def test_single_provider_skipped(self):
        ds = make_dataset({("A", "D", "S", F_LOW): 5}, {F_LOW: 1000})
        (r,) = analyze_dataset(ds)
        assert r.skipped == "insufficient_providers"

    def test_min_observed_excludes(self):
        cells = {("A", "D", "S", F_LOW): 30, ("B", "D", "S", F_LOW): 20, ("C", "D", "S", F_LOW): 1}
        ds = make_dataset(cells, {F_LOW: 10_000})
        (r,) = analyze_dataset(ds, AnalysisConfig(min_observed=2))
        assert r.excluded == ("C",)
        assert set(r.flags) == {"A", "B"}

    def test_config_validation(self):
        with pytest.raises(ValueError):
            AnalysisConfig(sigma_levels=(3.0,), primary_sigma=2.0)
        with pytest.raises(ValueError):
            AnalysisConfig(grid_points=50)

    def test_deterministic(self, rng):
        from conftest import random_dataset

        ds = random_dataset(rng)
        a = analyze_dataset(ds)
        b = analyze_dataset(ds)
        assert [r.fit for r in a] == [r.fit for r in b]
        assert [r.chart for r in a] == [r.chart for r in b]
