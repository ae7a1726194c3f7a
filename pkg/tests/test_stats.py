import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate, stats as sps

from critmargin.stats import (
    effective_sample_size,
    percentile_error_bound,
    percentile_error_bounds,
    regularized_incomplete_beta,
    sample_stdev_bessel,
    scott_bandwidth,
    t_quantile_two_sided,
    z_quantile_one_sided,
)


def t_mass_by_quadrature(t, dof):
    # independent oracle: integrate the Student-t density directly
    dens = lambda x: math.gamma((dof + 1) / 2) / (math.sqrt(dof * math.pi) * math.gamma(dof / 2)) * (
        1 + x * x / dof
    ) ** (-(dof + 1) / 2)
    return integrate.quad(dens, -t, t)[0]


class TestTQuantile:
    def test_large_dof_approaches_normal(self):
        assert t_quantile_two_sided(0.95, 10**6) == pytest.approx(1.960, abs=1e-3)

    def test_nine_dof_table_value(self):
        assert t_quantile_two_sided(0.95, 9) == pytest.approx(2.262, abs=1e-3)

    def test_nine_dof_by_quadrature(self):
        t = t_quantile_two_sided(0.95, 9)
        assert t_mass_by_quadrature(t, 9) == pytest.approx(0.95, abs=1e-8)

    def test_higher_confidence_is_wider(self):
        assert t_quantile_two_sided(0.99, 9) > t_quantile_two_sided(0.95, 9)

    @pytest.mark.parametrize("dof", [0, -1, 2.5])
    def test_bad_dof(self, dof):
        with pytest.raises(ValueError):
            t_quantile_two_sided(0.95, dof)

    @pytest.mark.parametrize("alpha", [0.0, 1.0, 1.5])
    def test_bad_alpha(self, alpha):
        with pytest.raises(ValueError):
            t_quantile_two_sided(alpha, 5)

    @settings(max_examples=60, deadline=None)
    @given(st.floats(0.5, 0.999), st.integers(1, 5000))
    def test_matches_scipy(self, alpha, dof):
        assert t_quantile_two_sided(alpha, dof) == pytest.approx(sps.t.ppf(0.5 + alpha / 2, dof), abs=1e-4)

    @settings(max_examples=40, deadline=None)
    @given(st.floats(0.5, 0.99), st.integers(1, 2000))
    def test_monotone_in_dof_and_alpha(self, alpha, dof):
        t = t_quantile_two_sided(alpha, dof)
        assert t_quantile_two_sided(alpha, dof + 1) < t
        assert t_quantile_two_sided(min(alpha + 0.005, 0.995), dof) > t

    def test_limit_matches_normal(self):
        for alpha in (0.8, 0.9, 0.95, 0.99):
            assert t_quantile_two_sided(alpha, 10**6) == pytest.approx(sps.norm.ppf(0.5 + alpha / 2), abs=1e-3)


@settings(max_examples=60, deadline=None)
@given(st.floats(0.05, 50), st.floats(0.05, 50), st.floats(0.0, 1.0))
def test_incomplete_beta_matches_scipy(a, b, x):
    assert regularized_incomplete_beta(a, b, x) == pytest.approx(sps.beta.cdf(x, a, b), abs=1e-10)


class TestZQuantile:
    def test_table_note_value(self):
        assert z_quantile_one_sided(0.95) == pytest.approx(1.645, abs=1e-3)

    def test_median(self):
        assert z_quantile_one_sided(0.5) == pytest.approx(0.0, abs=1e-12)

    def test_by_bisection_on_erf(self):
        lo, hi = 0.0, 5.0
        for _ in range(100):
            mid = (lo + hi) / 2
            if 0.5 * (1 + math.erf(mid / math.sqrt(2))) < 0.975:
                lo = mid
            else:
                hi = mid
        assert z_quantile_one_sided(0.975) == pytest.approx(lo, abs=1e-4)
        assert z_quantile_one_sided(0.975) == pytest.approx(1.960, abs=1e-3)


class TestStdev:
    def test_hand_value(self):
        assert sample_stdev_bessel([1, 2, 3]) == 1.0

    def test_constant(self):
        assert sample_stdev_bessel([4.2] * 4) == 0.0

    def test_standard_normal_draws(self):
        x = np.random.default_rng(0).standard_normal(10_000)
        assert 0.97 <= sample_stdev_bessel(x) <= 1.03

    def test_too_short(self):
        with pytest.raises(ValueError):
            sample_stdev_bessel([1.0])

    @settings(max_examples=100, deadline=None)
    @given(
        st.lists(st.floats(-100, 100), min_size=2, max_size=40),
        st.floats(-10, 10),
        st.floats(-100, 100),
    )
    def test_affine_equivariance(self, xs, a, b):
        x = np.array(xs)
        lhs = sample_stdev_bessel(a * x + b)
        rhs = abs(a) * sample_stdev_bessel(x)
        assert lhs == pytest.approx(rhs, abs=1e-12 * max(1.0, np.abs(x).max() * max(1.0, abs(a)) * 100))


class TestScott:
    def test_exact_power(self):
        assert scott_bandwidth(2.0, 64) == pytest.approx(1.0, abs=1e-15)

    def test_zero(self):
        assert scott_bandwidth(0.0, 100) == 0.0

    def test_950(self):
        h = scott_bandwidth(1.0, 950)
        assert h * h * h * h * h * h * 950 == pytest.approx(1.0, rel=1e-12)


class TestPercentileBound:
    @pytest.mark.parametrize("d,expected", [(41.53, 0.09), (51.07, 0.08), (35.09, 0.10), (39.45, 0.09)])
    def test_table_rows(self, d, expected):
        assert abs(percentile_error_bound(d, 0.95, 0.95) - expected) <= 0.005

    def test_vanishes(self):
        assert percentile_error_bound(1e12, 0.95, 0.95) < 1e-5

    def test_root_satisfies_defining_quadratic(self):
        d, beta, alpha = 41.53, 0.95, 0.95
        eps = percentile_error_bound(d, beta, alpha)
        z = z_quantile_one_sided(alpha)
        star = beta - eps
        assert eps == pytest.approx(z * math.sqrt(star * (1 - star) / d), abs=1e-12)

    @settings(max_examples=200, deadline=None)
    @given(st.floats(1.0, 1e5), st.floats(0.5, 0.999), st.floats(0.5, 0.999))
    def test_tight_below_loose(self, d, beta, alpha):
        b = percentile_error_bounds(d, beta, alpha)
        assert 0 <= b.tight <= b.loose + 1e-15

    def test_normal_approx_flag(self):
        assert not percentile_error_bounds(50, 0.95, 0.95).normal_approx_ok
        assert percentile_error_bounds(100, 0.95, 0.95).normal_approx_ok

    def test_coverage_by_simulation(self):
        # sample beta-quantile of d draws covers beta - bound with frequency >= alpha - 0.03
        d, beta, alpha = 200, 0.95, 0.95
        eps = percentile_error_bound(d, beta, alpha)
        rng = np.random.default_rng(1)
        reps = 2000
        u = rng.uniform(size=(reps, d))  # population CDF of U(0,1) is the identity
        q = np.quantile(u, beta, axis=1, method="inverted_cdf")
        assert np.mean(q >= beta - eps) >= alpha - 0.03


class TestEffectiveSampleSize:
    def test_box(self):
        assert effective_sample_size(100, 0.1, 1.0, "box") == pytest.approx(10.0)

    def test_gaussian_unit(self):
        assert effective_sample_size(10, 0.1, 1.0, "gaussian") == pytest.approx(2.5066, abs=1e-4)

    def test_gaussian_halved(self):
        assert effective_sample_size(10, 0.1, 1.0, "gaussian", True) == pytest.approx(1.2533, abs=1e-4)

    def test_table_row_reproduction(self):
        # m = 363, h = 0.13 and a proxy range giving the tabulated D
        rng = 363 * 0.13 * math.sqrt(2 * math.pi) / 2 / 41.53
        d = effective_sample_size(363, 0.13, rng, "gaussian", True)
        assert d == pytest.approx(41.53)

    @pytest.mark.parametrize("bad", [0.0, -1.0])
    def test_bad_range(self, bad):
        with pytest.raises(ValueError):
            effective_sample_size(10, 0.1, bad)

    def test_unknown_kernel(self):
        with pytest.raises(ValueError):
            effective_sample_size(10, 0.1, 1.0, "triangle")
