import math

import numpy as np
import pytest
from scipy.integrate import quad

from slopehazard.egpd import (
    EgpdFitError,
    EgpdParams,
    egpd_cdf,
    egpd_fit_mle,
    egpd_logpdf,
    egpd_pdf,
    egpd_quantile,
    egpd_sample,
    egpd_survival,
    egpd_truncated_cdf,
)


class TestParams:
    def test_valid(self):
        p = EgpdParams(2.0, 1.0, 0.5)
        assert (p.kappa, p.sigma, p.xi) == (2.0, 1.0, 0.5)

    @pytest.mark.parametrize("bad", [
        dict(kappa=0.0, sigma=1.0, xi=1.0),
        dict(kappa=-1.0, sigma=1.0, xi=1.0),
        dict(kappa=1.0, sigma=0.0, xi=1.0),
        dict(kappa=1.0, sigma=1.0, xi=-0.1),
        dict(kappa=math.inf, sigma=1.0, xi=1.0),
        dict(kappa=math.nan, sigma=1.0, xi=1.0),
    ])
    def test_invalid(self, bad):
        with pytest.raises(ValueError):
            EgpdParams(**bad)


class TestCdf:
    def test_gpd_reduction_point(self):
        assert egpd_cdf(1.0, EgpdParams(1, 1, 1)) == pytest.approx(0.5, abs=1e-15)

    def test_lower_endpoint(self):
        assert egpd_cdf(0.0, EgpdParams(2, 1, 0.5)) == 0.0
        assert egpd_cdf(0.0, EgpdParams(0.3, 5, 1.2)) == 0.0

    def test_hand_value(self):
        # (1 - 1.5^(-2))^2 = (5/9)^2 = 25/81
        assert egpd_cdf(1.0, EgpdParams(2, 1, 0.5)) == pytest.approx(0.308642, abs=1e-6)

    def test_domain_error(self):
        with pytest.raises(ValueError):
            egpd_cdf(-0.1, EgpdParams(1, 1, 1))
        with pytest.raises(ValueError):
            egpd_cdf(math.nan, EgpdParams(1, 1, 1))

    def test_strictly_increasing(self):
        # strict until the value saturates to 1.0 in double precision,
        # nondecreasing beyond
        xs = np.logspace(-8, 8, 400)
        for params in [EgpdParams(2, 1, 0.5), EgpdParams(0.4, 3, 1.1), EgpdParams(1, 0.01, 0.2)]:
            vals = egpd_cdf(xs, params)
            resolvable = vals[1:] < 1.0 - 1e-12
            assert np.all(np.diff(vals)[resolvable] > 0)
            assert np.all(np.diff(vals) >= 0)

    def test_kappa_one_matches_gpd_to_machine_precision(self):
        xs = np.linspace(0.01, 50, 500)
        for sigma, xi in [(2.0, 0.4), (0.5, 1.3), (10.0, 0.05)]:
            params = EgpdParams(1.0, sigma, xi)
            gpd = -np.expm1(-np.log1p(xi * xs / sigma) / xi)
            mine = egpd_cdf(xs, params)
            assert np.max(np.abs(mine - gpd) / gpd) < 1e-14

    def test_stochastic_dominance_in_sigma(self):
        xs = np.logspace(-4, 4, 200)
        lo = egpd_cdf(xs, EgpdParams(2, 0.5, 0.3))
        hi = egpd_cdf(xs, EgpdParams(2, 2.0, 0.3))
        assert np.all(lo >= hi)


class TestSurvival:
    def test_complement(self):
        xs = np.linspace(0.1, 20, 50)
        params = EgpdParams(2, 1, 0.5)
        assert egpd_survival(xs, params) == pytest.approx(1.0 - egpd_cdf(xs, params))

    def test_deep_tail_keeps_precision(self):
        # far out, 1 - cdf rounds to 0 but the survival path does not
        params = EgpdParams(2, 1, 0.2)
        x = egpd_quantile(1 - 1e-13, params)
        s = egpd_survival(2 * x, params)
        assert 0.0 < s < 1e-13


class TestPdf:
    def test_hand_value(self):
        assert egpd_pdf(1.0, EgpdParams(1, 1, 1)) == pytest.approx(0.25, abs=1e-15)

    def test_normalizes(self):
        params = EgpdParams(2, 1, 0.5)
        total, _ = quad(lambda x: egpd_pdf(x, params), 0, np.inf, limit=200)
        assert total == pytest.approx(1.0, abs=1e-6)

    def test_vanishes_at_origin_for_kappa_gt_one(self):
        assert egpd_pdf(1e-12, EgpdParams(2, 1, 0.5)) < 1e-10

    def test_domain_error(self):
        with pytest.raises(ValueError):
            egpd_pdf(0.0, EgpdParams(1, 1, 1))
        with pytest.raises(ValueError):
            egpd_pdf(-1.0, EgpdParams(1, 1, 1))

    def test_matches_cdf_finite_difference(self):
        params = EgpdParams(2, 1, 0.5)
        for x in [0.05, 0.5, 1.0, 5.0, 40.0]:
            h = 1e-6 * max(x, 1.0)
            fd = (egpd_cdf(x + h, params) - egpd_cdf(x - h, params)) / (2 * h)
            assert egpd_pdf(x, params) == pytest.approx(fd, rel=1e-5)


class TestLogpdf:
    def test_hand_value(self):
        assert egpd_logpdf(1.0, EgpdParams(1, 1, 1)) == pytest.approx(math.log(0.25), abs=1e-9)

    def test_exp_matches_pdf(self):
        params = EgpdParams(2, 1, 0.5)
        for x in [0.01, 1.0, 100.0]:
            assert math.exp(egpd_logpdf(x, params)) == pytest.approx(
                egpd_pdf(x, params), rel=1e-10)

    def test_finite_deep_in_tail(self):
        v = egpd_logpdf(1e12, EgpdParams(1, 1, 0.3))
        assert math.isfinite(v)

    def test_finite_near_origin(self):
        v = egpd_logpdf(1e-300, EgpdParams(2, 1, 0.5))
        assert math.isfinite(v)


class TestQuantile:
    def test_median_gpd(self):
        assert egpd_quantile(0.5, EgpdParams(1, 1, 1)) == pytest.approx(1.0, abs=1e-14)

    def test_hand_value(self):
        expect = 10 / 0.2 * (0.1 ** -0.2 - 1)
        assert egpd_quantile(0.9, EgpdParams(1, 10, 0.2)) == pytest.approx(expect, abs=1e-3)
        assert egpd_quantile(0.9, EgpdParams(1, 10, 0.2)) == pytest.approx(29.2446, abs=1e-3)

    def test_round_trip_coarse_grid(self):
        grid = np.linspace(0.01, 0.99, 99)
        params = EgpdParams(2, 1, 0.5)
        back = egpd_cdf(egpd_quantile(grid, params), params)
        assert np.max(np.abs(back - grid)) < 1e-10

    def test_round_trip_wide_grid_relative(self):
        grid = np.concatenate([[1e-6, 1e-5, 1e-4], np.linspace(0.001, 0.999, 200),
                               [1 - 1e-4, 1 - 1e-5, 1 - 1e-6]])
        for params in [EgpdParams(2, 1, 0.5), EgpdParams(0.7, 3, 0.9),
                       EgpdParams(5, 0.004, 0.3), EgpdParams(0.1, 10, 1.5)]:
            back = egpd_cdf(egpd_quantile(grid, params), params)
            assert np.max(np.abs(back - grid) / grid) < 1e-10

    def test_domain_error(self):
        params = EgpdParams(1, 1, 1)
        for u in [0.0, 1.0, -0.2, 1.3, math.nan]:
            with pytest.raises(ValueError):
                egpd_quantile(u, params)


class TestSample:
    def test_deterministic(self):
        params = EgpdParams(2, 1, 0.5)
        a = egpd_sample(5, params, seed=42)
        b = egpd_sample(5, params, seed=42)
        assert np.array_equal(a, b)

    def test_all_positive(self):
        draws = egpd_sample(10_000, EgpdParams(0.5, 0.01, 0.8), seed=3)
        assert np.all(draws > 0)

    def test_kolmogorov_smirnov(self):
        params = EgpdParams(2, 1, 0.5)
        draws = np.sort(egpd_sample(1_000_000, params, seed=20240201))
        n = draws.size
        theo = egpd_cdf(draws, params)
        ks = max(np.max(np.abs(np.arange(1, n + 1) / n - theo)),
                 np.max(np.abs(np.arange(0, n) / n - theo)))
        assert ks < 0.002


class TestTruncatedCdf:
    def test_endpoints(self):
        params = EgpdParams(2, 1, 0.5)
        assert egpd_truncated_cdf(1.0, params) == pytest.approx(1.0, abs=1e-15)
        assert egpd_truncated_cdf(0.0, params) == 0.0

    def test_ratio_oracle(self):
        params = EgpdParams(1, 0.01, 0.5)
        expect = egpd_cdf(0.5, params) / egpd_cdf(1.0, params)
        assert egpd_truncated_cdf(0.5, params) == pytest.approx(expect, rel=1e-14)

    def test_domain_error(self):
        with pytest.raises(ValueError):
            egpd_truncated_cdf(1.5, EgpdParams(1, 1, 1))
        with pytest.raises(ValueError):
            egpd_truncated_cdf(-0.5, EgpdParams(1, 1, 1))


class TestFitMle:
    def test_recovers_truth(self):
        true = EgpdParams(2.0, 1.0, 0.3)
        data = egpd_sample(50_000, true, seed=777)
        fit = egpd_fit_mle(data)
        assert abs(fit.kappa - true.kappa) / true.kappa < 0.10
        assert abs(fit.sigma - true.sigma) / true.sigma < 0.10
        assert abs(fit.xi - true.xi) / true.xi < 0.10

    def test_single_point_reports_failure(self):
        with pytest.raises(EgpdFitError) as err:
            egpd_fit_mle([1.0])
        assert err.value.params is not None
        assert math.isfinite(err.value.grad_norm)

    def test_descent_contract(self):
        data = egpd_sample(2_000, EgpdParams(1.5, 0.5, 0.4), seed=11)
        init = EgpdParams(1.0, float(np.mean(data)), 0.2)
        fit = egpd_fit_mle(data, init)
        nll_init = -float(np.sum(egpd_logpdf(data, init)))
        nll_fit = -float(np.sum(egpd_logpdf(data, fit)))
        assert nll_fit <= nll_init + 1e-9 * abs(nll_init)

    def test_scale_equivariance(self):
        data = egpd_sample(5_000, EgpdParams(2, 1, 0.3), seed=5)
        fit = egpd_fit_mle(data)
        fit_scaled = egpd_fit_mle(data * 1e-3)
        assert fit_scaled.sigma == pytest.approx(fit.sigma * 1e-3, rel=1e-6)
        assert fit_scaled.kappa == pytest.approx(fit.kappa, rel=1e-6)
        assert fit_scaled.xi == pytest.approx(fit.xi, rel=1e-6)

    def test_rejects_bad_data(self):
        with pytest.raises(ValueError):
            egpd_fit_mle([])
        with pytest.raises(ValueError):
            egpd_fit_mle([1.0, -2.0])
        with pytest.raises(ValueError):
            egpd_fit_mle([1.0, math.nan])
