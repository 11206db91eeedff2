import numpy as np
import pytest

from evengw.measures import DistributionSpec
from evengw.rates import (
    RateExperiment,
    empirical_lower_check,
    fit_loglog_slope,
    lower_bound_exact,
    marginal_rate_experiment,
    rho_n,
    run_rate_experiment,
    spearman_n_vs_error,
    two_point_plugin_value,
)

TWO_POINT = DistributionSpec("two-point", 1, 1.0, 0.25)
POINT = DistributionSpec("point-mass", 1)


class TestRho:
    def test_spot_value(self):
        assert rho_n(16, 2) == 0.25

    def test_low_dimension_is_square_root(self):
        for d in (1, 2, 3):
            assert np.isclose(rho_n(100, d), 0.1)

    def test_critical_dimension_log_factor(self):
        assert np.isclose(rho_n(10, 4), 10 ** (-0.5) * np.log(10 * np.e))

    @pytest.mark.parametrize("d", [1, 2, 3, 4, 5, 6])
    def test_monotone_decreasing(self, d):
        vals = [rho_n(n, d) for n in (2, 4, 8, 16, 64, 256)]
        assert all(b < a for a, b in zip(vals, vals[1:]))

    def test_bad_arguments(self):
        with pytest.raises(ValueError):
            rho_n(0, 2)


class TestClosedForm:
    def test_values(self):
        assert lower_bound_exact(0.25, 1.0, 1, 1) == 0.375
        assert lower_bound_exact(0.5, 1.0, 1, 1) == 0.5  # maximum of 2p(1-p)
        assert lower_bound_exact(0.25, 3.0, 1, 2) == 2460.375

    def test_parameter_validation(self):
        with pytest.raises(ValueError):
            lower_bound_exact(0.0, 1.0, 1, 1)
        with pytest.raises(ValueError):
            lower_bound_exact(0.5, -1.0, 1, 1)

    def test_plugin_exact_count_gives_zero_error(self):
        n, p = 64, 0.25
        count = int(n * p)
        plugin = two_point_plugin_value(count, n, 1.0, 1, 1)
        assert plugin == lower_bound_exact(p, 1.0, 1, 1)


class TestExperimentConfig:
    def test_grid_must_increase(self):
        with pytest.raises(ValueError, match="increasing"):
            RateExperiment(1, 1, TWO_POINT, POINT, (64, 32), 5, 0)

    def test_single_entry_grid_rejected(self):
        with pytest.raises(ValueError):
            RateExperiment(1, 1, TWO_POINT, POINT, (64,), 5, 0)

    def test_reference_mode_checked(self):
        with pytest.raises(ValueError, match="reference"):
            RateExperiment(1, 1, TWO_POINT, POINT, (32, 64), 5, 0, reference="bogus")

    def test_predicted_slope(self):
        exp = RateExperiment(1, 1, TWO_POINT, POINT, (32, 64), 5, 0)
        assert exp.predicted_slope() == -0.5
        exp5 = RateExperiment(
            1,
            1,
            DistributionSpec("uniform-cube", 5, 0.5),
            DistributionSpec("uniform-cube", 5, 0.5),
            (16, 32),
            2,
            0,
            reference="self_zero",
        )
        assert exp5.predicted_slope() == -0.4


class TestRunRateExperiment:
    def test_closed_form_slope_and_determinism(self):
        exp = RateExperiment(1, 1, TWO_POINT, POINT, (32, 128, 512, 2048), 60, seed=9)
        a = run_rate_experiment(exp, cross_check_fraction=0.05)
        b = run_rate_experiment(exp, cross_check_fraction=0.0)
        assert np.array_equal(a.mean_errors, b.mean_errors)
        assert a.slope_defined
        assert -0.8 < a.fitted_slope < -0.25
        assert a.cross_check_max_dev <= 1e-9
        assert a.reference_value == 0.375

    def test_reference_requirements(self):
        with pytest.raises(ValueError, match="two-point"):
            run_rate_experiment(
                RateExperiment(1, 1, POINT, POINT, (8, 16), 2, 0, reference="closed_form")
            )
        with pytest.raises(ValueError, match="dist_x == dist_y"):
            run_rate_experiment(
                RateExperiment(1, 1, TWO_POINT, POINT, (8, 16), 2, 0, reference="self_zero")
            )

    def test_self_zero_point_mass_degenerate(self):
        exp = RateExperiment(
            1, 1, POINT, POINT, (4, 8), trials=3, seed=0, reference="self_zero"
        )
        res = run_rate_experiment(exp)
        assert all(np.all(res.per_n_errors[n] == 0.0) for n in res.n_grid)
        assert not res.slope_defined
        assert np.isnan(res.fitted_slope)

    def test_self_zero_errors_shrink(self):
        spec = DistributionSpec("uniform-cube", 1, 0.5)
        exp = RateExperiment(
            1, 1, spec, spec, (8, 32, 128), trials=12, seed=4, reference="self_zero"
        )
        res = run_rate_experiment(exp)
        assert res.slope_defined
        assert spearman_n_vs_error(res) <= -0.5
        assert res.notes.get("upper_bound_estimates")

    def test_high_n_estimate_reference(self):
        spec = DistributionSpec("uniform-cube", 1, 0.5)
        exp = RateExperiment(
            1, 1, spec, spec, (4, 8), trials=2, seed=1, reference="high_n_estimate"
        )
        res = run_rate_experiment(exp)
        assert res.notes["reference_estimated_at_n"] == 64
        assert res.reference_value > 0

    def test_threads_match_serial(self):
        exp = RateExperiment(1, 1, TWO_POINT, POINT, (16, 64), trials=8, seed=2)
        serial = run_rate_experiment(exp, threads=1, cross_check_fraction=0.0)
        parallel = run_rate_experiment(exp, threads=2, cross_check_fraction=0.0)
        for n in exp.n_grid:
            assert np.array_equal(serial.per_n_errors[n], parallel.per_n_errors[n])

    def test_csv_and_json_outputs(self, tmp_path):
        exp = RateExperiment(1, 1, TWO_POINT, POINT, (16, 64), trials=4, seed=3)
        res = run_rate_experiment(exp, cross_check_fraction=0.0)
        csv_path = tmp_path / "errors.csv"
        res.write_errors_csv(csv_path)
        lines = csv_path.read_text().strip().splitlines()
        assert lines[0] == "n,trial,error"
        assert len(lines) == 1 + 2 * 4
        doc = res.to_json_dict()
        assert doc["n_grid"] == [16, 64]
        assert len(doc["mean_errors"]) == 2


class TestMarginalExperiments:
    def test_point_mass_errors_zero(self):
        res = marginal_rate_experiment(1, 1, POINT, (4, 8), trials=3, seed=0)
        assert all(np.all(res.per_n_errors[n] == 0.0) for n in res.n_grid)
        assert not res.slope_defined

    def test_two_point_marginal_slope(self):
        res = marginal_rate_experiment(
            1, 1, TWO_POINT, (32, 128, 512, 2048), trials=60, seed=5
        )
        assert res.notes["target"] == "marginal_part"
        # closed-form reference: with the far target at the origin the whole
        # value is marginal, 2 p (1-p) R^4
        assert np.isclose(res.reference_value, 0.375, rtol=1e-12)
        assert -0.8 < res.fitted_slope < -0.25

    def test_single_moment_slope(self):
        res = marginal_rate_experiment(
            1,
            1,
            DistributionSpec("uniform-cube", 2, 1.0),
            (32, 128, 512, 2048),
            trials=60,
            seed=6,
            alpha=(2, 0),
        )
        assert res.notes["target"] == "moment"
        assert np.isclose(res.reference_value, 1 / 3, rtol=1e-12)
        assert -0.8 < res.fitted_slope < -0.25

    def test_ball_reference_via_sampling(self):
        res = marginal_rate_experiment(
            1,
            1,
            DistributionSpec("uniform-ball", 2, 1.0),
            (16, 64),
            trials=4,
            seed=7,
            alpha=(2, 0),
        )
        # second moment of the coordinate on the unit disc is 1/4
        assert abs(res.reference_value - 0.25) < 5e-3


class TestEmpiricalLowerCheck:
    def test_slope_window_and_cross_check(self):
        res = empirical_lower_check(
            0.25, 1.0, 1, 1, (64, 256, 1024, 4096), trials=120, seed=11,
            cross_check_fraction=0.02,
        )
        assert -0.70 < res.fitted_slope < -0.30
        assert res.cross_check_max_dev <= 1e-9
        assert res.predicted_slope == -0.5

    def test_deterministic(self):
        a = empirical_lower_check(0.25, 1.0, 1, 1, (32, 128), 10, 3, cross_check_fraction=0.0)
        b = empirical_lower_check(0.25, 1.0, 1, 1, (32, 128), 10, 3, cross_check_fraction=0.0)
        for n in a.n_grid:
            assert np.array_equal(a.per_n_errors[n], b.per_n_errors[n])

    def test_scale_covariance_of_errors(self):
        # errors scale by R^{4kr} between two otherwise identical runs
        small = empirical_lower_check(0.25, 1.0, 1, 1, (32, 128), 10, 3, cross_check_fraction=0.0)
        big = empirical_lower_check(0.25, 2.0, 1, 1, (32, 128), 10, 3, cross_check_fraction=0.0)
        for n in small.n_grid:
            assert np.allclose(big.per_n_errors[n], 16.0 * small.per_n_errors[n])


class TestSlopeFit:
    def test_exact_power_law(self):
        grid = (8, 16, 32, 64)
        errors = [n ** (-0.5) for n in grid]
        slope, defined = fit_loglog_slope(grid, errors)
        assert defined
        assert np.isclose(slope, -0.5, atol=1e-12)

    def test_zero_errors_undefined(self):
        slope, defined = fit_loglog_slope((8, 16), [0.0, 1.0])
        assert not defined
        assert np.isnan(slope)
