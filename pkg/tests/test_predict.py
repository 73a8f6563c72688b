import math

import numpy as np
import pytest
from scipy import stats

from nifm.copula import CopulaFamily, CopulaParams, FactorLoadings
from nifm.garch import (
    ErrorKind,
    GarchParams,
    conditional_variances,
    next_variance,
)
from nifm.inference import JointDraws, infer
from nifm.nets import CopulaNet, MarginalNet
from nifm import predict as pred
from nifm.predict import (
    PredictionError,
    ValidationReport,
    compare_models,
    gaussian_kde_curve,
    per_draw_log_density,
    predictive_log_density,
    ranking_table,
    rolling_validate,
)
from nifm.priors import default_priors
from nifm.simgen import simulate_joint


def make_draws(marginal_params_rows, copula_params_list=None):
    """Hand-assembled JointDraws (transformed arrays unused by predict)."""
    n = len(marginal_params_rows)
    d = len(marginal_params_rows[0])
    return JointDraws(
        marginal_transformed=np.zeros((n, d, 3)),
        marginal_params=marginal_params_rows,
        copula_transformed=None if copula_params_list is None else np.zeros((n, 1)),
        copula_params=copula_params_list,
    )


class TestPerDrawDensity:
    def test_univariate_against_direct_oracle(self):
        rng = np.random.default_rng(0)
        window = rng.normal(size=60)[:, None]
        y_next = np.array([0.4])
        params = [
            [GarchParams(float(a1), float(a2), float(g))]
            for a1, a2, g in zip(
                rng.uniform(0.05, 0.2, 50),
                rng.uniform(0.5, 0.75, 50),
                rng.uniform(0.05, 0.5, 50),
            )
        ]
        draws = make_draws(params)
        got = per_draw_log_density(draws, window, y_next)
        # direct oracle: scalar recursion + scipy density per draw
        expected = []
        for (p,) in params:
            s2 = conditional_variances(p, window[:, 0])
            s2_next = next_variance(p, window[-1, 0], s2[-1])
            expected.append(stats.norm.logpdf(y_next[0], scale=math.sqrt(s2_next)))
        np.testing.assert_allclose(got, expected, rtol=1e-8)

    def test_estimate_matches_direct_sum_oracle(self):
        rng = np.random.default_rng(1)
        window = rng.normal(size=40)[:, None]
        y_next = np.array([-0.2])
        params = [
            [GarchParams(0.1, 0.8, float(g))] for g in rng.uniform(0.05, 0.3, 64)
        ]
        est = predictive_log_density(make_draws(params), window, y_next)
        dens = []
        for (p,) in params:
            s2 = conditional_variances(p, window[:, 0])
            s2_next = next_variance(p, window[-1, 0], s2[-1])
            dens.append(stats.norm.pdf(y_next[0], scale=math.sqrt(s2_next)))
        assert est.log_density == pytest.approx(math.log(np.mean(dens)), rel=1e-8)
        assert est.n_dropped == 0
        assert est.n_draws == 64

    def test_identity_copula_factorises(self):
        rng = np.random.default_rng(2)
        window = rng.normal(size=30)[:, None] * np.ones((1, 3))
        y_next = rng.normal(size=3)
        rows = [
            [GarchParams(0.1, 0.8, 0.1), GarchParams(0.05, 0.7, 0.2), GarchParams(0.2, 0.6, 0.15)]
            for _ in range(8)
        ]
        # loadings (c, 0, 0) give an exactly diagonal correlation matrix
        identity_cop = [
            CopulaParams(FactorLoadings(3, 1, np.array([0.3, 0.0, 0.0])))
            for _ in range(8)
        ]
        with_cop = per_draw_log_density(make_draws(rows, identity_cop), window, y_next)
        without = per_draw_log_density(make_draws(rows), window, y_next)
        np.testing.assert_allclose(with_cop, without, atol=1e-10)

    def test_dependent_copula_changes_density(self):
        rng = np.random.default_rng(3)
        window = rng.normal(size=30)[:, None] * np.ones((1, 2))
        y_next = np.array([1.0, 1.0])
        rows = [[GarchParams(0.1, 0.8, 0.1), GarchParams(0.1, 0.8, 0.1)] for _ in range(4)]
        dependent = [
            CopulaParams(FactorLoadings(2, 1, np.array([0.5, 1.5]))) for _ in range(4)
        ]
        with_cop = per_draw_log_density(make_draws(rows, dependent), window, y_next)
        without = per_draw_log_density(make_draws(rows), window, y_next)
        # concordant observation pair: positive dependence raises the density
        assert np.all(with_cop > without)


class TestPredictiveLogDensity:
    def test_nan_draws_dropped_and_counted(self, monkeypatch):
        vals = np.array([0.1, np.nan, -np.inf, 0.3])
        monkeypatch.setattr(pred, "per_draw_log_density", lambda *a, **k: vals.copy())
        draws = make_draws([[GarchParams(0.1, 0.8, 0.1)]] * 4)
        est = predictive_log_density(draws, np.zeros((10, 1)), np.zeros(1))
        assert est.n_dropped == 1
        expected = stats._continuous_distns  # noqa: F841  (keep scipy import used)
        from scipy.special import logsumexp

        assert est.log_density == pytest.approx(
            float(logsumexp([0.1, -np.inf, 0.3]) - math.log(3))
        )

    def test_all_nan_raises(self, monkeypatch):
        monkeypatch.setattr(
            pred, "per_draw_log_density", lambda *a, **k: np.array([np.nan, np.nan])
        )
        draws = make_draws([[GarchParams(0.1, 0.8, 0.1)]] * 2)
        with pytest.raises(PredictionError, match="NaN"):
            predictive_log_density(draws, np.zeros((10, 1)), np.zeros(1))

    def test_multi_step_horizon_runs_and_is_seeded(self):
        spec = default_priors(ErrorKind.GAUSSIAN, 3, 1)
        rng = np.random.default_rng(4)
        data, _ = simulate_joint(spec, 64, CopulaFamily.GAUSSIAN, rng)
        marginal_net = MarginalNet(60, ErrorKind.GAUSSIAN, seed=0)
        copula_net = CopulaNet(3, 1, CopulaFamily.GAUSSIAN, seed=1)
        result = infer(marginal_net, copula_net, data[:60])
        vals = []
        for _ in range(2):
            est = predictive_log_density(
                result, data[:60], data[62], horizon=3, n_draws=200,
                rng=np.random.default_rng(99),
            )
            vals.append(est.log_density)
            assert np.isfinite(est.log_density)
        assert vals[0] == vals[1]

    def test_horizon_validation(self):
        draws = make_draws([[GarchParams(0.1, 0.8, 0.1)]])
        with pytest.raises(PredictionError, match="horizon"):
            predictive_log_density(draws, np.zeros((5, 1)), np.zeros(1), horizon=0)

    def test_monte_carlo_error_shrinks_with_draws(self):
        # SE of the estimator over repetitions should scale like 1/sqrt(J)
        spec = default_priors(ErrorKind.GAUSSIAN, 2, 1)
        rng = np.random.default_rng(5)
        data, _ = simulate_joint(spec, 64, CopulaFamily.GAUSSIAN, rng)
        marginal_net = MarginalNet(60, ErrorKind.GAUSSIAN, seed=2)
        copula_net = CopulaNet(2, 1, CopulaFamily.GAUSSIAN, seed=3)
        result = infer(marginal_net, copula_net, data[:60])

        def se(n_draws, reps=24):
            vals = [
                predictive_log_density(
                    result, data[:60], data[60], n_draws=n_draws,
                    rng=np.random.default_rng(1000 + r),
                ).log_density
                for r in range(reps)
            ]
            return np.std(vals)

        ratio = se(100) / se(1600)
        assert 2.0 < ratio < 8.0  # ideal 4

    def test_simulated_draws_emitted_when_requested(self):
        rows = [[GarchParams(0.1, 0.8, 0.1), GarchParams(0.1, 0.8, 0.1)] for _ in range(32)]
        draws = make_draws(rows)
        est = predictive_log_density(
            draws, np.zeros((10, 2)), np.zeros(2), keep_draws=True,
            rng=np.random.default_rng(6),
        )
        assert est.draws.shape == (32, 2)


@pytest.fixture(scope="module")
def rolling_setup():
    spec = default_priors(ErrorKind.GAUSSIAN, 3, 1)
    rng = np.random.default_rng(7)
    data, _ = simulate_joint(spec, 70, CopulaFamily.GAUSSIAN, rng)
    marginal_net = MarginalNet(60, ErrorKind.GAUSSIAN, seed=4)
    copula_net = CopulaNet(3, 1, CopulaFamily.GAUSSIAN, seed=5)
    return marginal_net, copula_net, data


class TestRollingValidation:

    def test_single_roll_base_case(self, rolling_setup):
        marginal_net, copula_net, data = rolling_setup
        report = rolling_validate(
            marginal_net, copula_net, data[:61], n_draws=100, base_seed=1
        )
        assert len(report.per_roll) == 1
        assert report.lpds == report.per_roll[0]

    def test_lpds_additivity_and_roll_count(self, rolling_setup):
        marginal_net, copula_net, data = rolling_setup
        report = rolling_validate(
            marginal_net, copula_net, data, n_draws=100, base_seed=1
        )
        assert len(report.per_roll) == 10  # K = 10, h = 1 -> K - h + 1
        assert report.lpds == pytest.approx(sum(report.per_roll), abs=0.0)

    def test_seed_determinism(self, rolling_setup):
        marginal_net, copula_net, data = rolling_setup
        a = rolling_validate(marginal_net, copula_net, data, n_draws=50, base_seed=2)
        b = rolling_validate(marginal_net, copula_net, data, n_draws=50, base_seed=2)
        assert a.per_roll == b.per_roll

    def test_too_short_data_rejected(self, rolling_setup):
        marginal_net, copula_net, data = rolling_setup
        with pytest.raises(PredictionError, match="T\\+h"):
            rolling_validate(marginal_net, copula_net, data[:60])

    def test_failure_reports_roll_index(self, rolling_setup):
        marginal_net, _, data = rolling_setup
        wrong_net = CopulaNet(4, 1, CopulaFamily.GAUSSIAN, seed=6)
        with pytest.raises(PredictionError, match="roll 0"):
            rolling_validate(marginal_net, wrong_net, data, n_draws=10)

    def test_csv_emission(self, rolling_setup):
        marginal_net, copula_net, data = rolling_setup
        report = rolling_validate(marginal_net, copula_net, data[:62], n_draws=20, base_seed=3)
        lines = report.to_csv().strip().splitlines()
        assert lines[0] == "roll,log_predictive,seconds,dropped"
        assert len(lines) == 3


@pytest.fixture(scope="module")
def compare_setup():
    spec = default_priors(ErrorKind.GAUSSIAN, 2, 1)
    rng = np.random.default_rng(8)
    data, _ = simulate_joint(spec, 66, CopulaFamily.GAUSSIAN, rng)
    marginal_net = MarginalNet(60, ErrorKind.GAUSSIAN, seed=7)
    return marginal_net, data


class TestCompareModels:

    def test_single_candidate_ranks_first(self, compare_setup):
        marginal_net, data = compare_setup
        copula_net = CopulaNet(2, 1, CopulaFamily.GAUSSIAN, seed=8)
        rows = compare_models(
            [(marginal_net, copula_net, "one-factor")], data, n_draws=50, base_seed=4
        )
        assert rows[0][0] == "one-factor"

    def test_identical_candidates_tie_bitwise(self, compare_setup):
        marginal_net, data = compare_setup
        copula_net = CopulaNet(2, 1, CopulaFamily.GAUSSIAN, seed=9)
        rows = compare_models(
            [
                (marginal_net, copula_net, "a"),
                (marginal_net, copula_net, "b"),
            ],
            data, n_draws=50, base_seed=5,
        )
        assert rows[0][1].lpds == rows[1][1].lpds

    def test_ranking_table_format(self, compare_setup):
        marginal_net, data = compare_setup
        copula_net = CopulaNet(2, 1, CopulaFamily.GAUSSIAN, seed=10)
        rows = compare_models(
            [(marginal_net, copula_net, "m")], data, n_draws=20, base_seed=6
        )
        table = ranking_table(rows)
        assert table.splitlines()[0] == "label,lpds,seconds"
        assert table.splitlines()[1].startswith("m,")


class TestKde:
    def test_density_integrates_to_one(self):
        rng = np.random.default_rng(9)
        samples = rng.normal(size=2000)
        grid = np.linspace(-6, 6, 1201)
        dens = gaussian_kde_curve(samples, grid)
        integral = np.trapezoid(dens, grid)
        assert integral == pytest.approx(1.0, abs=1e-3)

    def test_peak_near_mode(self):
        rng = np.random.default_rng(10)
        samples = rng.normal(loc=2.0, size=4000)
        grid = np.linspace(-3, 7, 501)
        dens = gaussian_kde_curve(samples, grid)
        assert abs(grid[np.argmax(dens)] - 2.0) < 0.25
