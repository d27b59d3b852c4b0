from __future__ import annotations

import numpy as np
import pandas as pd
import pytest

from app.core.errors import ConfigInvalid, NoResidualTreatmentVariation, TooManyFailedReps
from app.models.schemas import DgpConfig, EstimateResult, EstimatorSpec, LearnerSpec, MediatorEffect, PipelineConfig
from app.services import simulator
from app.services.panel_service import assign_roles
from app.services.pipeline_service import run_pipeline

OLS = LearnerSpec(kind="ols")
OLS_PIPELINE = PipelineConfig(folds=2, learner_y=OLS, learner_d=OLS, learner_z=OLS, seed=1)


class TestGeneratePanel:
    def test_same_seed_same_panel(self, small_dgp):
        first, truth_a = simulator.generate_panel(small_dgp)
        second, truth_b = simulator.generate_panel(small_dgp)
        pd.testing.assert_frame_equal(first.frame, second.frame)
        assert truth_a.cohorts == truth_b.cohorts

    def test_different_seed_different_panel(self, small_dgp):
        first, _ = simulator.generate_panel(small_dgp)
        second, _ = simulator.generate_panel(small_dgp.model_copy(update={"seed": 8}))
        assert not np.array_equal(first.column("y"), second.column("y"))

    def test_layout_and_roles(self, small_dgp):
        ds, truth = simulator.generate_panel(small_dgp)

        assert list(ds.frame.columns) == ["id", "year", "y", "d", "x1", "x2", "x3", "first_treat"]
        assert ds.n_rows == 40 * 6
        assert ds.roles.covariates == ["x1", "x2", "x3"]
        assert set(truth.cohorts.values()) <= {None, 4, 5}
        assert truth.theta0 == 1.0

    def test_panel_passes_validation(self, small_dgp):
        ds, _ = simulator.generate_panel(small_dgp)
        _, report = assign_roles(ds.with_roles(None), ds.roles)
        assert report.balanced
        assert report.dropped_rows == 0

    def test_treatment_is_absorbing_from_the_cohort(self, small_dgp):
        ds, truth = simulator.generate_panel(small_dgp)
        frame = ds.frame
        for unit, cohort in truth.cohorts.items():
            d = frame.loc[frame["id"] == unit, "d"].to_numpy()
            periods = frame.loc[frame["id"] == unit, "year"].to_numpy()
            expected = np.zeros(6) if cohort is None else (periods >= cohort).astype(float)
            np.testing.assert_array_equal(d, expected)

    def test_no_never_treated_units(self, small_dgp):
        _, truth = simulator.generate_panel(small_dgp.model_copy(update={"never_share": 0.0}))
        assert all(g is not None for g in truth.cohorts.values())

    def test_confounded_propensity_is_clipped(self, small_dgp):
        cfg = small_dgp.model_copy(update={"confounded_assignment": True, "p_covariates": 5})
        _, truth = simulator.generate_panel(cfg)
        assert truth.propensity.min() >= 0.05
        assert truth.propensity.max() <= 0.95

    def test_optional_columns(self, small_dgp):
        cfg = small_dgp.model_copy(
            update={
                "instrument_strength": 1.0,
                "effect_heterogeneity": 0.3,
                "mediator_effect": MediatorEffect(a=1.0, b=0.5),
                "group_thetas": [0.5, 1.5],
            }
        )
        ds, truth = simulator.generate_panel(cfg)

        assert ds.frame.columns[-4:].tolist() == ["z", "w", "m", "group"]
        assert (ds.roles.instrument, ds.roles.moderator, ds.roles.mediator) == ("z", "w", "m")
        assert sorted(set(truth.unit_thetas)) == [0.5, 1.5]

    def test_feature_streams_are_independent(self, small_dgp):
        base, _ = simulator.generate_panel(small_dgp)
        moderated, _ = simulator.generate_panel(small_dgp.model_copy(update={"effect_heterogeneity": 0.0}))
        np.testing.assert_array_equal(base.column("x1"), moderated.column("x1"))
        np.testing.assert_array_equal(base.column("d"), moderated.column("d"))
        np.testing.assert_allclose(base.column("y"), moderated.column("y"))

    @pytest.mark.parametrize(
        "update",
        [
            {"never_share": 1.0},
            {"cohort_periods": [1]},
            {"cohort_periods": [7]},
            {"cohort_periods": []},
            {"endogeneity": 1.0},
            {"group_thetas": []},
        ],
    )
    def test_invalid_configurations(self, small_dgp, update):
        with pytest.raises(ConfigInvalid):
            simulator.generate_panel(small_dgp.model_copy(update=update))


class TestOracles:
    def test_noiseless_zero_effect_is_recovered_exactly(self):
        cfg = DgpConfig(n_units=40, n_periods=6, p_covariates=4, theta0=0.0, noise_sd=0.0, seed=2)
        ds, _ = simulator.generate_panel(cfg)
        result = run_pipeline(ds, OLS_PIPELINE)
        assert abs(result.theta) < 1e-6

    def test_noiseless_linear_effect_is_recovered_exactly(self):
        cfg = DgpConfig(n_units=40, n_periods=6, p_covariates=4, theta0=2.5, noise_sd=0.0, seed=2)
        ds, _ = simulator.generate_panel(cfg)
        assert run_pipeline(ds, OLS_PIPELINE).theta == pytest.approx(2.5, abs=1e-6)

    def test_untreated_panel_has_no_treatment_variation(self, small_panel):
        ds = small_panel.with_columns({"d": np.zeros(small_panel.n_rows)})
        with pytest.raises(NoResidualTreatmentVariation):
            run_pipeline(ds, OLS_PIPELINE)

    def test_estimator_kinds(self, small_panel):
        naive = simulator.run_estimator(small_panel, EstimatorSpec(name="naive", kind="naive"))
        twfe = simulator.run_estimator(small_panel, EstimatorSpec(name="twfe", kind="twfe"))
        dml = simulator.run_estimator(small_panel, EstimatorSpec(name="dml", kind="sdidml", pipeline=OLS_PIPELINE))

        assert naive.method == "naive"
        assert twfe.method == "twfe"
        assert dml.method == "plr"
        assert dml.theta == pytest.approx(1.0, abs=0.5)

    def test_irrelevant_instrument_is_flagged_weak(self):
        cfg = DgpConfig(
            n_units=80, n_periods=6, p_covariates=3, cohort_periods=[4, 5], endogeneity=0.5, instrument_strength=0.0, seed=4
        )
        ds, _ = simulator.generate_panel(cfg)
        pipeline = OLS_PIPELINE.model_copy(update={"absorb": "none"})
        result = simulator.run_estimator(ds, EstimatorSpec(name="iv", kind="iv_sdidml", pipeline=pipeline))

        assert result.method == "iv_plr"
        assert result.diagnostics["first_stage_f"] < 10.0
        assert any("weak instrument" in w for w in result.warnings)


class TestMonteCarlo:
    SPECS = [EstimatorSpec(name="naive", kind="naive"), EstimatorSpec(name="twfe", kind="twfe")]

    def test_single_replication_rmse_is_absolute_bias(self, small_dgp):
        report = simulator.run_monte_carlo(small_dgp, self.SPECS, reps=1)
        for row in report.rows:
            assert row.rmse == pytest.approx(abs(row.mean_bias))
            assert row.sd == 0.0
            assert row.coverage in (0.0, 1.0)

    def test_rmse_decomposes_into_bias_and_sd(self, small_dgp):
        report = simulator.run_monte_carlo(small_dgp, self.SPECS, reps=5)
        row = report.row("twfe")
        assert row.rmse**2 == pytest.approx(row.mean_bias**2 + row.sd**2)
        assert row.reps == 5
        assert row.failures == 0

    def test_replications_do_not_depend_on_workers(self, small_dgp):
        serial = simulator.run_monte_carlo(small_dgp, self.SPECS, reps=3, n_jobs=1)
        parallel = simulator.run_monte_carlo(small_dgp, self.SPECS, reps=3, n_jobs=2)
        assert serial == parallel

    def test_reps_must_be_positive(self, small_dgp):
        with pytest.raises(ConfigInvalid):
            simulator.run_monte_carlo(small_dgp, self.SPECS, reps=0)

    def test_failed_replications_are_counted(self):
        ok = EstimateResult(
            theta=1.0, se=0.1, statistic=10.0, p_value=0.0, ci_low=0.8, ci_high=1.2, n_obs=10, n_clusters=5, method="plr"
        )
        with pytest.raises(TooManyFailedReps):
            simulator._score("dml", [ok, None, None, ok], theta0=1.0)

    @pytest.mark.slow
    def test_linear_panel_is_unbiased_with_nominal_coverage(self):
        cfg = DgpConfig(n_units=200, n_periods=8, p_covariates=20, theta0=1.0, seed=21)
        specs = [EstimatorSpec(name="sdidml", kind="sdidml", pipeline=OLS_PIPELINE.model_copy(update={"folds": 5}))]
        row = simulator.run_monte_carlo(cfg, specs, reps=200, n_jobs=4).row("sdidml")

        assert abs(row.mean_bias) <= 0.05
        assert 0.90 <= row.coverage <= 0.98
        assert row.failures == 0

    @pytest.mark.slow
    def test_forest_nuisances_remove_nonlinear_confounding(self):
        cfg = DgpConfig(n_units=200, nonlinearity="nonlinear", confounded_assignment=True, seed=11)
        forest = LearnerSpec(kind="forest", n_trees=200)
        pipeline = PipelineConfig(folds=5, learner_y=forest, learner_d=forest, learner_z=forest, seed=3)
        specs = [
            EstimatorSpec(name="naive", kind="naive"),
            EstimatorSpec(name="sdidml", kind="sdidml", pipeline=pipeline),
        ]
        report = simulator.run_monte_carlo(cfg, specs, reps=10, n_jobs=4)

        dml_bias = abs(report.row("sdidml").mean_bias)
        assert dml_bias <= 0.10
        assert abs(report.row("naive").mean_bias) >= 3 * dml_bias

    @pytest.mark.slow
    def test_instrument_corrects_endogenous_treatment(self):
        cfg = DgpConfig(n_units=200, endogeneity=0.5, instrument_strength=1.0, seed=17)
        pipeline = OLS_PIPELINE.model_copy(update={"folds": 5, "absorb": "none"})
        specs = [
            EstimatorSpec(name="plr", kind="sdidml", pipeline=pipeline),
            EstimatorSpec(name="iv", kind="iv_sdidml", pipeline=pipeline),
        ]
        report = simulator.run_monte_carlo(cfg, specs, reps=200, n_jobs=4)

        assert abs(report.row("plr").mean_bias) > 0.2
        assert abs(report.row("iv").mean_bias) <= 0.1
