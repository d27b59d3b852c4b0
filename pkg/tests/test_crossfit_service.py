from __future__ import annotations

import numpy as np
import pandas as pd
import pytest

from app.core.errors import (
    CollinearAfterDemeaning,
    InvalidArgument,
    MissingInstrument,
    NoResidualTreatmentVariation,
    TooFewUnits,
)
from app.models.schemas import LearnerSpec, PipelineConfig, RoleMap
from app.services.crossfit_service import (
    ResidualizedPanel,
    assign_folds,
    assign_observation_folds,
    fold_guidance,
    out_of_fold_predict,
    residualize,
    write_residuals_csv,
)
from app.services.panel_service import PanelDataset
from app.services.pipeline_service import run_pipeline

OLS = LearnerSpec(kind="ols")
MEAN = LearnerSpec(kind="mean")


class TestFolds:
    def test_round_robin_sizes(self):
        folds = assign_folds(range(10), 3, seed=4)
        assert folds.sizes() == {1: 4, 2: 3, 3: 3}
        assert set(folds.folds) == set(range(10))

    def test_same_seed_same_partition(self):
        assert assign_folds(range(20), 4, seed=1).folds == assign_folds(range(20), 4, seed=1).folds
        assert assign_folds(range(20), 4, seed=1).folds != assign_folds(range(20), 4, seed=2).folds

    def test_partition_ignores_input_order(self):
        assert assign_folds([3, 1, 2, 0], 2, seed=9).folds == assign_folds([0, 1, 2, 3], 2, seed=9).folds

    @pytest.mark.parametrize("k", [1, 11])
    def test_fold_count_bounds(self, k):
        with pytest.raises(TooFewUnits):
            assign_folds(range(10), k, seed=0)

    def test_unit_folds_keep_units_together(self, small_panel):
        folds = assign_folds(small_panel.units().tolist(), 5, seed=3)
        frame = pd.DataFrame({"unit": small_panel.unit_ids(), "fold": folds.row_folds(small_panel)})
        assert (frame.groupby("unit")["fold"].nunique() == 1).all()

    def test_observation_folds(self, small_panel):
        folds = assign_observation_folds(small_panel.n_rows, 4, seed=3)
        rows = folds.row_folds(small_panel)
        assert folds.level == "observation"
        assert rows.size == small_panel.n_rows
        assert set(rows.tolist()) == {1, 2, 3, 4}

    def test_guidance_for_small_samples(self):
        assert fold_guidance(n_units=100, n_rows=1000, k=5) == []
        assert len(fold_guidance(n_units=10, n_rows=100, k=5)) == 2


class TestOutOfFold:
    def test_predictions_never_use_their_own_fold(self, small_panel):
        folds = assign_folds(small_panel.units().tolist(), 4, seed=2)
        prediction = out_of_fold_predict(small_panel, "y", ["x1"], MEAN, folds)
        y = small_panel.column("y")
        row_folds = folds.row_folds(small_panel)
        for k in range(1, 5):
            np.testing.assert_allclose(prediction[row_folds == k], y[row_folds != k].mean())

    def test_worker_count_does_not_change_predictions(self, small_panel):
        folds = assign_folds(small_panel.units().tolist(), 3, seed=2)
        spec = LearnerSpec(kind="forest", n_trees=3, max_depth=3)
        serial = out_of_fold_predict(small_panel, "y", ["x1", "x2"], spec, folds, n_jobs=1)
        threaded = out_of_fold_predict(small_panel, "y", ["x1", "x2"], spec, folds, n_jobs=3)
        np.testing.assert_array_equal(serial, threaded)

    def test_a_row_never_informs_predictions_for_its_own_fold(self, small_panel):
        folds = assign_folds(small_panel.units().tolist(), 4, seed=2)
        row_folds = folds.row_folds(small_panel)
        row = 17
        y = small_panel.column("y").copy()
        y[row] += 100.0
        perturbed = small_panel.with_columns({"y": y})

        before = out_of_fold_predict(small_panel, "y", ["x1", "x2"], OLS, folds)
        after = out_of_fold_predict(perturbed, "y", ["x1", "x2"], OLS, folds)
        own_fold = row_folds == row_folds[row]
        np.testing.assert_array_equal(after[own_fold], before[own_fold])
        assert np.all(np.abs(after[~own_fold] - before[~own_fold]) > 0.0)

    def test_pipeline_output_does_not_depend_on_workers(self, small_panel):
        forest = LearnerSpec(kind="forest", n_trees=4, max_depth=3)
        pipeline = PipelineConfig(folds=3, learner_y=forest, learner_d=forest, learner_z=forest, seed=5)
        outputs = {n_jobs: run_pipeline(small_panel, pipeline, n_jobs).model_dump_json() for n_jobs in (1, 2, 8)}
        assert outputs[1] == outputs[2] == outputs[8]


class TestResidualize:
    def test_residuals_and_metadata(self, small_panel, tmp_path):
        folds = assign_folds(small_panel.units().tolist(), 2, seed=8)
        res = residualize(small_panel, None, OLS, OLS, None, folds)

        assert res.n_obs == small_panel.n_rows
        assert res.k == 2
        assert res.seed == 8
        assert res.learners == {"y": "ols", "d": "ols"}
        assert res.z_res is None
        np.testing.assert_array_equal(res.clusters(), small_panel.unit_ids())
        assert {"mean_y_res", "mean_d_res", "var_ratio_y", "var_ratio_d"} <= set(res.diagnostics)

        frame = res.to_frame()
        assert list(frame.columns) == ["unit", "period", "fold", "y_res", "d_res"]
        path = write_residuals_csv(res, tmp_path / "residuals.csv")
        assert pd.read_csv(path).shape == (small_panel.n_rows, 5)

    def test_absorption_is_recorded(self, small_panel):
        folds = assign_folds(small_panel.units().tolist(), 2, seed=8)
        res = residualize(small_panel, None, OLS, OLS, None, folds, absorb="two_way")
        assert res.absorb == "two_way"

    def test_instrument_residual(self, small_panel):
        ds = small_panel.with_columns({"z": small_panel.column("x1") + small_panel.column("d")})
        roles = small_panel.roles.model_copy(update={"instrument": "z"})
        folds = assign_folds(ds.units().tolist(), 2, seed=8)
        res = residualize(ds, roles, OLS, OLS, OLS, folds)

        assert res.z_res is not None
        assert res.learners["z"] == "ols"
        assert "z_res" in res.to_frame().columns

    def test_instrument_fixed_within_units_is_absorbed(self, small_panel):
        unit_level = np.random.default_rng(3).standard_normal(len(small_panel.units()))
        z = unit_level[small_panel.unit_codes()]
        ds = small_panel.with_columns({"z": z})
        roles = small_panel.roles.model_copy(update={"instrument": "z"})
        folds = assign_folds(ds.units().tolist(), 2, seed=8)

        with pytest.raises(CollinearAfterDemeaning) as exc:
            residualize(ds, roles, OLS, OLS, OLS, folds, absorb="two_way")
        assert exc.value.context["absorb"] == "two_way"
        assert residualize(ds, roles, OLS, OLS, OLS, folds, absorb="period").z_res is not None

    def test_instrument_learner_needs_instrument_role(self, small_panel):
        folds = assign_folds(small_panel.units().tolist(), 2, seed=8)
        with pytest.raises(MissingInstrument):
            residualize(small_panel, None, OLS, OLS, OLS, folds)

    def test_covariates_are_required(self, small_panel):
        folds = assign_folds(small_panel.units().tolist(), 2, seed=8)
        with pytest.raises(InvalidArgument):
            residualize(small_panel, RoleMap(outcome="y", treatment="d"), OLS, OLS, None, folds)

    def test_treatment_without_variation(self, small_panel):
        ds = small_panel.with_columns({"d": np.zeros(small_panel.n_rows)})
        folds = assign_folds(ds.units().tolist(), 2, seed=8)
        with pytest.raises(NoResidualTreatmentVariation):
            residualize(ds, None, OLS, OLS, None, folds)

    def test_from_arrays_checks_lengths(self):
        with pytest.raises(InvalidArgument):
            ResidualizedPanel.from_arrays([1.0, 2.0], [1.0])
        res = ResidualizedPanel.from_arrays([1.0, 2.0], [0.5, -0.5])
        np.testing.assert_array_equal(res.clusters(), [0, 1])
        with pytest.raises(InvalidArgument):
            res.to_frame()


def test_unit_folds_reject_unknown_units(toy_panel):
    folds = assign_folds([1, 2, 3], 2, seed=0)
    with pytest.raises(InvalidArgument):
        folds.row_folds(PanelDataset(toy_panel.frame, "id", "year"))
