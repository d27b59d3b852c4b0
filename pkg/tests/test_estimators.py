from __future__ import annotations

import math

import numpy as np
import pandas as pd
import pytest

from app.core.errors import (
    CollinearAfterDemeaning,
    DegenerateClusters,
    InvalidArgument,
    MissingInstrument,
    NoResidualTreatmentVariation,
    WeakDenominator,
)
from app.models.schemas import RoleMap
from app.services.crossfit_service import ResidualizedPanel
from app.services.estimators import (
    benchmark_twfe,
    estimate_iv_plr,
    estimate_naive,
    estimate_plr,
    estimate_twfe,
    summarize_inference,
    twfe_as_estimate,
)
from app.services.panel_service import PanelDataset


@pytest.fixture
def fe_panel() -> PanelDataset:
    """Balanced 15 x 5 panel with additive unit and period effects."""
    rng = np.random.default_rng(21)
    n_units, n_periods = 15, 5
    units = np.repeat(np.arange(n_units), n_periods)
    periods = np.tile(np.arange(2000, 2000 + n_periods), n_units)
    alpha = rng.standard_normal(n_units)[units]
    lam = rng.standard_normal(n_periods)[periods - 2000]
    x1 = rng.standard_normal(units.size) + alpha
    x2 = rng.standard_normal(units.size)
    y = 1.0 * x1 - 0.5 * x2 + alpha + lam + 0.3 * rng.standard_normal(units.size)
    frame = pd.DataFrame({"id": units, "year": periods, "y": y, "x1": x1, "x2": x2})
    return PanelDataset(frame=frame, unit_col="id", time_col="year")


def _dummy_ols(ds: PanelDataset, regressors):
    unit_dummies = pd.get_dummies(ds.frame["id"], dtype=float).to_numpy()
    period_dummies = pd.get_dummies(ds.frame["year"], dtype=float).to_numpy()[:, 1:]
    design = np.column_stack([ds.matrix(regressors), unit_dummies, period_dummies])
    beta, *_ = np.linalg.lstsq(design, ds.column("y"), rcond=None)
    resid = ds.column("y") - design @ beta
    return beta[: len(regressors)], resid


class TestSummarizeInference:
    @pytest.mark.parametrize(
        "theta, se, df, ci_low, ci_high",
        [
            (-0.0085482, 0.0521965, None, -0.1108515, 0.0937551),
            (0.1507175, 0.0269503, None, 0.0978959, 0.2035391),
            (-0.0477265, 0.0927761, 281, -0.2303509, 0.1348979),
        ],
    )
    def test_reference_intervals(self, theta, se, df, ci_low, ci_high):
        summary = summarize_inference(theta, se, df)
        assert summary.ci_low == pytest.approx(ci_low, abs=1e-6)
        assert summary.ci_high == pytest.approx(ci_high, abs=1e-6)

    def test_z_statistic_and_p_value(self):
        summary = summarize_inference(0.1507175, 0.0269503)
        assert summary.statistic == pytest.approx(5.5924, abs=1e-4)
        assert summary.p_value < 1e-7

    def test_zero_estimate_has_p_one(self):
        assert summarize_inference(0.0, 1.0).p_value == pytest.approx(1.0)

    @pytest.mark.parametrize("se, df", [(0.0, None), (-1.0, None), (1.0, 0)])
    def test_invalid_arguments(self, se, df):
        with pytest.raises(InvalidArgument):
            summarize_inference(0.1, se, df)


class TestPartiallyLinear:
    def test_closed_form_and_hc_standard_error(self):
        rng = np.random.default_rng(4)
        d = rng.standard_normal(50)
        y = 0.8 * d + rng.standard_normal(50)
        result = estimate_plr(ResidualizedPanel.from_arrays(y, d))

        theta = float(d @ y / (d @ d))
        scores = (y - theta * d) * d
        se = math.sqrt(50 / 49 * float(scores @ scores)) / float(d @ d)
        assert result.theta == pytest.approx(theta)
        assert result.se == pytest.approx(se)
        assert result.n_clusters == 50
        assert result.df is None
        assert result.ci_low == pytest.approx(theta - 1.959964 * se)

    def test_cluster_sums_pool_scores(self):
        d = np.array([1.0, -1.0, 2.0, 0.5, -0.5, 1.5])
        y = np.array([1.0, 0.0, 1.5, 0.0, -1.0, 2.0])
        clusters = ["a", "a", "b", "b", "c", "c"]
        result = estimate_plr(ResidualizedPanel.from_arrays(y, d, clusters=clusters))

        theta = float(d @ y / (d @ d))
        sums = ((y - theta * d) * d).reshape(3, 2).sum(axis=1)
        assert result.se == pytest.approx(math.sqrt(1.5 * float(sums @ sums)) / float(d @ d))
        assert result.n_clusters == 3

    def test_interleaved_cluster_labels(self):
        d = np.array([1.0, -1.0, 2.0, 0.5, -0.5, 1.5])
        y = np.array([1.0, 0.0, 1.5, 0.0, -1.0, 2.0])
        order = [0, 2, 4, 1, 3, 5]
        grouped = estimate_plr(ResidualizedPanel.from_arrays(y, d, clusters=[7, 7, 3, 3, 9, 9]))
        shuffled = estimate_plr(ResidualizedPanel.from_arrays(y[order], d[order], clusters=[7, 3, 9, 7, 3, 9]))

        assert shuffled.n_clusters == 3
        assert shuffled.se == pytest.approx(grouped.se)

    def test_unclustered_flag(self):
        d = np.array([1.0, -1.0, 2.0, 0.5])
        res = ResidualizedPanel.from_arrays([1.0, 0.0, 1.0, 0.2], d, clusters=["a", "a", "b", "b"])
        assert estimate_plr(res, clustered=False).n_clusters == 4

    def test_single_cluster_is_degenerate(self):
        res = ResidualizedPanel.from_arrays([1.0, 2.0, 0.5], [1.0, -1.0, 0.3], clusters=["a", "a", "a"])
        with pytest.raises(DegenerateClusters):
            estimate_plr(res)

    def test_constant_treatment_residual(self):
        with pytest.raises(NoResidualTreatmentVariation):
            estimate_plr(ResidualizedPanel.from_arrays([1.0, 2.0, 3.0], [0.0, 0.0, 0.0]))


class TestInstrumental:
    def test_ratio_of_moments(self):
        rng = np.random.default_rng(6)
        z = rng.standard_normal(200)
        d = 0.9 * z + rng.standard_normal(200)
        y = 1.5 * d + rng.standard_normal(200)
        result = estimate_iv_plr(ResidualizedPanel.from_arrays(y, d, z_res=z))

        assert result.method == "iv_plr"
        assert result.theta == pytest.approx(float(z @ y / (z @ d)))
        assert result.diagnostics["first_stage_f"] > 10.0
        assert not result.warnings

    def test_weak_instrument_warning(self):
        rng = np.random.default_rng(6)
        z = rng.standard_normal(200)
        d = 0.02 * z + rng.standard_normal(200)
        result = estimate_iv_plr(ResidualizedPanel.from_arrays(rng.standard_normal(200), d, z_res=z))
        assert any("weak instrument" in w for w in result.warnings)

    def test_orthogonal_instrument(self):
        res = ResidualizedPanel.from_arrays([1.0, 2.0], [1.0, 1.0], z_res=[1.0, -1.0])
        with pytest.raises(WeakDenominator):
            estimate_iv_plr(res)

    def test_missing_instrument_residual(self):
        with pytest.raises(MissingInstrument):
            estimate_iv_plr(ResidualizedPanel.from_arrays([1.0, 2.0], [1.0, -1.0]))


class TestTwoWayFixedEffects:
    def test_matches_dummy_variable_regression(self, fe_panel):
        result = estimate_twfe(fe_panel, "y", ["x1", "x2"])
        beta, _ = _dummy_ols(fe_panel, ["x1", "x2"])

        assert result.coefficient("x1").coef == pytest.approx(beta[0], abs=1e-8)
        assert result.coefficient("x2").coef == pytest.approx(beta[1], abs=1e-8)
        assert result.n_clusters == 15
        assert result.df == 14
        assert result.method == "twfe"

    def test_cluster_robust_standard_error(self, fe_panel):
        result = estimate_twfe(fe_panel, "y", ["x1", "x2"])
        _, resid = _dummy_ols(fe_panel, ["x1", "x2"])

        units, periods = fe_panel.unit_codes(), fe_panel.period_codes()
        X = fe_panel.matrix(["x1", "x2"])
        X = X - pd.DataFrame(X).groupby(units).transform("mean").to_numpy()
        X = X - pd.DataFrame(X).groupby(periods).transform("mean").to_numpy()
        meat_rows = pd.DataFrame(X * resid[:, None]).groupby(units).sum().to_numpy()
        bread = np.linalg.inv(X.T @ X)
        n, k, g = 75, 2 + 4, 15
        cov = g / (g - 1) * (n - 1) / (n - k) * bread @ (meat_rows.T @ meat_rows) @ bread
        assert result.coefficient("x1").se == pytest.approx(math.sqrt(cov[0, 0]), rel=1e-6)

    def test_time_invariant_regressor_is_absorbed(self, fe_panel):
        ds = fe_panel.with_columns({"size": fe_panel.unit_codes() * 1.0})
        with pytest.raises(CollinearAfterDemeaning) as exc:
            estimate_twfe(ds, "y", ["x1", "size"])
        assert exc.value.context["regressor"] == "size"

    def test_pooled_ols_adds_constant(self, fe_panel):
        result = estimate_twfe(fe_panel, "y", ["x1"], absorb=False)
        assert result.method == "pooled_ols"
        assert result.coefficients[0].name == "_cons"
        assert result.n_units_absorbed == 0

    def test_requires_a_regressor(self, fe_panel):
        with pytest.raises(InvalidArgument):
            estimate_twfe(fe_panel, "y", [])

    def test_benchmarks_and_headline(self, small_panel):
        models = benchmark_twfe(small_panel)
        assert list(models) == ["Y~D", "Y~D+X"]
        headline = twfe_as_estimate(models["Y~D+X"], "d")
        assert headline.theta == models["Y~D+X"].coefficient("d").coef
        assert headline.df == models["Y~D+X"].df
        assert abs(headline.theta - 1.0) < 0.5


def test_naive_difference_in_means():
    frame = pd.DataFrame(
        {
            "id": [1, 1, 2, 2, 3, 3],
            "year": [1, 2, 1, 2, 1, 2],
            "y": [1.0, 3.0, 0.0, 5.0, 2.0, 1.0],
            "d": [0.0, 1.0, 0.0, 1.0, 0.0, 0.0],
        }
    )
    ds = PanelDataset(frame, "id", "year", roles=RoleMap(outcome="y", treatment="d"))
    result = estimate_naive(ds)
    assert result.theta == pytest.approx(4.0 - 1.0)
    assert result.method == "naive"
    assert result.se == pytest.approx(math.sqrt(2.0 / 2 + (2.0 / 3) / 4))
