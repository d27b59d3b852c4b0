from __future__ import annotations

import math

import numpy as np
import pytest

from app.core.errors import (
    ConstantMediator,
    ConstantModerator,
    GroupTooSmall,
    InvalidArgument,
    NameCollision,
)
from app.models.schemas import DgpConfig, MediatorEffect
from app.services import mechanisms
from app.services.simulator import generate_panel


@pytest.fixture
def moderated_panel():
    cfg = DgpConfig(
        n_units=60, n_periods=6, p_covariates=3, cohort_periods=[3, 5], noise_sd=0.2, effect_heterogeneity=0.5, seed=3
    )
    ds, _ = generate_panel(cfg)
    return ds


@pytest.fixture
def mediated_panel():
    cfg = DgpConfig(
        n_units=80,
        n_periods=6,
        p_covariates=3,
        cohort_periods=[3, 5],
        noise_sd=0.2,
        mediator_effect=MediatorEffect(a=1.0, b=0.5),
        seed=4,
    )
    ds, _ = generate_panel(cfg)
    return ds


class TestModeration:
    def test_interaction_recovers_heterogeneity(self, moderated_panel):
        result = mechanisms.moderation(moderated_panel)

        assert result.interaction.name == "d_x_w"
        assert result.interaction.coef == pytest.approx(0.5, abs=0.15)
        assert result.main_effect.coef == pytest.approx(1.0, abs=0.2)
        assert result.moderator_main is not None
        assert not result.warnings

    def test_absorbed_moderator_drops_its_main_effect(self, moderated_panel):
        ds = moderated_panel.with_columns({"w": moderated_panel.unit_codes() % 3 * 1.0})
        result = mechanisms.moderation(ds)
        assert result.moderator_main is None
        assert any("absorbed" in w for w in result.warnings)

    def test_constant_moderator(self, moderated_panel):
        ds = moderated_panel.with_columns({"w": np.ones(moderated_panel.n_rows)})
        with pytest.raises(ConstantModerator):
            mechanisms.moderation(ds)

    def test_interaction_name_must_be_free(self, moderated_panel):
        ds = moderated_panel.with_columns({"d_x_w": np.zeros(moderated_panel.n_rows)})
        with pytest.raises(NameCollision):
            mechanisms.moderation(ds)

    def test_requires_the_moderator_role(self, small_panel):
        with pytest.raises(InvalidArgument):
            mechanisms.moderation(small_panel)


class TestMediation:
    def test_paths_and_sobel_inference(self, mediated_panel):
        result = mechanisms.mediation(mediated_panel)
        a, b = result.path_a, result.path_b

        assert a.coef == pytest.approx(1.0, abs=0.4)
        assert b.coef == pytest.approx(0.5, abs=0.1)
        assert result.indirect == pytest.approx(a.coef * b.coef)
        assert result.indirect_se == pytest.approx(math.sqrt(a.coef**2 * b.se**2 + b.coef**2 * a.se**2))
        assert result.indirect_ci_low == pytest.approx(result.indirect - 1.959964 * result.indirect_se)
        assert result.method == "sobel"

    def test_total_effect_decomposes(self, mediated_panel):
        result = mechanisms.mediation(mediated_panel)
        assert result.total.coef == pytest.approx(result.direct.coef + result.indirect, abs=1e-6)

    def test_decomposition_without_fixed_effects(self, mediated_panel):
        result = mechanisms.mediation(mediated_panel, fixed_effects=False)
        assert result.fixed_effects is False
        assert result.total.coef == pytest.approx(result.direct.coef + result.indirect, abs=1e-8)

    def test_bootstrap_is_seeded(self, mediated_panel):
        first = mechanisms.mediation(mediated_panel, bootstrap_reps=15, seed=2)
        second = mechanisms.mediation(mediated_panel, bootstrap_reps=15, seed=2)

        assert first.method == "bootstrap"
        assert first.bootstrap_reps == 15
        assert first.indirect_se == second.indirect_se
        assert first.indirect_ci_low < first.indirect_ci_high

    def test_constant_mediator(self, mediated_panel):
        ds = mediated_panel.with_columns({"m": np.zeros(mediated_panel.n_rows)})
        with pytest.raises(ConstantMediator):
            mechanisms.mediation(ds)


class TestSubgroups:
    @pytest.fixture
    def grouped_panel(self):
        cfg = DgpConfig(
            n_units=60, n_periods=6, p_covariates=3, cohort_periods=[3, 5], noise_sd=0.3, group_thetas=[0.5, 1.5], seed=8
        )
        ds, _ = generate_panel(cfg)
        return ds

    def test_contrast_of_group_estimates(self, grouped_panel, ols_pipeline):
        result = mechanisms.subgroup_compare(grouped_panel, "group", ols_pipeline)

        assert list(result.groups) == ["0", "1"]
        contrast = result.contrasts[0]
        low, high = result.groups["0"], result.groups["1"]
        assert contrast.difference == pytest.approx(low.theta - high.theta)
        assert contrast.se == pytest.approx(math.sqrt(low.se**2 + high.se**2))
        assert low.theta < high.theta

    def test_groups_need_enough_units_for_the_folds(self, grouped_panel, ols_pipeline):
        pipeline = ols_pipeline.model_copy(update={"folds": 16})
        with pytest.raises(GroupTooSmall) as exc:
            mechanisms.subgroup_compare(grouped_panel, "group", pipeline)
        assert exc.value.context["required"] == 32

    def test_single_group(self, grouped_panel, ols_pipeline):
        ds = grouped_panel.with_columns({"group": np.zeros(grouped_panel.n_rows)})
        with pytest.raises(InvalidArgument):
            mechanisms.subgroup_compare(ds, "group", ols_pipeline)

    def test_group_labels(self):
        assert mechanisms.group_label(2.0) == "2"
        assert mechanisms.group_label("north") == "north"
