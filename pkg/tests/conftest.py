from __future__ import annotations

import numpy as np
import pandas as pd
import pytest

from app.models.schemas import DgpConfig, LearnerSpec, PipelineConfig, RoleMap
from app.services.panel_service import PanelDataset
from app.services.simulator import generate_panel


OLS = LearnerSpec(kind="ols")


@pytest.fixture
def small_dgp() -> DgpConfig:
    return DgpConfig(
        n_units=40,
        n_periods=6,
        p_covariates=3,
        theta0=1.0,
        cohort_periods=[4, 5],
        never_share=0.5,
        noise_sd=0.5,
        seed=7,
    )


@pytest.fixture
def small_panel(small_dgp):
    ds, _ = generate_panel(small_dgp)
    return ds


@pytest.fixture
def ols_pipeline() -> PipelineConfig:
    return PipelineConfig(folds=2, learner_y=OLS, learner_d=OLS, learner_z=OLS, seed=11)


@pytest.fixture
def toy_frame() -> pd.DataFrame:
    """Four units over three periods; units 1 and 2 switch on in period 2 and 3."""
    rng = np.random.default_rng(3)
    units = np.repeat([1, 2, 3, 4], 3)
    periods = np.tile([1, 2, 3], 4)
    d = np.array([0, 1, 1, 0, 0, 1, 0, 0, 0, 0, 0, 0], dtype=float)
    x1 = rng.standard_normal(12)
    y = 2.0 * d + x1 + rng.standard_normal(12)
    return pd.DataFrame({"id": units, "year": periods, "y": y, "d": d, "x1": x1})


@pytest.fixture
def toy_panel(toy_frame) -> PanelDataset:
    return PanelDataset(frame=toy_frame, unit_col="id", time_col="year")


@pytest.fixture
def toy_roles() -> RoleMap:
    return RoleMap(outcome="y", treatment="d", covariates=["x1"])


SIMULATED_CONFIG = """
[simulate]
n_units = 30
n_periods = 6
p_covariates = 3
cohort_periods = [4, 5]
never_share = 0.5
noise_sd = 0.5
seed = 5

[dml]
folds = 2
learner_y = "ols"
learner_d = "ols"
seed = 9

[robustness]
placebo_reps = 5
counterfactual_reps = 5
sensitivity_folds = [2]
sensitivity_learners = ["ols"]
"""


@pytest.fixture
def simulated_config_text() -> str:
    return SIMULATED_CONFIG
