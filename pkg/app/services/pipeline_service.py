from __future__ import annotations

import logging

from app.models.schemas import EstimateResult, LearnerSpec, PipelineConfig
from app.services.crossfit_service import (
    FoldAssignment,
    ResidualizedPanel,
    assign_folds,
    assign_observation_folds,
    residualize,
)
from app.services.estimators import estimate_iv_plr, estimate_plr, estimate_twfe, twfe_as_estimate
from app.services.panel_service import PanelDataset

logger = logging.getLogger(__name__)


def _seeded(spec: LearnerSpec, seed: int) -> LearnerSpec:
    return spec.model_copy(update={"seed": seed})


def make_folds(ds: PanelDataset, pipeline: PipelineConfig) -> FoldAssignment:
    if pipeline.fold_level == "observation":
        return assign_observation_folds(ds.n_rows, pipeline.folds, pipeline.seed)
    return assign_folds(ds.units().tolist(), pipeline.folds, pipeline.seed)


def residualize_for(ds: PanelDataset, pipeline: PipelineConfig, n_jobs: int = 1) -> ResidualizedPanel:
    """Cross-fitted residuals under ``pipeline``; the pipeline seed drives folds and every learner."""
    z_spec = _seeded(pipeline.learner_z, pipeline.seed) if pipeline.estimator == "iv" else None
    return residualize(
        ds,
        ds.require_roles(),
        _seeded(pipeline.learner_y, pipeline.seed),
        _seeded(pipeline.learner_d, pipeline.seed),
        z_spec,
        make_folds(ds, pipeline),
        absorb=pipeline.absorb,
        n_jobs=n_jobs,
    )


def estimate_residualized(res: ResidualizedPanel, pipeline: PipelineConfig) -> EstimateResult:
    if pipeline.estimator == "iv":
        return estimate_iv_plr(res)
    return estimate_plr(res)


def run_pipeline(ds: PanelDataset, pipeline: PipelineConfig, n_jobs: int = 1) -> EstimateResult:
    """One full S-DIDML estimate on ``ds`` (roles assigned) under ``pipeline``."""
    roles = ds.require_roles()
    if pipeline.estimator == "twfe":
        regression = estimate_twfe(ds, roles.outcome, [roles.treatment] + list(roles.covariates), roles.cluster)
        return twfe_as_estimate(regression, roles.treatment)

    result = estimate_residualized(residualize_for(ds, pipeline, n_jobs), pipeline)
    logger.debug("pipeline %s K=%d seed=%d theta=%g", pipeline.estimator, pipeline.folds, pipeline.seed, result.theta)
    return result
