from __future__ import annotations

import itertools
import logging
import math
from typing import Any, List, Optional, Sequence

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from scipy import stats

from app.core.errors import (
    CollinearAfterDemeaning,
    ConstantMediator,
    ConstantModerator,
    GroupTooSmall,
    InvalidArgument,
    NameCollision,
    SdidmlError,
    TooManyFailedReps,
)
from app.core.seeding import rng_for
from app.models.schemas import (
    GroupContrast,
    MediationResult,
    ModerationResult,
    PipelineConfig,
    SubgroupComparison,
    TwfeResult,
)
from app.services.estimators import NORMAL_CRITICAL, estimate_twfe
from app.services.panel_service import PanelDataset, filter_subgroup, two_way_demean, unit_groups
from app.services.pipeline_service import run_pipeline

logger = logging.getLogger(__name__)


def _absorbed(ds: PanelDataset, column: str) -> bool:
    values = ds.column(column)
    spread = float(np.sum((values - values.mean()) ** 2))
    demeaned = two_way_demean(values, ds.unit_codes(), ds.period_codes()).values
    return float(demeaned @ demeaned) <= 1e-10 * spread


def moderation(
    ds: PanelDataset, covariates: Optional[Sequence[str]] = None, cluster: Optional[str] = None
) -> ModerationResult:
    """TWFE of Y on D, D x W, W and the covariates; the interaction is the headline."""
    roles = ds.require_roles()
    if roles.moderator is None:
        raise InvalidArgument("moderation needs the moderator role", role="moderator")
    covariates = list(roles.covariates) if covariates is None else list(covariates)
    w = ds.column(roles.moderator)
    if np.ptp(w) == 0.0:
        raise ConstantModerator("moderator does not vary in the estimation sample", column=roles.moderator)

    interaction = f"{roles.treatment}_x_{roles.moderator}"
    if ds.has_column(interaction):
        raise NameCollision("interaction column already exists", column=interaction)
    work = ds.with_columns({interaction: ds.column(roles.treatment) * w})

    warnings: List[str] = []
    regressors = [roles.treatment, interaction]
    if _absorbed(work, roles.moderator):
        message = f"moderator '{roles.moderator}' is absorbed by the fixed effects; main effect dropped"
        logger.warning(message)
        warnings.append(message)
    else:
        regressors.append(roles.moderator)

    try:
        regression = estimate_twfe(work, roles.outcome, regressors + covariates, cluster)
    except CollinearAfterDemeaning as err:
        if err.context.get("regressor") == interaction:
            raise ConstantModerator(
                "interaction is collinear with the treatment", column=roles.moderator
            ) from err
        raise
    return ModerationResult(
        main_effect=regression.coefficient(roles.treatment),
        interaction=regression.coefficient(interaction),
        moderator_main=regression.coefficient(roles.moderator) if roles.moderator in regressors else None,
        regression=regression,
        warnings=warnings,
    )


def _mediation_paths(
    ds: PanelDataset, outcome: str, treatment: str, mediator: str, covariates: List[str], cluster: Optional[str], absorb: bool
) -> tuple[TwfeResult, TwfeResult, TwfeResult]:
    total = estimate_twfe(ds, outcome, [treatment] + covariates, cluster, absorb=absorb)
    path_a = estimate_twfe(ds, mediator, [treatment] + covariates, cluster, absorb=absorb)
    joint = estimate_twfe(ds, outcome, [treatment, mediator] + covariates, cluster, absorb=absorb)
    return total, path_a, joint


def _resample_units(ds: PanelDataset, rng: np.random.Generator) -> PanelDataset:
    units = ds.units()
    drawn = rng.integers(0, units.size, size=units.size)
    pieces = []
    grouped = {unit: frame for unit, frame in ds.frame.groupby(ds.unit_col, sort=True)}
    for new_id, index in enumerate(drawn):
        piece = grouped[units[index]].copy()
        piece[ds.unit_col] = new_id
        pieces.append(piece)
    return ds.with_frame(pd.concat(pieces, ignore_index=True))


def _bootstrap_indirect(
    ds: PanelDataset,
    roles_args: tuple,
    reps: int,
    seed: int,
) -> np.ndarray:
    draws = []
    for rep in range(reps):
        sample = _resample_units(ds, rng_for(seed, rep))
        try:
            _, path_a, joint = _mediation_paths(sample, *roles_args)
        except SdidmlError as err:
            logger.warning("bootstrap replication %d failed: %s", rep, err)
            continue
        treatment, mediator = roles_args[1], roles_args[2]
        draws.append(path_a.coefficient(treatment).coef * joint.coefficient(mediator).coef)
    failed = reps - len(draws)
    if failed > 0.1 * reps:
        raise TooManyFailedReps("too many failed bootstrap replications", failed=failed, reps=reps)
    return np.asarray(draws)


def mediation(
    ds: PanelDataset,
    covariates: Optional[Sequence[str]] = None,
    cluster: Optional[str] = None,
    fixed_effects: bool = True,
    bootstrap_reps: int = 0,
    seed: int = 0,
) -> MediationResult:
    """Total, a, and joint (b, c') regressions on one sample; indirect effect a*b.

    Inference for a*b is the delta-method (Sobel) SE unless ``bootstrap_reps`` > 0,
    which switches to a seeded unit-level cluster bootstrap with percentile CI.
    """
    roles = ds.require_roles()
    if roles.mediator is None:
        raise InvalidArgument("mediation needs the mediator role", role="mediator")
    covariates = list(roles.covariates) if covariates is None else list(covariates)
    if np.ptp(ds.column(roles.mediator)) == 0.0:
        raise ConstantMediator("mediator does not vary in the estimation sample", column=roles.mediator)

    args = (roles.outcome, roles.treatment, roles.mediator, covariates, cluster, fixed_effects)
    total, path_a, joint = _mediation_paths(ds, *args)
    a = path_a.coefficient(roles.treatment)
    b = joint.coefficient(roles.mediator)
    indirect = a.coef * b.coef

    if bootstrap_reps > 0:
        draws = _bootstrap_indirect(ds, args, bootstrap_reps, seed)
        se = float(draws.std(ddof=1)) if draws.size > 1 else 0.0
        ci_low, ci_high = (float(v) for v in np.percentile(draws, [2.5, 97.5]))
        method = "bootstrap"
    else:
        se = math.sqrt(a.coef**2 * b.se**2 + b.coef**2 * a.se**2)
        ci_low, ci_high = indirect - NORMAL_CRITICAL * se, indirect + NORMAL_CRITICAL * se
        method = "sobel"
    statistic = indirect / se if se > 0.0 else math.copysign(math.inf, indirect) if indirect else 0.0
    p_value = float(2.0 * stats.norm.sf(abs(statistic)))
    return MediationResult(
        total=total.coefficient(roles.treatment),
        path_a=a,
        path_b=b,
        direct=joint.coefficient(roles.treatment),
        indirect=indirect,
        indirect_se=se,
        indirect_statistic=statistic,
        indirect_p_value=p_value,
        indirect_ci_low=ci_low,
        indirect_ci_high=ci_high,
        method=method,
        fixed_effects=fixed_effects,
        n_obs=total.n_obs,
        bootstrap_reps=bootstrap_reps,
    )


def group_label(value: Any) -> str:
    if isinstance(value, float) and value.is_integer():
        return str(int(value))
    return str(value)


def subgroup_compare(
    ds: PanelDataset, group_column: str, pipeline: PipelineConfig, n_jobs: int = 1
) -> SubgroupComparison:
    """Re-run the pipeline within each time-invariant group and contrast every pair."""
    groups = unit_groups(ds, group_column)
    if len(groups) < 2:
        raise InvalidArgument("subgroup comparison needs at least 2 groups", column=group_column, groups=len(groups))
    required = 2 * pipeline.folds
    for value, units in groups.items():
        if len(units) < required:
            raise GroupTooSmall(
                "group has too few units for cross-fitting",
                group=group_label(value),
                required=required,
                available=len(units),
            )

    values = list(groups)
    results = Parallel(n_jobs=n_jobs)(
        delayed(run_pipeline)(filter_subgroup(ds, group_column, {value}), pipeline) for value in values
    )
    by_group = {group_label(value): result for value, result in zip(values, results)}

    contrasts = []
    for first, second in itertools.combinations(by_group, 2):
        a, b = by_group[first], by_group[second]
        difference = a.theta - b.theta
        se = math.sqrt(a.se**2 + b.se**2)
        statistic = difference / se if se > 0.0 else 0.0
        contrasts.append(
            GroupContrast(
                group_a=first,
                group_b=second,
                difference=difference,
                se=se,
                statistic=statistic,
                p_value=float(2.0 * stats.norm.sf(abs(statistic))),
            )
        )
    return SubgroupComparison(groups=by_group, contrasts=contrasts)
