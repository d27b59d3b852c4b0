"""Verification suite around the headline estimate: event study, placebo
permutations, counterfactual timing and the fold/learner/sample sensitivity scan."""

from __future__ import annotations

import itertools
import logging
from typing import Dict, Hashable, List, Mapping, Optional, Sequence

import numpy as np
from joblib import Parallel, delayed
from scipy import stats

from app.core.errors import (
    InsufficientData,
    NameCollision,
    NoControlUnits,
    NoPrePeriods,
    SdidmlError,
    TooManyFailedReps,
)
from app.core.seeding import rng_for
from app.models.schemas import (
    CounterfactualResult,
    DensityGrid,
    EventStudyPoint,
    EventStudyResult,
    LearnerSpec,
    PipelineConfig,
    PlaceboResult,
    SampleRestriction,
    SensitivityRow,
    SensitivityTable,
)
from app.services.estimators import estimate_twfe
from app.services.panel_service import NEVER, CohortMap, PanelDataset, relative_time, restrict_sample
from app.services.pipeline_service import run_pipeline

logger = logging.getLogger(__name__)

MAX_FAILED_SHARE = 0.10
GRID_POINTS = 512


def event_dummy_name(relative: int) -> str:
    return f"rel_{'m' if relative < 0 else 'p'}{abs(relative)}"


def event_study(
    ds: PanelDataset,
    cohorts: CohortMap,
    covariates: Optional[Sequence[str]] = None,
    floor_bin: int = -4,
    reference: int = -1,
    cluster: Optional[str] = None,
) -> EventStudyResult:
    """Binned relative-time TWFE regression; never-treated units are the controls."""
    roles = ds.require_roles()
    covariates = list(roles.covariates) if covariates is None else list(covariates)
    if not cohorts.never_treated_units():
        raise NoControlUnits("event study needs never-treated units")

    distance = relative_time(ds, cohorts, floor_bin).to_numpy()
    observed = sorted({int(v) for v in distance[~np.isnan(distance)]})
    before = [v for v in observed if v < reference]
    after = [v for v in observed if v > reference]
    if len(before) < 2:
        raise NoPrePeriods("fewer than 2 relative periods before the reference", reference=reference, found=len(before))
    if len(after) < 2:
        raise InsufficientData("fewer than 2 relative periods after the reference", reference=reference, found=len(after))

    bins = [v for v in observed if v != reference]
    dummies: Dict[str, np.ndarray] = {}
    for value in bins:
        name = event_dummy_name(value)
        if ds.has_column(name):
            raise NameCollision("event-study dummy clashes with an existing column", column=name)
        dummies[name] = np.where(distance == value, 1.0, 0.0)

    regression = estimate_twfe(ds.with_columns(dummies), roles.outcome, list(dummies) + covariates, cluster)
    points = []
    for value in bins:
        coef = regression.coefficient(event_dummy_name(value))
        points.append(
            EventStudyPoint(relative_time=value, coef=coef.coef, se=coef.se, ci_low=coef.ci_low, ci_high=coef.ci_high)
        )
    return EventStudyResult(
        points=points,
        reference=reference,
        floor_bin=floor_bin,
        n_obs=regression.n_obs,
        n_clusters=regression.n_clusters,
        warnings=list(regression.warnings),
    )


def kde_grid(values: Sequence[float], points: int = GRID_POINTS) -> Optional[DensityGrid]:
    """Gaussian KDE with Silverman's bandwidth plus the matching normal overlay."""
    sample = np.asarray(values, dtype=np.float64)
    if sample.size < 2:
        return None
    sd = float(sample.std(ddof=1))
    if sd == 0.0:
        return None
    spread = float(stats.iqr(sample)) / 1.34
    scale = min(sd, spread) if spread > 0.0 else sd
    bandwidth = 0.9 * scale * sample.size ** (-0.2)
    kde = stats.gaussian_kde(sample, bw_method=bandwidth / sd)
    grid = np.linspace(sample.min() - 5 * bandwidth, sample.max() + 5 * bandwidth, points)
    mean = float(sample.mean())
    return DensityGrid(
        grid=grid.tolist(),
        density=kde(grid).tolist(),
        normal_density=stats.norm.pdf(grid, loc=mean, scale=sd).tolist(),
        bandwidth=bandwidth,
        normal_mean=mean,
        normal_sd=sd,
    )


def _with_treatment(ds: PanelDataset, treatment: np.ndarray) -> PanelDataset:
    return ds.with_columns({ds.require_roles().treatment: treatment})


def _rep_theta(ds: PanelDataset, pipeline: PipelineConfig) -> Optional[float]:
    try:
        return run_pipeline(ds, pipeline).theta
    except SdidmlError as err:
        logger.warning("replication failed: %s", err)
        return None


def _placebo_rep(
    ds: PanelDataset, pipeline: PipelineConfig, cohorts: CohortMap, seed: int, rep: int, scheme: str
) -> Optional[float]:
    rng = rng_for(seed, rep)
    if scheme == "observation":
        shuffled = rng.permutation(ds.column(ds.require_roles().treatment))
        return _rep_theta(_with_treatment(ds, shuffled), pipeline)
    units = sorted(cohorts.entries)
    labels = [cohorts.entries[u] for u in units]
    order = rng.permutation(len(units))
    permuted = CohortMap(entries={u: labels[order[i]] for i, u in enumerate(units)})
    return _rep_theta(_with_treatment(ds, permuted.indicator(ds.unit_ids(), ds.period_values())), pipeline)


def _collect(thetas: List[Optional[float]], reps: int, what: str) -> List[float]:
    failed = sum(theta is None for theta in thetas)
    if failed > MAX_FAILED_SHARE * reps:
        raise TooManyFailedReps(f"too many failed {what} replications", failed=failed, reps=reps)
    if failed:
        logger.warning("%d of %d %s replications failed and were excluded", failed, reps, what)
    return [theta for theta in thetas if theta is not None]


def placebo_permutation(
    ds: PanelDataset,
    pipeline: PipelineConfig,
    reps: int = 500,
    seed: int = 123,
    cohorts: Optional[CohortMap] = None,
    scheme: str = "unit",
    n_jobs: int = 1,
    observed_theta: Optional[float] = None,
) -> PlaceboResult:
    """Permutation null for the S-DIDML estimate.

    ``scheme="unit"`` permutes cohort labels (NEVER included) across units and
    rebuilds an absorbing D; ``scheme="observation"`` shuffles the D column row-wise.
    """
    roles = ds.require_roles()
    cohorts = cohorts or CohortMap.from_treatment(ds, roles.treatment)
    observed = run_pipeline(ds, pipeline, n_jobs).theta if observed_theta is None else observed_theta
    raw = Parallel(n_jobs=n_jobs)(
        delayed(_placebo_rep)(ds, pipeline, cohorts, seed, r, scheme) for r in range(reps)
    )
    thetas = _collect(raw, reps, "placebo")
    extreme = sum(abs(theta) >= abs(observed) for theta in thetas)
    return PlaceboResult(
        observed_theta=observed,
        thetas=thetas,
        p_value=(1 + extreme) / (len(thetas) + 1),
        reps=reps,
        seed=seed,
        scheme=scheme,
        failed_reps=reps - len(thetas),
        density=kde_grid(thetas),
    )


def _timing_rep(
    ds: PanelDataset, pipeline: PipelineConfig, cohorts: CohortMap, periods: np.ndarray, seed: int, rep: int
) -> Optional[float]:
    rng = rng_for(seed, rep)
    entries: Dict[Hashable, Optional[int]] = {}
    for unit in sorted(cohorts.entries):
        g = cohorts.entries[unit]
        entries[unit] = NEVER if g is NEVER else int(rng.choice(periods))
    fake = CohortMap(entries=entries)
    return _rep_theta(_with_treatment(ds, fake.indicator(ds.unit_ids(), ds.period_values())), pipeline)


def counterfactual_timing(
    ds: PanelDataset,
    pipeline: PipelineConfig,
    reps: int = 500,
    seed: int = 123,
    cohorts: Optional[CohortMap] = None,
    n_jobs: int = 1,
    observed_theta: Optional[float] = None,
) -> CounterfactualResult:
    """Re-estimate with a random treatment year per treated unit drawn from the observed periods."""
    periods = ds.periods()
    if periods.size < 2:
        raise NoPrePeriods("counterfactual timing needs at least 2 observed periods", periods=int(periods.size))
    roles = ds.require_roles()
    cohorts = cohorts or CohortMap.from_treatment(ds, roles.treatment)
    observed = run_pipeline(ds, pipeline, n_jobs).theta if observed_theta is None else observed_theta
    raw = Parallel(n_jobs=n_jobs)(
        delayed(_timing_rep)(ds, pipeline, cohorts, periods, seed, r) for r in range(reps)
    )
    thetas = np.asarray(_collect(raw, reps, "counterfactual"))
    below = float(np.mean(thetas <= observed))
    above = float(np.mean(thetas >= observed))
    return CounterfactualResult(
        observed_theta=observed,
        thetas=thetas.tolist(),
        mean=float(thetas.mean()),
        sd=float(thetas.std(ddof=1)) if thetas.size > 1 else 0.0,
        observed_percentile=below,
        tail_share=min(1.0, 2.0 * min(below, above)),
        reps=reps,
        seed=seed,
        failed_reps=reps - int(thetas.size),
        density=kde_grid(thetas),
    )


def default_learner_variants() -> List[LearnerSpec]:
    return [LearnerSpec(kind="forest"), LearnerSpec(kind="lasso_cv")]


def _apply_sample(ds: PanelDataset, restriction: Optional[SampleRestriction]) -> PanelDataset:
    if restriction is None:
        return ds
    return restrict_sample(ds, restriction.exclude_units, restriction.exclude_periods, restriction.period_range)


def _sensitivity_row(
    ds: PanelDataset,
    base: PipelineConfig,
    folds: int,
    spec: LearnerSpec,
    sample: str,
    restriction: Optional[SampleRestriction],
) -> SensitivityRow:
    row = SensitivityRow(
        descriptor=f"folds={folds};learner={spec.label};sample={sample}",
        folds=folds,
        learner=spec.label,
        sample=sample,
        seed=base.seed,
        learner_spec=spec,
    )
    pipeline = base.model_copy(update={"folds": folds}).with_learner(spec)
    try:
        result = run_pipeline(_apply_sample(ds, restriction), pipeline)
    except SdidmlError as err:
        logger.warning("sensitivity variant %s failed: %s", row.descriptor, err)
        return row.model_copy(update={"error": str(err)})
    return row.model_copy(update={"result": result})


def sensitivity_scan(
    ds: PanelDataset,
    base: PipelineConfig,
    fold_variants: Sequence[int] = (5,),
    learner_variants: Optional[Sequence[LearnerSpec]] = None,
    sample_variants: Optional[Mapping[str, Optional[SampleRestriction]]] = None,
    n_jobs: int = 1,
) -> SensitivityTable:
    """Cartesian product of fold counts, learners and samples, all under the base seed."""
    learners = list(learner_variants) if learner_variants is not None else default_learner_variants()
    samples = dict(sample_variants) if sample_variants else {"full": None}
    combos = list(itertools.product(sorted(set(fold_variants)), learners, sorted(samples)))
    rows = Parallel(n_jobs=n_jobs)(
        delayed(_sensitivity_row)(ds, base, k, spec, name, samples[name]) for k, spec, name in combos
    )
    return SensitivityTable(rows=sorted(rows, key=lambda row: row.descriptor))
