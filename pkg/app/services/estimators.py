from __future__ import annotations

import logging
import math
from typing import Dict, Hashable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import stats

from app.core.errors import (
    CollinearAfterDemeaning,
    DegenerateClusters,
    InsufficientData,
    InvalidArgument,
    MissingInstrument,
    NonConvergence,
    NoResidualTreatmentVariation,
    WeakDenominator,
)
from app.models.schemas import EstimateResult, InferenceSummary, TwfeCoefficient, TwfeResult
from app.services.crossfit_service import MIN_TREATMENT_VARIANCE, ResidualizedPanel
from app.services.panel_service import PanelDataset, two_way_demean

logger = logging.getLogger(__name__)

NORMAL_CRITICAL = 1.959964
WEAK_INSTRUMENT_F = 10.0
COLLINEAR_TOL = 1e-10


def _critical(df: Optional[int]) -> float:
    if df is None:
        return NORMAL_CRITICAL
    return float(stats.t.ppf(0.975, df))


def _p_value(statistic: float, df: Optional[int]) -> float:
    if df is None:
        return float(2.0 * stats.norm.sf(abs(statistic)))
    return float(2.0 * stats.t.sf(abs(statistic), df))


def _inference(theta: float, se: float, df: Optional[int]) -> InferenceSummary:
    if se == 0.0:
        # exact fit: the interval collapses onto the estimate
        statistic = 0.0 if theta == 0.0 else math.copysign(math.inf, theta)
        return InferenceSummary(
            statistic=statistic, p_value=1.0 if theta == 0.0 else 0.0, ci_low=theta, ci_high=theta
        )
    statistic = theta / se
    half = _critical(df) * se
    return InferenceSummary(statistic=statistic, p_value=_p_value(statistic, df), ci_low=theta - half, ci_high=theta + half)


def summarize_inference(theta: float, se: float, df: Optional[int] = None) -> InferenceSummary:
    """z (df=None) or Student-t statistic, two-sided p and 95% interval."""
    if not se > 0.0:
        raise InvalidArgument("standard error must be positive", se=se)
    if df is not None and df < 1:
        raise InvalidArgument("degrees of freedom must be at least 1", df=df)
    return _inference(float(theta), float(se), df)


def _cluster_sums(scores: np.ndarray, clusters: np.ndarray) -> Tuple[np.ndarray, int]:
    """Per-cluster sums of the score rows; ``scores`` is n or n x p."""
    codes, uniques = _codes(clusters)
    if scores.ndim == 1:
        return np.bincount(codes, weights=scores, minlength=len(uniques)), len(uniques)
    sums = np.column_stack(
        [np.bincount(codes, weights=scores[:, j], minlength=len(uniques)) for j in range(scores.shape[1])]
    )
    return sums, len(uniques)


def _codes(values: np.ndarray) -> Tuple[np.ndarray, List[Hashable]]:
    # first-appearance order; a missing label is its own cluster
    codes, uniques = pd.factorize(np.asarray(values), sort=False, use_na_sentinel=False)
    return codes.astype(np.int64), list(uniques)


def _score_se(scores: np.ndarray, clusters: np.ndarray, denominator: float) -> Tuple[float, int]:
    sums, n_clusters = _cluster_sums(scores, clusters)
    if n_clusters < 2:
        raise DegenerateClusters("at least 2 clusters are required", clusters=n_clusters)
    correction = n_clusters / (n_clusters - 1)
    return math.sqrt(correction * float(sums @ sums)) / abs(denominator), n_clusters


def _result(
    method: str, theta: float, se: float, n_obs: int, n_clusters: int, res: ResidualizedPanel, **extra
) -> EstimateResult:
    summary = _inference(theta, se, None)
    return EstimateResult(
        theta=theta,
        se=se,
        statistic=summary.statistic,
        p_value=summary.p_value,
        ci_low=summary.ci_low,
        ci_high=summary.ci_high,
        n_obs=n_obs,
        n_clusters=n_clusters,
        df=None,
        method=method,
        learners=dict(res.learners),
        folds=res.k,
        seed=res.seed,
        **extra,
    )


def estimate_plr(res: ResidualizedPanel, cluster: Optional[str] = None, clustered: bool = True) -> EstimateResult:
    """Partialling-out estimate: slope of the Y residual on the D residual without intercept.

    ``clustered=False`` treats every row as its own cluster (HC1-type SE).
    """
    y, d = res.y_res, res.d_res
    if y.size < 2 or np.var(d, ddof=1) < MIN_TREATMENT_VARIANCE:
        raise NoResidualTreatmentVariation("treatment residual has no variance")
    denominator = float(d @ d)
    theta = float(d @ y) / denominator
    scores = (y - theta * d) * d
    clusters = res.clusters(cluster) if clustered else np.arange(y.size)
    se, n_clusters = _score_se(scores, clusters, denominator)
    return _result(
        "plr",
        theta,
        se,
        y.size,
        n_clusters,
        res,
        diagnostics=dict(res.diagnostics),
        warnings=list(res.warnings),
    )


def estimate_iv_plr(res: ResidualizedPanel, cluster: Optional[str] = None, clustered: bool = True) -> EstimateResult:
    """Partially linear IV estimate with the instrument residual as the moment weight."""
    if res.z_res is None:
        raise MissingInstrument("residual panel carries no instrument residual")
    y, d, z = res.y_res, res.d_res, res.z_res
    n = y.size
    denominator = float(z @ d)
    if abs(denominator) / n < 1e-12:
        raise WeakDenominator("instrument residual is orthogonal to the treatment residual", denominator=denominator)
    theta = float(z @ y) / denominator
    clusters = res.clusters(cluster) if clustered else np.arange(n)
    se, n_clusters = _score_se((y - theta * d) * z, clusters, denominator)

    # first stage: D residual on Z residual, no intercept
    zz = float(z @ z)
    slope = denominator / zz
    first_se, _ = _score_se((d - slope * z) * z, clusters, zz)
    first_t = math.copysign(math.inf, slope) if first_se == 0.0 else slope / first_se
    diagnostics = dict(res.diagnostics)
    diagnostics.update({"first_stage_slope": slope, "first_stage_t": first_t, "first_stage_f": first_t**2})
    warnings = list(res.warnings)
    if first_t**2 < WEAK_INSTRUMENT_F:
        message = f"weak instrument: first-stage t^2 = {first_t**2:.4g} < {WEAK_INSTRUMENT_F:g}"
        logger.warning(message)
        warnings.append(message)
    return _result("iv_plr", theta, se, n, n_clusters, res, diagnostics=diagnostics, warnings=warnings)


# Two-way fixed effects
def _collinear_column(design: np.ndarray, names: Sequence[str], raw: np.ndarray) -> Optional[str]:
    """First column whose residual on the preceding ones vanishes relative to its raw spread."""
    for j in range(design.shape[1]):
        column = design[:, j]
        spread = float(np.sum((raw[:, j] - raw[:, j].mean()) ** 2))
        if names[j] == "_cons":
            spread = float(np.sum(raw[:, j] ** 2))
        if j == 0:
            residual = column
        else:
            coef, *_ = np.linalg.lstsq(design[:, :j], column, rcond=None)
            residual = column - design[:, :j] @ coef
        if spread == 0.0 or float(residual @ residual) <= COLLINEAR_TOL * spread:
            return names[j]
    return None


def _units_nested(unit_ids: np.ndarray, clusters: np.ndarray) -> bool:
    seen: Dict[Hashable, Hashable] = {}
    for unit, cluster in zip(unit_ids.tolist(), clusters.tolist()):
        if seen.setdefault(unit, cluster) != cluster:
            return False
    return True


def _coefficients(
    names: Sequence[str], beta: np.ndarray, cov: np.ndarray, df: int
) -> List[TwfeCoefficient]:
    out = []
    for j, name in enumerate(names):
        se = math.sqrt(max(float(cov[j, j]), 0.0))
        summary = _inference(float(beta[j]), se, df)
        out.append(
            TwfeCoefficient(
                name=name,
                coef=float(beta[j]),
                se=se,
                statistic=summary.statistic,
                p_value=summary.p_value,
                ci_low=summary.ci_low,
                ci_high=summary.ci_high,
            )
        )
    return out


def estimate_twfe(
    ds: PanelDataset,
    y: str,
    regressors: Sequence[str],
    cluster: Optional[str] = None,
    absorb: bool = True,
    tol: float = 1e-10,
    max_sweeps: int = 1000,
) -> TwfeResult:
    """OLS of ``y`` on ``regressors`` with unit and period effects absorbed by
    alternating demeaning and CR1 cluster-robust inference with t(G-1).

    ``absorb=False`` runs pooled OLS with an intercept instead.
    """
    if not regressors:
        raise InvalidArgument("at least one regressor is required")
    n_units = len(ds.units())
    n_periods = len(ds.periods())
    if n_units < 2 or n_periods < 2:
        raise InsufficientData("need at least 2 units and 2 periods", units=n_units, periods=n_periods)

    names = list(regressors)
    raw = ds.matrix([y] + names)
    iterations, max_change = 0, 0.0
    if absorb:
        demeaned = two_way_demean(raw, ds.unit_codes(), ds.period_codes(), tol=tol, max_sweeps=max_sweeps)
        if not demeaned.converged:
            raise NonConvergence(
                "alternating demeaning did not converge", sweeps=demeaned.iterations, change=demeaned.max_change
            )
        values, iterations, max_change = demeaned.values, demeaned.iterations, demeaned.max_change
        design, raw_design = values[:, 1:], raw[:, 1:]
    else:
        values = raw
        names = ["_cons"] + names
        design = np.column_stack([np.ones(ds.n_rows), raw[:, 1:]])
        raw_design = design
    target = values[:, 0]

    collinear = _collinear_column(design, names, raw_design)
    if collinear is not None:
        raise CollinearAfterDemeaning("regressor is absorbed by the fixed effects or other regressors", regressor=collinear)

    beta, *_ = np.linalg.lstsq(design, target, rcond=None)
    resid = target - design @ beta
    clusters = ds.cluster_values(cluster)
    n = ds.n_rows
    if absorb:
        nested = _units_nested(ds.unit_ids(), clusters)
        k = design.shape[1] + (n_periods - 1) + (0 if nested else n_units - 1)
    else:
        k = design.shape[1]
    if n <= k:
        raise InsufficientData("no residual degrees of freedom", n=n, k=k)

    sums, n_clusters = _cluster_sums(design * resid[:, None], clusters)
    if n_clusters < 2:
        raise DegenerateClusters("at least 2 clusters are required", clusters=n_clusters)
    bread = np.linalg.inv(design.T @ design)
    correction = n_clusters / (n_clusters - 1) * (n - 1) / (n - k)
    cov = correction * bread @ (sums.T @ sums) @ bread
    df = n_clusters - 1

    total = float(target @ target) if absorb else float(np.sum((target - target.mean()) ** 2))
    r2 = 1.0 - float(resid @ resid) / total if total > 0.0 else 0.0
    return TwfeResult(
        coefficients=_coefficients(names, beta, cov, df),
        iterations=iterations,
        max_change=max_change,
        n_obs=n,
        n_clusters=n_clusters,
        df=df,
        n_units_absorbed=n_units if absorb else 0,
        n_periods_absorbed=n_periods if absorb else 0,
        r2_within=r2,
        method="twfe" if absorb else "pooled_ols",
    )


def benchmark_twfe(ds: PanelDataset, cluster: Optional[str] = None) -> Dict[str, TwfeResult]:
    """The two fixed-effects benchmarks: Y on D alone, then Y on D and the covariates."""
    roles = ds.require_roles()
    out = {"Y~D": estimate_twfe(ds, roles.outcome, [roles.treatment], cluster)}
    if roles.covariates:
        out["Y~D+X"] = estimate_twfe(ds, roles.outcome, [roles.treatment] + list(roles.covariates), cluster)
    return out


def estimate_naive(ds: PanelDataset) -> EstimateResult:
    """Difference in mean outcome between treated and untreated rows, Welch SE."""
    roles = ds.require_roles()
    y = ds.column(roles.outcome)
    d = ds.column(roles.treatment)
    treated, control = y[d == 1.0], y[d == 0.0]
    if treated.size < 2 or control.size < 2:
        raise InsufficientData("need at least 2 treated and 2 control rows", treated=treated.size, control=control.size)
    theta = float(treated.mean() - control.mean())
    se = math.sqrt(treated.var(ddof=1) / treated.size + control.var(ddof=1) / control.size)
    summary = _inference(theta, se, None)
    return EstimateResult(
        theta=theta,
        se=se,
        statistic=summary.statistic,
        p_value=summary.p_value,
        ci_low=summary.ci_low,
        ci_high=summary.ci_high,
        n_obs=int(y.size),
        n_clusters=int(y.size),
        method="naive",
    )


def twfe_as_estimate(result: TwfeResult, regressor: str) -> EstimateResult:
    """Headline coefficient of a TWFE fit in the EstimateResult shape."""
    coef = result.coefficient(regressor)
    return EstimateResult(
        theta=coef.coef,
        se=coef.se,
        statistic=coef.statistic,
        p_value=coef.p_value,
        ci_low=coef.ci_low,
        ci_high=coef.ci_high,
        n_obs=result.n_obs,
        n_clusters=result.n_clusters,
        df=result.df,
        method=result.method,
        warnings=list(result.warnings),
    )
