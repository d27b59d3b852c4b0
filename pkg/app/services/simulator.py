"""Synthetic staggered-adoption panels with known ground truth, and the
Monte Carlo harness that scores estimators against them."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Dict, Hashable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from scipy.special import expit, logit

from app.core.errors import ConfigInvalid, SdidmlError, TooManyFailedReps
from app.core.seeding import derive_seed, rng_for
from app.models.schemas import (
    DgpConfig,
    EstimateResult,
    EstimatorSpec,
    MonteCarloReport,
    MonteCarloRow,
    RoleMap,
)
from app.services.estimators import estimate_naive, estimate_twfe, twfe_as_estimate
from app.services.panel_service import PanelDataset
from app.services.pipeline_service import run_pipeline

logger = logging.getLogger(__name__)

UNIT_COL = "id"
TIME_COL = "year"
AR_COEF = 0.5
OVERLAP_BOUNDS = (0.05, 0.95)
MAX_FAILED_SHARE = 0.10

# one independent stream per component, so switching a feature on leaves the other draws intact
_STREAMS = {
    "covariates": 0,
    "effects": 1,
    "assignment": 2,
    "noise": 3,
    "instrument": 4,
    "moderator": 5,
    "mediator": 6,
}


@dataclass(frozen=True, eq=False)
class SimulatedTruth:
    theta0: float
    cohorts: Dict[Hashable, Optional[int]]
    # per observation, row order of the generated panel
    g: np.ndarray
    # per unit: treatment index and the probability of ever being treated
    assignment_index: np.ndarray
    propensity: np.ndarray
    unit_thetas: np.ndarray


def validate_dgp(cfg: DgpConfig) -> None:
    if not 0.0 <= cfg.never_share < 1.0:
        raise ConfigInvalid("never_share must lie in [0, 1)", never_share=cfg.never_share)
    if not cfg.cohort_periods:
        raise ConfigInvalid("at least one cohort period is required")
    for g in cfg.cohort_periods:
        if not 1 < g <= cfg.n_periods:
            raise ConfigInvalid("cohort period outside (1, n_periods]", period=g, n_periods=cfg.n_periods)
    if cfg.endogeneity is not None and abs(cfg.endogeneity) >= 1.0:
        raise ConfigInvalid("endogeneity correlation must satisfy |rho| < 1", endogeneity=cfg.endogeneity)
    if cfg.group_thetas is not None and not cfg.group_thetas:
        raise ConfigInvalid("group_thetas must name at least one group effect")


def _stream(cfg: DgpConfig, name: str) -> np.random.Generator:
    return rng_for(cfg.seed, _STREAMS[name])


def _covariates(cfg: DgpConfig) -> np.ndarray:
    """(units, periods, p) AR(1) draws with unit-variance stationary marginals."""
    rng = _stream(cfg, "covariates")
    shocks = rng.standard_normal((cfg.n_units, cfg.n_periods, cfg.p_covariates))
    x = np.empty_like(shocks)
    x[:, 0, :] = shocks[:, 0, :]
    scale = math.sqrt(1.0 - AR_COEF**2)
    for t in range(1, cfg.n_periods):
        x[:, t, :] = AR_COEF * x[:, t - 1, :] + scale * shocks[:, t, :]
    return x


def _slice(x: np.ndarray, j: int) -> np.ndarray:
    # missing covariates (small p) contribute zero
    return x[..., j] if j < x.shape[-1] else np.zeros(x.shape[:-1])


def _nuisance(cfg: DgpConfig, x: np.ndarray) -> np.ndarray:
    g = 0.5 * x[..., : min(5, cfg.p_covariates)].sum(axis=-1)
    if cfg.nonlinearity == "nonlinear":
        g = g + _slice(x, 0) ** 2 + np.sin(_slice(x, 1)) + _slice(x, 2) * _slice(x, 3)
    return g


def _assign(cfg: DgpConfig, x: np.ndarray, shared: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Cohort per unit (0 = never treated) plus the assignment index, propensity and shock."""
    rng = _stream(cfg, "assignment")
    shock = rng.standard_normal(cfg.n_units)
    draws = rng.random(cfg.n_units)
    cohort_draws = rng.integers(0, len(cfg.cohort_periods), size=cfg.n_units)

    with np.errstate(divide="ignore"):
        index = np.full(cfg.n_units, float(logit(1.0 - cfg.never_share)))
    if cfg.confounded_assignment:
        index = index + x[:, :, : min(3, cfg.p_covariates)].mean(axis=1).sum(axis=1)
    if cfg.instrument_strength is not None or cfg.endogeneity is not None:
        index = index + shock
    if cfg.endogeneity is not None:
        index = index + shared
    propensity = expit(index)
    if cfg.confounded_assignment:
        propensity = np.clip(propensity, *OVERLAP_BOUNDS)

    treated = draws < propensity
    cohorts = np.where(treated, np.asarray(cfg.cohort_periods)[cohort_draws], 0)
    return cohorts, index, propensity, shock


def generate_panel(cfg: DgpConfig) -> Tuple[PanelDataset, SimulatedTruth]:
    """Draw one long panel (units 1..N, periods 1..T) with roles assigned.

    Y = theta_i D + heterogeneity + b m + g(X) + alpha + lambda + eps, with theta_i
    equal to ``theta0`` unless ``group_thetas`` splits units into effect groups.
    """
    validate_dgp(cfg)
    n, t = cfg.n_units, cfg.n_periods
    x = _covariates(cfg)
    g = _nuisance(cfg, x)

    effects = _stream(cfg, "effects")
    alpha = effects.standard_normal(n)
    lam = effects.standard_normal(t)
    if not cfg.unit_effects:
        alpha = np.zeros(n)
    if not cfg.period_effects:
        lam = np.zeros(t)

    noise = _stream(cfg, "noise")
    shared = noise.standard_normal(n)
    idio = noise.standard_normal((n, t))
    rho = cfg.endogeneity or 0.0
    eps = cfg.noise_sd * (rho * shared[:, None] + math.sqrt(1.0 - rho**2) * idio)

    cohorts, index, propensity, shock = _assign(cfg, x, shared)
    periods = np.arange(1, t + 1)
    d = ((cohorts[:, None] > 0) & (periods[None, :] >= cohorts[:, None])).astype(np.float64)

    if cfg.group_thetas is not None:
        group = np.arange(n) % len(cfg.group_thetas)
        unit_thetas = np.asarray(cfg.group_thetas, dtype=np.float64)[group]
    else:
        group = None
        unit_thetas = np.full(n, cfg.theta0)

    y = unit_thetas[:, None] * d + g + alpha[:, None] + lam[None, :] + eps
    extra: Dict[str, np.ndarray] = {}
    if cfg.instrument_strength is not None:
        z_noise = _stream(cfg, "instrument").standard_normal((n, t))
        extra["z"] = cfg.instrument_strength * shock[:, None] + z_noise
    if cfg.effect_heterogeneity is not None:
        w = _stream(cfg, "moderator").standard_normal((n, t))
        y = y + cfg.effect_heterogeneity * w * d
        extra["w"] = w
    if cfg.mediator_effect is not None:
        m = cfg.mediator_effect.a * d + _stream(cfg, "mediator").standard_normal((n, t))
        y = y + cfg.mediator_effect.b * m
        extra["m"] = m
    if group is not None:
        extra["group"] = np.repeat(group[:, None], t, axis=1).astype(np.float64)

    units = np.arange(1, n + 1)
    columns: Dict[str, np.ndarray] = {
        UNIT_COL: np.repeat(units, t),
        TIME_COL: np.tile(periods, n),
        "y": y.ravel(),
        "d": d.ravel(),
    }
    names = [f"x{j + 1}" for j in range(cfg.p_covariates)]
    for j, name in enumerate(names):
        columns[name] = x[:, :, j].ravel()
    first_treat = np.where(cohorts > 0, cohorts, np.nan).astype(np.float64)
    columns["first_treat"] = np.repeat(first_treat, t)
    for name, values in extra.items():
        columns[name] = values.ravel()

    roles = RoleMap(
        outcome="y",
        treatment="d",
        covariates=names,
        instrument="z" if "z" in extra else None,
        moderator="w" if "w" in extra else None,
        mediator="m" if "m" in extra else None,
    )
    ds = PanelDataset(frame=pd.DataFrame(columns), unit_col=UNIT_COL, time_col=TIME_COL, roles=roles)
    truth = SimulatedTruth(
        theta0=cfg.theta0,
        cohorts={int(u): (int(c) if c > 0 else None) for u, c in zip(units, cohorts)},
        g=g.ravel(),
        assignment_index=index,
        propensity=propensity,
        unit_thetas=unit_thetas,
    )
    logger.debug(
        "Generated panel seed=%d units=%d periods=%d treated=%d",
        cfg.seed,
        n,
        t,
        int(np.sum(cohorts > 0)),
    )
    return ds, truth


def run_estimator(ds: PanelDataset, spec: EstimatorSpec, n_jobs: int = 1) -> EstimateResult:
    if spec.kind == "naive":
        return estimate_naive(ds)
    if spec.kind == "twfe":
        roles = ds.require_roles()
        regression = estimate_twfe(ds, roles.outcome, [roles.treatment] + list(roles.covariates), roles.cluster)
        return twfe_as_estimate(regression, roles.treatment)
    estimator = "iv" if spec.kind == "iv_sdidml" else "plr"
    return run_pipeline(ds, spec.pipeline.model_copy(update={"estimator": estimator}), n_jobs)


def _replication(cfg: DgpConfig, specs: Sequence[EstimatorSpec], rep: int) -> List[Optional[EstimateResult]]:
    ds, _ = generate_panel(cfg.model_copy(update={"seed": derive_seed(cfg.seed, rep)}))
    out: List[Optional[EstimateResult]] = []
    for spec in specs:
        try:
            out.append(run_estimator(ds, spec))
        except SdidmlError as err:
            logger.warning("rep %d estimator %s failed: %s", rep, spec.name, err)
            out.append(None)
    return out


def _score(name: str, results: List[Optional[EstimateResult]], theta0: float) -> MonteCarloRow:
    reps = len(results)
    ok = [r for r in results if r is not None]
    failures = reps - len(ok)
    if failures > MAX_FAILED_SHARE * reps:
        raise TooManyFailedReps("too many failed Monte Carlo replications", estimator=name, failed=failures, reps=reps)
    thetas = np.array([r.theta for r in ok])
    errors = thetas - theta0
    covered = [r.ci_low <= theta0 <= r.ci_high for r in ok]
    return MonteCarloRow(
        estimator=name,
        mean_bias=float(errors.mean()),
        rmse=float(np.sqrt(np.mean(errors**2))),
        mean_se=float(np.mean([r.se for r in ok])),
        sd=float(thetas.std(ddof=0)),
        coverage=float(np.mean(covered)),
        reps=reps,
        failures=failures,
    )


def run_monte_carlo(
    cfg: DgpConfig, specs: Sequence[EstimatorSpec], reps: int, n_jobs: int = 1
) -> MonteCarloReport:
    """Score each estimator over ``reps`` panels; rep r is generated from seed (cfg.seed, r).

    Every estimator sees the same panel within a rep. SD uses ddof=0 so that
    RMSE^2 = bias^2 + SD^2 holds exactly.
    """
    if reps < 1:
        raise ConfigInvalid("reps must be at least 1", reps=reps)
    validate_dgp(cfg)
    outcomes = Parallel(n_jobs=n_jobs)(delayed(_replication)(cfg, specs, r) for r in range(reps))
    rows = [_score(spec.name, [rep[i] for rep in outcomes], cfg.theta0) for i, spec in enumerate(specs)]
    for row in rows:
        logger.info(
            "Monte Carlo %s: bias=%.4f rmse=%.4f coverage=%.3f failures=%d",
            row.estimator,
            row.mean_bias,
            row.rmse,
            row.coverage,
            row.failures,
        )
    return MonteCarloReport(theta0=cfg.theta0, rows=rows)
