from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Optional, Tuple

from app import __version__
from app.core.errors import ConfigError, SdidmlError, StepFailure, annotate
from app.models.run_config import RolesSection, RunConfig, dump_config
from app.models.schemas import EstimateResult, PipelineConfig, StepStatus, ValidationReport
from app.services import diagnostics, estimators, mechanisms, robustness
from app.services.crossfit_service import ResidualizedPanel
from app.services.panel_service import (
    CohortMap,
    PanelDataset,
    assign_roles,
    derive_cohorts,
    derive_features,
    load_panel_csv,
    panel_to_csv_text,
)
from app.services.pipeline_service import estimate_residualized, residualize_for
from app.services.report_service import (
    ReportBundle,
    correlation_frame,
    counterfactual_document,
    density_frame,
    describe_frame,
    event_study_frame,
    kmo_document,
    mediation_document,
    moderation_document,
    pca_scores_frame,
    placebo_document,
    sensitivity_frame,
    subgroup_document,
    thetas_frame,
    vif_frame,
)
from app.services.simulator import generate_panel

logger = logging.getLogger(__name__)

# fixed order of the complete analysis; single subcommands run validate first
ALL_STEPS: Tuple[str, ...] = (
    "validate",
    "describe",
    "corr",
    "vif",
    "pca",
    "twfe",
    "dml",
    "iv-dml",
    "event-study",
    "placebo",
    "counterfactual",
    "sensitivity",
    "moderate",
    "mediate",
    "subgroup",
)
SUBCOMMANDS: Tuple[str, ...] = ALL_STEPS + ("simulate", "all")

# steps that `all` skips when their optional role is not configured
_OPTIONAL_ROLES = {
    "iv-dml": "instrument",
    "moderate": "moderator",
    "mediate": "mediator",
    "subgroup": "group",
}


class WorkflowStep:
    def __init__(self, step_name: str, data: StepStatus) -> None:
        self.step_name = step_name
        self.data = data


@dataclass
class WorkflowOutcome:
    bundle: ReportBundle
    failure: Optional[StepFailure] = None

    @property
    def completed(self) -> bool:
        return self.failure is None


@dataclass
class _RunState:
    ds: Optional[PanelDataset] = None
    cohorts: Optional[CohortMap] = None
    report: Optional[ValidationReport] = None
    residuals: Optional[ResidualizedPanel] = None
    estimates: Dict[str, EstimateResult] = field(default_factory=dict)


class AnalysisWorkflowService:
    """Runs one subcommand (or the whole analysis) for a RunConfig into a ReportBundle."""

    def __init__(self, config: RunConfig, n_jobs: int = 1) -> None:
        self._config = config
        self._roles: RolesSection = config.require_roles()
        self._n_jobs = n_jobs
        self._state = _RunState()
        self._bundle = ReportBundle(
            metadata={
                "version": __version__,
                "config_sha256": hashlib.sha256(dump_config(config).encode("utf-8")).hexdigest(),
            }
        )
        self._handlers: Dict[str, Callable[[], StepStatus]] = {
            "validate": self._validate,
            "describe": self._describe,
            "corr": self._corr,
            "vif": self._vif,
            "pca": self._pca,
            "twfe": self._twfe,
            "dml": self._dml,
            "iv-dml": self._iv_dml,
            "event-study": self._event_study,
            "placebo": self._placebo,
            "counterfactual": self._counterfactual,
            "sensitivity": self._sensitivity,
            "moderate": self._moderate,
            "mediate": self._mediate,
            "subgroup": self._subgroup,
            "simulate": self._simulate,
        }

    @property
    def bundle(self) -> ReportBundle:
        return self._bundle

    def plan(self, subcommand: str) -> List[str]:
        """Steps to run for ``subcommand``; raises ConfigError when a required role is missing."""
        if subcommand not in SUBCOMMANDS:
            raise ConfigError("unknown subcommand", key="subcommand", expected=" | ".join(SUBCOMMANDS))
        if subcommand == "simulate":
            if self._config.simulate is None:
                raise ConfigError("simulate needs a [simulate] section", key="simulate", expected="[simulate] table")
            return ["simulate"]
        if subcommand == "all":
            steps = [s for s in ALL_STEPS if s not in _OPTIONAL_ROLES or getattr(self._roles, _OPTIONAL_ROLES[s])]
            if len(self._pca_variables()) < 2:
                steps.remove("pca")
        else:
            steps = ["validate"] if subcommand == "validate" else ["validate", subcommand]
        for step in steps:
            self._check_preconditions(step)
        return steps

    def _pca_variables(self) -> List[str]:
        return list(self._config.diagnostics.pca_variables) or list(self._roles.covariates)

    def _check_preconditions(self, step: str) -> None:
        needs_covariates = {"vif", "dml", "iv-dml", "placebo", "counterfactual", "sensitivity", "subgroup"}
        if step in needs_covariates and not self._roles.covariates:
            raise ConfigError(f"{step} needs covariates", key="roles.covariates", expected="non-empty list of columns")
        if step in _OPTIONAL_ROLES and not getattr(self._roles, _OPTIONAL_ROLES[step]):
            role = _OPTIONAL_ROLES[step]
            raise ConfigError(f"{step} needs the {role} role", key=f"roles.{role}", expected="column name")
        if step == "pca" and len(self._pca_variables()) < 2:
            raise ConfigError(
                "pca needs at least 2 variables", key="diagnostics.pca_variables", expected="2 or more columns"
            )

    def execute(self, subcommand: str) -> Iterator[WorkflowStep]:
        """Yield one WorkflowStep per executed step; a hard error yields an "error" step and stops."""
        for step in self.plan(subcommand):
            logger.info("Workflow step %s", step)
            try:
                status = self._handlers[step]()
            except SdidmlError as err:
                annotate(err, step=step)
                logger.error("Workflow step %s failed: %s", step, err)
                status = StepStatus(step=step, status="failed", message=str(err))
                self._bundle.record(status)
                yield WorkflowStep("error", status)
                return
            self._bundle.record(status)
            yield WorkflowStep(step, status)
        logger.info("Workflow %s completed", subcommand)

    def run(self, subcommand: str) -> WorkflowOutcome:
        self._bundle.metadata["subcommand"] = subcommand
        failure: Optional[StepFailure] = None
        for step in self.execute(subcommand):
            if step.step_name == "error":
                failure = StepFailure("step failed", step=step.data.step, error=step.data.message)
        return WorkflowOutcome(bundle=self._bundle, failure=failure)

    # data
    def _load(self) -> PanelDataset:
        data = self._config.data
        if data.path is not None:
            return load_panel_csv(data.path, data.unit_col, data.time_col)
        ds, _ = generate_panel(self._config.simulate)
        self._bundle.add_bytes("panel.csv", panel_to_csv_text(ds).encode("utf-8"))
        return ds.with_roles(None)

    def _require_data(self) -> PanelDataset:
        if self._state.ds is None:
            self._validate()
        return self._state.ds

    def _pipeline(self, estimator: str = "plr") -> PipelineConfig:
        return self._config.dml.pipeline(estimator)

    def _record_estimate(self, key: str, result: EstimateResult) -> str:
        self._state.estimates[key] = result
        dml = self._config.dml
        document = {
            "metadata": {
                "folds": dml.folds,
                "seed": dml.seed,
                "fold_level": dml.fold_level,
                "absorb": dml.absorb,
                "iv_absorb": dml.iv_absorb,
                "learner_y": dml.learner_y.label,
                "learner_d": dml.learner_d.label,
            },
            "estimates": {name: est.to_document() for name, est in self._state.estimates.items()},
        }
        return self._bundle.add_json("estimates.json", document)

    # steps
    def _validate(self) -> StepStatus:
        ds = self._load()
        if self._config.features:
            ds = derive_features(ds, self._config.features)
        ds, report = assign_roles(ds, self._roles.role_map())
        timing = self._config.cohorts.timing()
        if timing is not None:
            ds, cohorts = derive_cohorts(ds, timing)
            report = report.model_copy(update={"warnings": report.warnings + list(cohorts.warnings)})
        else:
            cohorts = CohortMap.from_treatment(ds, self._roles.treatment)
        self._state.ds, self._state.cohorts, self._state.report = ds, cohorts, report
        name = self._bundle.add_json("validation.json", report.model_dump())
        files = [name] + (["panel.csv"] if "panel.csv" in self._bundle.files else [])
        return StepStatus(
            step="validate",
            status="ok",
            files=files,
            headline=(
                f"rows={report.n_rows}, units={report.n_units}, periods={report.n_periods}, "
                f"balanced={report.balanced}, dropped={report.dropped_rows}"
            ),
            message="; ".join(report.warnings) or None,
        )

    def _analysis_variables(self) -> List[str]:
        roles = self._roles
        names = [roles.outcome, roles.treatment] + list(roles.covariates)
        names += [c for c in (roles.instrument, roles.moderator, roles.mediator) if c]
        return list(dict.fromkeys(names))

    def _describe(self) -> StepStatus:
        table = diagnostics.describe(self._require_data(), self._analysis_variables())
        name = self._bundle.add_frame("describe.csv", describe_frame(table))
        return StepStatus(step="describe", status="ok", files=[name], headline=f"{len(table.rows)} variables")

    def _corr(self) -> StepStatus:
        table = diagnostics.correlation_matrix(self._require_data(), self._analysis_variables())
        name = self._bundle.add_frame("corr.csv", correlation_frame(table))
        return StepStatus(step="corr", status="ok", files=[name])

    def _vif(self) -> StepStatus:
        table = diagnostics.vif(self._require_data(), [self._roles.treatment] + list(self._roles.covariates))
        name = self._bundle.add_frame("vif.csv", vif_frame(table))
        top = table.rows[0]
        return StepStatus(
            step="vif", status="ok", files=[name], headline=f"mean VIF={table.mean_vif:.7g}, max {top.name}={top.vif:.7g}"
        )

    def _pca(self) -> StepStatus:
        ds = self._require_data()
        settings = self._config.diagnostics
        result = diagnostics.pca(ds, self._pca_variables(), settings.mineigen)
        files = [
            self._bundle.add_frame("pca_loadings.csv", result.loadings_frame()),
            self._bundle.add_frame("pca_eigenvalues.csv", result.eigen_table()),
            self._bundle.add_json("kmo.json", kmo_document(result.kmo)),
        ]
        files.append(self._bundle.add_frame("pca_scores.csv", pca_scores_frame(ds, result)))
        if settings.append_scores and result.retained:
            self._state.ds = diagnostics.append_pca_scores(ds, result)
        overall = result.kmo.overall if result.kmo is not None else None
        return StepStatus(
            step="pca",
            status="ok",
            files=files,
            headline=(
                f"retained={result.retained}, cumulative={result.cumulative[max(result.retained - 1, 0)]:.7g}, "
                f"KMO={'NA' if overall is None else f'{overall:.7g}'}"
            ),
        )

    def _twfe(self) -> StepStatus:
        models = estimators.benchmark_twfe(self._require_data(), self._roles.cluster)
        name = self._bundle.add_json("twfe.json", {label: result.to_document() for label, result in models.items()})
        lines = []
        for label, result in models.items():
            lines.append(f"{label}: {estimators.twfe_as_estimate(result, self._roles.treatment).inference_line()}")
        return StepStatus(step="twfe", status="ok", files=[name], headline="\n\n".join(lines))

    def _dml(self) -> StepStatus:
        pipeline = self._pipeline("plr")
        res = residualize_for(self._require_data(), pipeline, self._n_jobs)
        result = estimate_residualized(res, pipeline)
        self._state.residuals = res
        files = [self._record_estimate("dml", result), self._bundle.add_frame("residuals.csv", res.to_frame())]
        return StepStatus(
            step="dml",
            status="ok",
            files=files,
            headline=result.inference_line(),
            message="; ".join(result.warnings) or None,
        )

    def _iv_dml(self) -> StepStatus:
        pipeline = self._pipeline("iv")
        result = estimate_residualized(residualize_for(self._require_data(), pipeline, self._n_jobs), pipeline)
        name = self._record_estimate("iv_dml", result)
        return StepStatus(
            step="iv-dml", status="ok", files=[name], headline=result.inference_line(), message="; ".join(result.warnings) or None
        )

    def _event_study(self) -> StepStatus:
        ds = self._require_data()
        settings = self._config.robustness
        result = robustness.event_study(
            ds,
            self._state.cohorts,
            floor_bin=settings.event_floor,
            reference=settings.event_reference,
            cluster=self._roles.cluster,
        )
        name = self._bundle.add_frame("event_study.csv", event_study_frame(result))
        pre = [p for p in result.points if p.relative_time < settings.event_reference]
        outside = sum(abs(p.coef) >= 2 * p.se for p in pre)
        return StepStatus(
            step="event-study",
            status="ok",
            files=[name],
            headline=f"{len(result.points)} coefficients; {outside} of {len(pre)} pre-period coefficients exceed 2 SE",
        )

    def _observed(self, estimator: str) -> Optional[float]:
        if estimator == "plr" and "dml" in self._state.estimates:
            return self._state.estimates["dml"].theta
        return None

    def _placebo(self) -> StepStatus:
        settings = self._config.robustness
        pipeline = self._pipeline(settings.placebo_estimator)
        result = robustness.placebo_permutation(
            self._require_data(),
            pipeline,
            reps=settings.placebo_reps,
            seed=settings.placebo_seed,
            cohorts=self._state.cohorts,
            scheme=settings.placebo_scheme,
            n_jobs=self._n_jobs,
            observed_theta=self._observed(settings.placebo_estimator),
        )
        files = [
            self._bundle.add_frame("placebo.csv", thetas_frame(result.thetas)),
            self._bundle.add_frame("placebo_density.csv", density_frame(result.density)),
            self._bundle.add_json("placebo.json", placebo_document(result)),
        ]
        return StepStatus(
            step="placebo",
            status="ok",
            files=files,
            headline=f"observed θ={result.observed_theta:.7g}, permutation p={result.p_value:.7g} ({result.reps} reps)",
            message=f"{result.failed_reps} replications failed" if result.failed_reps else None,
        )

    def _counterfactual(self) -> StepStatus:
        settings = self._config.robustness
        result = robustness.counterfactual_timing(
            self._require_data(),
            self._pipeline("plr"),
            reps=settings.counterfactual_reps,
            seed=settings.counterfactual_seed,
            cohorts=self._state.cohorts,
            n_jobs=self._n_jobs,
            observed_theta=self._observed("plr"),
        )
        files = [
            self._bundle.add_frame("counterfactual.csv", thetas_frame(result.thetas)),
            self._bundle.add_frame("counterfactual_density.csv", density_frame(result.density)),
            self._bundle.add_json("counterfactual.json", counterfactual_document(result)),
        ]
        return StepStatus(
            step="counterfactual",
            status="ok",
            files=files,
            headline=(
                f"observed θ={result.observed_theta:.7g}, placebo mean={result.mean:.7g}, "
                f"sd={result.sd:.7g}, two-sided tail share={result.tail_share:.7g}"
            ),
        )

    def _sensitivity(self) -> StepStatus:
        settings = self._config.robustness
        table = robustness.sensitivity_scan(
            self._require_data(),
            self._pipeline("plr"),
            fold_variants=settings.sensitivity_folds,
            learner_variants=settings.sensitivity_learners,
            sample_variants=dict(settings.sensitivity_samples) or None,
            n_jobs=self._n_jobs,
        )
        name = self._bundle.add_frame("sensitivity.csv", sensitivity_frame(table))
        lines = [f"{row.descriptor}: {row.result.inference_line()}" for row in table.rows if row.result is not None]
        failed = [row.descriptor for row in table.rows if row.error]
        return StepStatus(
            step="sensitivity",
            status="ok",
            files=[name],
            headline="\n\n".join(lines) or None,
            message=f"failed variants: {', '.join(failed)}" if failed else None,
        )

    def _moderate(self) -> StepStatus:
        result = mechanisms.moderation(self._require_data(), cluster=self._roles.cluster)
        name = self._bundle.add_json("moderation.json", moderation_document(result))
        c = result.interaction
        return StepStatus(
            step="moderate",
            status="ok",
            files=[name],
            headline=f"interaction {c.name}: coef={c.coef:.7g}, SE={c.se:.7g}, p={c.p_value:.7g}",
            message="; ".join(result.warnings) or None,
        )

    def _mediate(self) -> StepStatus:
        settings = self._config.mechanisms
        result = mechanisms.mediation(
            self._require_data(),
            cluster=self._roles.cluster,
            fixed_effects=settings.mediation_fixed_effects,
            bootstrap_reps=settings.bootstrap_reps,
            seed=settings.bootstrap_seed,
        )
        name = self._bundle.add_json("mediation.json", mediation_document(result))
        return StepStatus(
            step="mediate",
            status="ok",
            files=[name],
            headline=(
                f"indirect a·b={result.indirect:.7g}, SE={result.indirect_se:.7g}, "
                f"p={result.indirect_p_value:.7g} ({result.method})"
            ),
        )

    def _subgroup(self) -> StepStatus:
        result = mechanisms.subgroup_compare(
            self._require_data(), self._roles.group, self._pipeline("plr"), self._n_jobs
        )
        name = self._bundle.add_json("subgroups.json", subgroup_document(result))
        lines = [f"group {label}: {est.inference_line()}" for label, est in result.groups.items()]
        return StepStatus(step="subgroup", status="ok", files=[name], headline="\n\n".join(lines))

    def _simulate(self) -> StepStatus:
        cfg = self._config.simulate
        ds, truth = generate_panel(cfg)
        files = [
            self._bundle.add_bytes("panel.csv", panel_to_csv_text(ds).encode("utf-8")),
            self._bundle.add_json(
                "truth.json",
                {
                    "theta0": truth.theta0,
                    "treated_units": sum(g is not None for g in truth.cohorts.values()),
                    "cohorts": {str(u): g for u, g in truth.cohorts.items()},
                    "config": cfg.model_dump(mode="json"),
                },
            ),
        ]
        return StepStatus(
            step="simulate",
            status="ok",
            files=files,
            headline=f"{cfg.n_units} units x {cfg.n_periods} periods, theta0={cfg.theta0:g}, seed={cfg.seed}",
        )


def run_analysis(config: RunConfig, subcommand: str, n_jobs: int = 1) -> WorkflowOutcome:
    return AnalysisWorkflowService(config, n_jobs).run(subcommand)

