from __future__ import annotations

import math
from typing import Any, Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, model_validator


def sig7(value: Optional[float]) -> Optional[float]:
    """Round a real to 7 significant digits for serialized documents."""
    if value is None:
        return None
    number = float(value)
    if math.isnan(number) or math.isinf(number):
        return number
    return float(f"{number:.7g}")


def fmt7(value: Optional[float]) -> str:
    if value is None:
        return "NA"
    return f"{float(value):.7g}"


# Panel roles and validation
class RoleMap(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    outcome: str
    treatment: str
    covariates: List[str] = Field(default_factory=list)
    instrument: Optional[str] = None
    moderator: Optional[str] = None
    mediator: Optional[str] = None
    # None means "cluster by unit"
    cluster: Optional[str] = None

    def assignments(self) -> List[tuple[str, str]]:
        """(role label, column) pairs in a fixed order; the cluster role is excluded."""
        pairs = [("outcome", self.outcome), ("treatment", self.treatment)]
        pairs.extend(("covariate", c) for c in self.covariates)
        for label in ("instrument", "moderator", "mediator"):
            column = getattr(self, label)
            if column is not None:
                pairs.append((label, column))
        return pairs

    def columns(self) -> List[str]:
        return [column for _, column in self.assignments()]


class ValidationReport(BaseModel):
    n_rows: int
    n_units: int
    n_periods: int
    balanced: bool
    dropped_rows: int = 0
    drop_reasons: Dict[str, int] = Field(default_factory=dict)
    zero_variance_columns: List[str] = Field(default_factory=list)
    low_variance_columns: List[str] = Field(default_factory=list)
    warnings: List[str] = Field(default_factory=list)


class FeatureSpec(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    kind: Literal["standardize", "square", "interact", "trend"]
    column: str
    other: Optional[str] = None
    origin: Optional[int] = None

    @model_validator(mode="after")
    def _check_arguments(self) -> "FeatureSpec":
        if self.kind == "interact" and not self.other:
            raise ValueError("interact requires 'other'")
        if self.kind == "trend" and self.origin is None:
            raise ValueError("trend requires 'origin'")
        return self

    @property
    def output_name(self) -> str:
        if self.kind == "standardize":
            return f"std_{self.column}"
        if self.kind == "square":
            return f"{self.column}2"
        if self.kind == "interact":
            return f"{self.column}_x_{self.other}"
        return f"{self.column}_trend"


# Learners
LearnerKind = Literal["mean", "ols", "ridge", "lasso_cv", "forest", "boosting"]


class LearnerSpec(BaseModel):
    """One nuisance learner. Parameters that do not apply to ``kind`` are ignored."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    kind: LearnerKind
    seed: int = Field(default=42, ge=0)

    # ridge
    ridge_lambda: float = Field(default=1.0, ge=0.0)

    # lasso_cv
    n_lambdas: int = Field(default=100, ge=2)
    lambda_min_ratio: float = Field(default=1e-4, gt=0.0, lt=1.0)
    cv_folds: int = Field(default=5, ge=2)
    lasso_lambda: Optional[float] = Field(default=None, ge=0.0)

    # trees; max_depth defaults to 20 for forests and 3 for boosting
    n_trees: int = Field(default=500, ge=1)
    max_depth: Optional[int] = Field(default=None, ge=0)
    mtry: Optional[int] = Field(default=None, ge=1)
    min_leaf: int = Field(default=5, ge=1)
    bootstrap: bool = True

    # boosting
    learning_rate: float = Field(default=0.01, gt=0.0)
    max_rounds: int = Field(default=1000, ge=1)
    early_stop_rounds: int = Field(default=50, ge=1)

    @model_validator(mode="before")
    @classmethod
    def _accept_bare_kind(cls, data: Any) -> Any:
        if isinstance(data, str):
            return {"kind": data}
        return data

    @property
    def depth(self) -> int:
        if self.max_depth is not None:
            return self.max_depth
        return 20 if self.kind == "forest" else 3

    def resolved_mtry(self, n_features: int) -> int:
        if self.mtry is not None:
            return min(self.mtry, n_features)
        return max(1, n_features // 3)

    @property
    def label(self) -> str:
        if self.kind == "ridge":
            return f"ridge(lambda={self.ridge_lambda:g})"
        if self.kind == "lasso_cv":
            if self.lasso_lambda is not None:
                return f"lasso(lambda={self.lasso_lambda:g})"
            return f"lasso_cv(n_lambdas={self.n_lambdas},cv_folds={self.cv_folds})"
        if self.kind == "forest":
            return f"forest(n_trees={self.n_trees},max_depth={self.depth})"
        if self.kind == "boosting":
            return f"boosting(learning_rate={self.learning_rate:g},max_depth={self.depth})"
        return self.kind


# Inference
class InferenceSummary(BaseModel):
    statistic: float
    p_value: float
    ci_low: float
    ci_high: float


class EstimateResult(BaseModel):
    theta: float
    se: float
    statistic: float
    p_value: float
    ci_low: float
    ci_high: float
    n_obs: int
    n_clusters: int
    # None is the normal-law sentinel
    df: Optional[int] = None
    method: str
    learners: Dict[str, str] = Field(default_factory=dict)
    folds: Optional[int] = None
    seed: Optional[int] = None
    diagnostics: Dict[str, float] = Field(default_factory=dict)
    warnings: List[str] = Field(default_factory=list)

    def to_document(self) -> Dict[str, Any]:
        return {
            "theta": sig7(self.theta),
            "se": sig7(self.se),
            "statistic": sig7(self.statistic),
            "p_value": sig7(self.p_value),
            "ci_low": sig7(self.ci_low),
            "ci_high": sig7(self.ci_high),
            "n_obs": self.n_obs,
            "n_clusters": self.n_clusters,
            "df": "normal" if self.df is None else self.df,
            "method": self.method,
            "learners": dict(self.learners),
            "folds": self.folds,
            "seed": self.seed,
            "diagnostics": {k: sig7(v) for k, v in sorted(self.diagnostics.items())},
            "warnings": list(self.warnings),
        }

    def inference_line(self) -> str:
        stat = "z" if self.df is None else "t"
        return (
            f"θ={fmt7(self.theta)}, SE={fmt7(self.se)}, {stat}={fmt7(self.statistic)}, "
            f"p={fmt7(self.p_value)}, 95% CI [{fmt7(self.ci_low)}, {fmt7(self.ci_high)}]"
        )


class TwfeCoefficient(BaseModel):
    name: str
    coef: float
    se: float
    statistic: float
    p_value: float
    ci_low: float
    ci_high: float

    def to_document(self) -> Dict[str, Any]:
        return {
            "name": self.name,
            "coef": sig7(self.coef),
            "se": sig7(self.se),
            "statistic": sig7(self.statistic),
            "p_value": sig7(self.p_value),
            "ci_low": sig7(self.ci_low),
            "ci_high": sig7(self.ci_high),
        }


class TwfeResult(BaseModel):
    coefficients: List[TwfeCoefficient]
    iterations: int
    max_change: float
    n_obs: int
    n_clusters: int
    df: int
    n_units_absorbed: int
    n_periods_absorbed: int
    r2_within: float
    method: str = "twfe"
    warnings: List[str] = Field(default_factory=list)

    def coefficient(self, name: str) -> TwfeCoefficient:
        for coef in self.coefficients:
            if coef.name == name:
                return coef
        raise KeyError(name)

    def to_document(self) -> Dict[str, Any]:
        return {
            "method": self.method,
            "coefficients": [c.to_document() for c in self.coefficients],
            "n_obs": self.n_obs,
            "n_clusters": self.n_clusters,
            "df": self.df,
            "iterations": self.iterations,
            "max_change": sig7(self.max_change),
            "n_units_absorbed": self.n_units_absorbed,
            "n_periods_absorbed": self.n_periods_absorbed,
            "r2_within": sig7(self.r2_within),
            "warnings": list(self.warnings),
        }


# Diagnostics
class DescribeRow(BaseModel):
    name: str
    n: int
    mean: float
    sd: float
    min: float
    max: float


class DescribeTable(BaseModel):
    rows: List[DescribeRow]

    def row(self, name: str) -> DescribeRow:
        for row in self.rows:
            if row.name == name:
                return row
        raise KeyError(name)


class CorrelationTable(BaseModel):
    variables: List[str]
    # None marks an undefined correlation (zero-variance member)
    r: List[List[Optional[float]]]
    p: List[List[Optional[float]]]
    n: List[List[int]]

    def stars(self, i: int, j: int) -> str:
        p = self.p[i][j]
        if i == j or p is None:
            return ""
        if p < 0.01:
            return "***"
        if p < 0.05:
            return "**"
        if p < 0.1:
            return "*"
        return ""


class VifRow(BaseModel):
    name: str
    vif: float
    inverse: float


class VifTable(BaseModel):
    rows: List[VifRow]
    mean_vif: float

    def row(self, name: str) -> VifRow:
        for row in self.rows:
            if row.name == name:
                return row
        raise KeyError(name)


class KmoResult(BaseModel):
    overall: Optional[float]
    per_variable: Dict[str, Optional[float]]


# Robustness
class EventStudyPoint(BaseModel):
    relative_time: int
    coef: float
    se: float
    ci_low: float
    ci_high: float


class EventStudyResult(BaseModel):
    points: List[EventStudyPoint]
    reference: int
    floor_bin: int
    n_obs: int
    n_clusters: int
    warnings: List[str] = Field(default_factory=list)

    def point(self, relative_time: int) -> EventStudyPoint:
        for point in self.points:
            if point.relative_time == relative_time:
                return point
        raise KeyError(relative_time)


class DensityGrid(BaseModel):
    grid: List[float]
    density: List[float]
    normal_density: List[float]
    bandwidth: float
    normal_mean: float
    normal_sd: float


class PlaceboResult(BaseModel):
    observed_theta: float
    thetas: List[float]
    p_value: float
    reps: int
    seed: int
    scheme: Literal["unit", "observation"]
    failed_reps: int = 0
    density: Optional[DensityGrid] = None


class CounterfactualResult(BaseModel):
    observed_theta: float
    thetas: List[float]
    mean: float
    sd: float
    observed_percentile: float
    tail_share: float
    reps: int
    seed: int
    failed_reps: int = 0
    density: Optional[DensityGrid] = None


class SampleRestriction(BaseModel):
    """Sample variant for the sensitivity scan: drop whole units and/or periods."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    exclude_units: List[Any] = Field(default_factory=list)
    exclude_periods: List[int] = Field(default_factory=list)
    period_range: Optional[Tuple[int, int]] = None


class SensitivityRow(BaseModel):
    descriptor: str
    folds: int
    learner: str
    sample: str
    seed: int
    learner_spec: LearnerSpec
    result: Optional[EstimateResult] = None
    error: Optional[str] = None


class SensitivityTable(BaseModel):
    rows: List[SensitivityRow]


# Mechanisms
class ModerationResult(BaseModel):
    main_effect: TwfeCoefficient
    interaction: TwfeCoefficient
    moderator_main: Optional[TwfeCoefficient] = None
    regression: TwfeResult
    warnings: List[str] = Field(default_factory=list)


class MediationResult(BaseModel):
    total: TwfeCoefficient
    path_a: TwfeCoefficient
    path_b: TwfeCoefficient
    direct: TwfeCoefficient
    indirect: float
    indirect_se: float
    indirect_statistic: float
    indirect_p_value: float
    indirect_ci_low: float
    indirect_ci_high: float
    method: Literal["sobel", "bootstrap"] = "sobel"
    fixed_effects: bool = True
    n_obs: int
    bootstrap_reps: int = 0


class GroupContrast(BaseModel):
    group_a: str
    group_b: str
    difference: float
    se: float
    statistic: float
    p_value: float


class SubgroupComparison(BaseModel):
    groups: Dict[str, EstimateResult]
    contrasts: List[GroupContrast]
    assumption: str = "groups are disjoint unit sets; contrasts assume independent estimates"


# Pipeline and simulation
class PipelineConfig(BaseModel):
    """One S-DIDML run: fold scheme, nuisance learners, structural absorption, estimator."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    folds: int = Field(default=5, ge=2)
    learner_y: LearnerSpec = Field(default_factory=lambda: LearnerSpec(kind="forest"))
    learner_d: LearnerSpec = Field(default_factory=lambda: LearnerSpec(kind="forest"))
    learner_z: LearnerSpec = Field(default_factory=lambda: LearnerSpec(kind="forest"))
    seed: int = Field(default=42, ge=0)
    fold_level: Literal["unit", "observation"] = "unit"
    absorb: Literal["none", "unit", "period", "two_way"] = "two_way"
    estimator: Literal["plr", "iv", "twfe"] = "plr"

    def with_learner(self, spec: LearnerSpec) -> "PipelineConfig":
        return self.model_copy(update={"learner_y": spec, "learner_d": spec, "learner_z": spec})


class MediatorEffect(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    a: float
    b: float


class DgpConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    n_units: int = Field(default=200, ge=2)
    n_periods: int = Field(default=8, ge=2)
    p_covariates: int = Field(default=20, ge=1)
    theta0: float = 1.0
    cohort_periods: List[int] = Field(default_factory=lambda: [4, 6])
    never_share: float = 0.5
    nonlinearity: Literal["linear", "nonlinear"] = "linear"
    confounded_assignment: bool = False
    effect_heterogeneity: Optional[float] = None
    endogeneity: Optional[float] = None
    instrument_strength: Optional[float] = None
    noise_sd: float = Field(default=1.0, ge=0.0)
    unit_effects: bool = True
    period_effects: bool = True
    mediator_effect: Optional[MediatorEffect] = None
    group_thetas: Optional[List[float]] = None
    seed: int = Field(default=0, ge=0)


class EstimatorSpec(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    name: str
    kind: Literal["sdidml", "iv_sdidml", "twfe", "naive"]
    pipeline: PipelineConfig = Field(default_factory=PipelineConfig)


class MonteCarloRow(BaseModel):
    estimator: str
    mean_bias: float
    rmse: float
    mean_se: float
    sd: float
    coverage: float
    reps: int
    failures: int


class MonteCarloReport(BaseModel):
    theta0: float
    rows: List[MonteCarloRow]

    def row(self, estimator: str) -> MonteCarloRow:
        for row in self.rows:
            if row.estimator == estimator:
                return row
        raise KeyError(estimator)


# Workflow / HTTP
class StepStatus(BaseModel):
    step: str
    status: Literal["ok", "skipped", "failed"]
    files: List[str] = Field(default_factory=list)
    headline: Optional[str] = None
    message: Optional[str] = None


class InferenceRequest(BaseModel):
    theta: float
    se: float = Field(gt=0.0)
    df: Optional[int] = Field(default=None, ge=1)


class RunRequest(BaseModel):
    config: Dict[str, Any]
    subcommand: str = "all"


class RunResponse(BaseModel):
    run_id: str
    subcommand: str
    completed: bool
    steps: List[StepStatus]
    manifest: Dict[str, str]
    error: Optional[str] = None
