"""Run configuration: a sectioned TOML document validated into ``RunConfig``.

Unknown keys are rejected; every validation problem surfaces as ``ConfigError``
carrying the dotted key (``roles.covariates``) and the expected form.
"""

from __future__ import annotations

import math
import tomllib
from pathlib import Path
from typing import Any, Dict, List, Literal, Mapping, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from app.core.errors import ConfigError
from app.models.schemas import (
    DgpConfig,
    FeatureSpec,
    LearnerSpec,
    PipelineConfig,
    RoleMap,
    SampleRestriction,
)


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DataSection(_Section):
    path: Optional[str] = None
    unit_col: str = "id"
    time_col: str = "year"


class RolesSection(_Section):
    outcome: str
    treatment: str
    covariates: List[str] = Field(default_factory=list)
    instrument: Optional[str] = None
    moderator: Optional[str] = None
    mediator: Optional[str] = None
    cluster: Optional[str] = None
    # time-invariant grouping column for subgroup comparison; not an estimation role
    group: Optional[str] = None

    def role_map(self) -> RoleMap:
        return RoleMap(**self.model_dump(exclude={"group"}))


class CohortsSection(_Section):
    timing_column: Optional[str] = None
    # unit -> first treated period; 0 marks a never-treated unit
    map: Optional[Dict[str, int]] = None

    @model_validator(mode="after")
    def _one_source(self) -> "CohortsSection":
        if self.timing_column is not None and self.map is not None:
            raise ValueError("give either timing_column or map, not both")
        return self

    def timing(self) -> Union[str, Dict[str, Optional[int]], None]:
        if self.map is not None:
            return {unit: (period or None) for unit, period in self.map.items()}
        return self.timing_column


class DmlSection(_Section):
    folds: int = Field(default=5, ge=2)
    learner_y: LearnerSpec = Field(default_factory=lambda: LearnerSpec(kind="forest"))
    learner_d: LearnerSpec = Field(default_factory=lambda: LearnerSpec(kind="forest"))
    learner_z: LearnerSpec = Field(default_factory=lambda: LearnerSpec(kind="forest"))
    seed: int = Field(default=42, ge=0)
    absorb: Literal["none", "unit", "period", "two_way"] = "two_way"
    # unit effects would absorb an instrument that is fixed within units
    iv_absorb: Literal["none", "unit", "period", "two_way"] = "none"
    fold_level: Literal["unit", "observation"] = "unit"

    def pipeline(self, estimator: str = "plr") -> PipelineConfig:
        return PipelineConfig(
            folds=self.folds,
            learner_y=self.learner_y,
            learner_d=self.learner_d,
            learner_z=self.learner_z,
            seed=self.seed,
            fold_level=self.fold_level,
            absorb=self.iv_absorb if estimator == "iv" else self.absorb,
            estimator=estimator,
        )


class DiagnosticsSection(_Section):
    # defaults to the covariates when empty
    pca_variables: List[str] = Field(default_factory=list)
    mineigen: float = 1.0
    append_scores: bool = False


class RobustnessSection(_Section):
    event_floor: int = Field(default=-4, lt=0)
    event_reference: int = -1
    placebo_reps: int = Field(default=500, ge=1)
    placebo_seed: int = Field(default=123, ge=0)
    placebo_scheme: Literal["unit", "observation"] = "unit"
    placebo_estimator: Literal["plr", "twfe"] = "plr"
    counterfactual_reps: int = Field(default=500, ge=1)
    counterfactual_seed: int = Field(default=123, ge=0)
    sensitivity_folds: List[int] = Field(default_factory=lambda: [5])
    sensitivity_learners: List[LearnerSpec] = Field(
        default_factory=lambda: [LearnerSpec(kind="forest"), LearnerSpec(kind="lasso_cv")]
    )
    sensitivity_samples: Dict[str, SampleRestriction] = Field(default_factory=dict)


class MechanismsSection(_Section):
    mediation_fixed_effects: bool = True
    bootstrap_reps: int = Field(default=0, ge=0)
    bootstrap_seed: int = Field(default=0, ge=0)


class OutputSection(_Section):
    directory: str = "report"


class RunConfig(_Section):
    data: DataSection = Field(default_factory=DataSection)
    roles: Optional[RolesSection] = None
    cohorts: CohortsSection = Field(default_factory=CohortsSection)
    features: List[FeatureSpec] = Field(default_factory=list)
    diagnostics: DiagnosticsSection = Field(default_factory=DiagnosticsSection)
    dml: DmlSection = Field(default_factory=DmlSection)
    robustness: RobustnessSection = Field(default_factory=RobustnessSection)
    mechanisms: MechanismsSection = Field(default_factory=MechanismsSection)
    simulate: Optional[DgpConfig] = None
    output: OutputSection = Field(default_factory=OutputSection)

    @model_validator(mode="after")
    def _data_source(self) -> "RunConfig":
        if self.data.path is None and self.simulate is None:
            raise ValueError("set data.path or provide a [simulate] section")
        return self

    def require_roles(self) -> RolesSection:
        if self.roles is not None:
            return self.roles
        if self.simulate is not None:
            # simulated panels come with their own column names
            return RolesSection(
                outcome="y",
                treatment="d",
                covariates=[f"x{j + 1}" for j in range(self.simulate.p_covariates)],
                instrument="z" if self.simulate.instrument_strength is not None else None,
                moderator="w" if self.simulate.effect_heterogeneity is not None else None,
                mediator="m" if self.simulate.mediator_effect is not None else None,
                group="group" if self.simulate.group_thetas is not None else None,
            )
        raise ConfigError("section is required", key="roles", expected="[roles] table with outcome and treatment")


def _key_path(loc: tuple) -> str:
    return ".".join(str(part) for part in loc if not str(part).startswith("function-"))


def _config_error(err: ValidationError) -> ConfigError:
    first = err.errors()[0]
    return ConfigError(
        "invalid configuration",
        key=_key_path(first["loc"]) or "<root>",
        expected=first["msg"],
    )


def parse_config(data: Mapping[str, Any]) -> RunConfig:
    try:
        return RunConfig.model_validate(data)
    except ValidationError as err:
        raise _config_error(err) from err


def parse_config_text(text: str) -> RunConfig:
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as err:
        raise ConfigError("configuration is not valid TOML", key="<document>", expected=str(err)) from err
    return parse_config(data)


def load_config(path: Union[str, Path]) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as err:
        raise ConfigError("cannot read configuration file", key="<file>", expected=str(path)) from err
    return parse_config_text(text)


# TOML writing
def _scalar(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        if math.isnan(value):
            return "nan"
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return repr(value)
    if isinstance(value, str):
        escaped = value.replace("\\", "\\\\").replace('"', '\\"').replace("\n", "\\n")
        return f'"{escaped}"'
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_scalar(item) for item in value) + "]"
    if isinstance(value, dict):
        return "{ " + ", ".join(f"{_key(k)} = {_scalar(v)}" for k, v in value.items()) + " }"
    raise TypeError(f"cannot write {type(value).__name__} to TOML")


def _key(name: Any) -> str:
    text = str(name)
    if text and all(ch.isalnum() or ch in "_-" for ch in text):
        return text
    return _scalar(text)


def _prune(value: Any) -> Any:
    # TOML has no null: absent keys mean None
    if isinstance(value, dict):
        return {k: _prune(v) for k, v in value.items() if v is not None}
    if isinstance(value, list):
        return [_prune(item) for item in value]
    return value


def dump_config(config: RunConfig) -> str:
    """Serialize back to TOML; ``parse_config_text(dump_config(c)) == c``."""
    document = _prune(config.model_dump(mode="json"))
    lines: List[str] = []
    for section, body in document.items():
        if isinstance(body, list):
            for item in body:
                lines.append(f"[[{section}]]")
                lines.extend(f"{_key(k)} = {_scalar(v)}" for k, v in item.items())
                lines.append("")
            continue
        lines.append(f"[{section}]")
        lines.extend(f"{_key(k)} = {_scalar(v)}" for k, v in body.items())
        lines.append("")
    return "\n".join(lines)
