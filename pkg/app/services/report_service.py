from __future__ import annotations

import hashlib
import json
import logging
import os
import tempfile
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Union

import pandas as pd
from jinja2 import Environment, FileSystemLoader, StrictUndefined

from app.core.errors import ReportIoError
from app.models.schemas import (
    CorrelationTable,
    CounterfactualResult,
    DensityGrid,
    DescribeTable,
    EventStudyResult,
    KmoResult,
    MediationResult,
    ModerationResult,
    PlaceboResult,
    SensitivityTable,
    StepStatus,
    SubgroupComparison,
    VifTable,
    sig7,
)
from app.services.diagnostics import PcaResult
from app.services.panel_service import PanelDataset

logger = logging.getLogger(__name__)

SUMMARY_FILE = "summary.md"
MANIFEST_FILE = "manifest.json"
TEMPLATE_DIR = Path(__file__).resolve().parent.parent / "templates"


def csv_bytes(frame: pd.DataFrame) -> bytes:
    return frame.to_csv(index=False, na_rep="", lineterminator="\n").encode("utf-8")


def json_bytes(document: Any) -> bytes:
    return (json.dumps(document, indent=2, ensure_ascii=False) + "\n").encode("utf-8")


def sha256_hex(payload: bytes) -> str:
    return hashlib.sha256(payload).hexdigest()


@dataclass
class ReportBundle:
    """Files produced by one run, keyed by file name, plus per-step status lines."""

    metadata: Dict[str, Any] = field(default_factory=dict)
    files: Dict[str, bytes] = field(default_factory=dict)
    steps: List[StepStatus] = field(default_factory=list)

    def add_frame(self, name: str, frame: pd.DataFrame) -> str:
        self.files[name] = csv_bytes(frame)
        return name

    def add_json(self, name: str, document: Any) -> str:
        self.files[name] = json_bytes(document)
        return name

    def add_bytes(self, name: str, payload: bytes) -> str:
        self.files[name] = payload
        return name

    def record(self, status: StepStatus) -> None:
        self.steps.append(status)

    def manifest(self) -> Dict[str, str]:
        return {name: sha256_hex(payload) for name, payload in sorted(self.files.items())}

    @property
    def is_empty(self) -> bool:
        return not self.files


# Table builders: result objects -> the declared file layouts
def describe_frame(table: DescribeTable) -> pd.DataFrame:
    return pd.DataFrame([row.model_dump() for row in table.rows], columns=["name", "n", "mean", "sd", "min", "max"])


def correlation_frame(table: CorrelationTable) -> pd.DataFrame:
    """Full matrix; each cell is ``r`` with significance stars appended, empty when undefined."""
    records = []
    for i, name in enumerate(table.variables):
        record: Dict[str, str] = {"variable": name}
        for j, other in enumerate(table.variables):
            r = table.r[i][j]
            record[other] = "" if r is None else f"{r:.7g}{table.stars(i, j)}"
        records.append(record)
    return pd.DataFrame(records, columns=["variable"] + list(table.variables))


def vif_frame(table: VifTable) -> pd.DataFrame:
    frame = pd.DataFrame([row.model_dump() for row in table.rows], columns=["name", "vif", "inverse"])
    mean = pd.DataFrame([{"name": "mean_vif", "vif": table.mean_vif, "inverse": None}])
    return pd.concat([frame, mean], ignore_index=True)


def kmo_document(result: Optional[KmoResult]) -> Dict[str, Any]:
    if result is None:
        return {"overall": None, "per_variable": {}, "note": "correlation matrix is singular"}
    return {
        "overall": sig7(result.overall),
        "per_variable": {k: sig7(v) for k, v in result.per_variable.items()},
    }


def pca_scores_frame(ds: PanelDataset, result: PcaResult) -> pd.DataFrame:
    """Retained component scores keyed by (unit, period) for the rows that entered the PCA."""
    keys = ds.frame.iloc[result.rows][[ds.unit_col, ds.time_col]].reset_index(drop=True)
    scores = pd.DataFrame({f"pc{i + 1}": result.scores[:, i] for i in range(result.retained)})
    return pd.concat([keys, scores], axis=1)


def event_study_frame(result: EventStudyResult) -> pd.DataFrame:
    return pd.DataFrame(
        [point.model_dump() for point in result.points],
        columns=["relative_time", "coef", "se", "ci_low", "ci_high"],
    )


def thetas_frame(thetas: List[float]) -> pd.DataFrame:
    return pd.DataFrame({"rep": range(1, len(thetas) + 1), "theta": thetas})


def density_frame(grid: Optional[DensityGrid]) -> pd.DataFrame:
    if grid is None:
        return pd.DataFrame(columns=["grid", "density", "normal_density"])
    return pd.DataFrame({"grid": grid.grid, "density": grid.density, "normal_density": grid.normal_density})


def placebo_document(result: PlaceboResult) -> Dict[str, Any]:
    return {
        "observed_theta": sig7(result.observed_theta),
        "p_value": sig7(result.p_value),
        "reps": result.reps,
        "seed": result.seed,
        "scheme": result.scheme,
        "failed_reps": result.failed_reps,
    }


def counterfactual_document(result: CounterfactualResult) -> Dict[str, Any]:
    return {
        "observed_theta": sig7(result.observed_theta),
        "mean": sig7(result.mean),
        "sd": sig7(result.sd),
        "observed_percentile": sig7(result.observed_percentile),
        "tail_share": sig7(result.tail_share),
        "reps": result.reps,
        "seed": result.seed,
        "failed_reps": result.failed_reps,
    }


def sensitivity_frame(table: SensitivityTable) -> pd.DataFrame:
    records = []
    for row in table.rows:
        result = row.result
        records.append(
            {
                "descriptor": row.descriptor,
                "folds": row.folds,
                "learner": row.learner,
                "sample": row.sample,
                "seed": row.seed,
                "theta": None if result is None else sig7(result.theta),
                "se": None if result is None else sig7(result.se),
                "p_value": None if result is None else sig7(result.p_value),
                "ci_low": None if result is None else sig7(result.ci_low),
                "ci_high": None if result is None else sig7(result.ci_high),
                "n_obs": None if result is None else result.n_obs,
                "error": row.error or "",
            }
        )
    columns = ["descriptor", "folds", "learner", "sample", "seed", "theta", "se", "p_value", "ci_low", "ci_high", "n_obs", "error"]
    return pd.DataFrame(records, columns=columns)


def moderation_document(result: ModerationResult) -> Dict[str, Any]:
    return {
        "main_effect": result.main_effect.to_document(),
        "interaction": result.interaction.to_document(),
        "moderator_main": None if result.moderator_main is None else result.moderator_main.to_document(),
        "regression": result.regression.to_document(),
        "warnings": list(result.warnings),
    }


def mediation_document(result: MediationResult) -> Dict[str, Any]:
    return {
        "total": result.total.to_document(),
        "path_a": result.path_a.to_document(),
        "path_b": result.path_b.to_document(),
        "direct": result.direct.to_document(),
        "indirect": {
            "estimate": sig7(result.indirect),
            "se": sig7(result.indirect_se),
            "statistic": sig7(result.indirect_statistic),
            "p_value": sig7(result.indirect_p_value),
            "ci_low": sig7(result.indirect_ci_low),
            "ci_high": sig7(result.indirect_ci_high),
            "method": result.method,
            "bootstrap_reps": result.bootstrap_reps,
        },
        "fixed_effects": result.fixed_effects,
        "n_obs": result.n_obs,
    }


def subgroup_document(result: SubgroupComparison) -> Dict[str, Any]:
    return {
        "groups": {name: estimate.to_document() for name, estimate in result.groups.items()},
        "contrasts": [
            {
                "group_a": c.group_a,
                "group_b": c.group_b,
                "difference": sig7(c.difference),
                "se": sig7(c.se),
                "statistic": sig7(c.statistic),
                "p_value": sig7(c.p_value),
            }
            for c in result.contrasts
        ],
        "assumption": result.assumption,
    }


# Emission
def _environment() -> Environment:
    return Environment(
        loader=FileSystemLoader(str(TEMPLATE_DIR)),
        undefined=StrictUndefined,
        keep_trailing_newline=True,
        trim_blocks=True,
        lstrip_blocks=True,
    )


def render_summary(bundle: ReportBundle) -> str:
    template = _environment().get_template("summary.md.j2")
    return template.render(metadata=bundle.metadata, steps=bundle.steps, files=sorted(bundle.files))


def _write_atomic(path: Path, payload: bytes) -> None:
    tmp_name: Optional[str] = None
    try:
        with tempfile.NamedTemporaryFile("wb", dir=path.parent, prefix=f".{path.name}.", delete=False) as tmp:
            tmp_name = tmp.name
            tmp.write(payload)
        os.replace(tmp_name, path)
    except OSError as err:
        if tmp_name is not None and os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise ReportIoError("cannot write report file", path=str(path)) from err


def emit_report(bundle: ReportBundle, out_dir: Union[str, Path]) -> Dict[str, str]:
    """Write every bundle file plus ``summary.md`` (and ``manifest.json`` when
    the bundle is non-empty) into ``out_dir``; returns the name -> sha256 manifest.

    The manifest file itself carries the timestamp and is not part of the
    hashed set, so identical runs produce identical hashes.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as err:
        raise ReportIoError("cannot create output directory", path=str(out)) from err

    summary = render_summary(bundle).encode("utf-8")
    payloads: Dict[str, bytes] = dict(bundle.files)
    payloads[SUMMARY_FILE] = summary
    for name, payload in payloads.items():
        _write_atomic(out / name, payload)

    hashes = {name: sha256_hex(payload) for name, payload in sorted(payloads.items())}
    if not bundle.is_empty:
        manifest = {
            "files": hashes,
            "metadata": {**bundle.metadata, "timestamp": datetime.now(timezone.utc).isoformat()},
            "steps": [step.model_dump() for step in bundle.steps],
        }
        _write_atomic(out / MANIFEST_FILE, json_bytes(manifest))
    logger.info("Report written dir=%s files=%d", out, len(payloads))
    return hashes


def verify_manifest(out_dir: Union[str, Path], hashes: Mapping[str, str]) -> List[str]:
    """Names whose on-disk content no longer matches the recorded hash."""
    out = Path(out_dir)
    mismatched = []
    for name, expected in hashes.items():
        path = out / name
        if not path.is_file() or sha256_hex(path.read_bytes()) != expected:
            mismatched.append(name)
    return mismatched
