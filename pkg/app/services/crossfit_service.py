from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Hashable, Iterable, List, Literal, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from app.core.errors import (
    CollinearAfterDemeaning,
    InsufficientData,
    InvalidArgument,
    MissingInstrument,
    NoResidualTreatmentVariation,
    SdidmlError,
    TooFewUnits,
    annotate,
)
from app.core.seeding import derive_seed, rng_for
from app.models.schemas import LearnerSpec, RoleMap
from app.services import learners
from app.services.panel_service import PanelDataset, within_transform

logger = logging.getLogger(__name__)

MIN_TREATMENT_VARIANCE = 1e-12
# within-variance share below which the instrument counts as absorbed
MIN_INSTRUMENT_SHARE = 1e-8


@dataclass(frozen=True)
class FoldAssignment:
    """Fold index 1..K per unit (or per row in observation mode)."""

    k: int
    folds: Mapping[Hashable, int]
    seed: int
    level: Literal["unit", "observation"] = "unit"

    def sizes(self) -> Dict[int, int]:
        counts = {fold: 0 for fold in range(1, self.k + 1)}
        for fold in self.folds.values():
            counts[fold] += 1
        return counts

    def row_folds(self, ds: PanelDataset) -> np.ndarray:
        if self.level == "observation":
            if len(self.folds) != ds.n_rows:
                raise InvalidArgument("observation folds do not match the dataset", rows=ds.n_rows, folds=len(self.folds))
            return np.array([self.folds[i] for i in range(ds.n_rows)], dtype=np.int64)
        try:
            return np.array([self.folds[u] for u in ds.unit_ids()], dtype=np.int64)
        except KeyError as exc:
            raise InvalidArgument("dataset has a unit without a fold", unit=exc.args[0]) from exc


def _round_robin(keys: List[Hashable], k: int, seed: int) -> Dict[Hashable, int]:
    order = rng_for(seed).permutation(len(keys))
    return {keys[idx]: position % k + 1 for position, idx in enumerate(order)}


def assign_folds(units: Iterable[Hashable], k: int, seed: int) -> FoldAssignment:
    """Seeded shuffle of the sorted unit set, then round-robin into folds 1..K."""
    keys = sorted(set(units))
    if k < 2 or k > len(keys):
        raise TooFewUnits("need 2 <= K <= number of units", k=k, units=len(keys))
    return FoldAssignment(k=k, folds=_round_robin(keys, k, seed), seed=seed)


def assign_observation_folds(n_rows: int, k: int, seed: int) -> FoldAssignment:
    if k < 2 or k > n_rows:
        raise TooFewUnits("need 2 <= K <= number of rows", k=k, rows=n_rows)
    return FoldAssignment(k=k, folds=_round_robin(list(range(n_rows)), k, seed), seed=seed, level="observation")


def fold_guidance(n_units: int, n_rows: int, k: int) -> List[str]:
    notes = []
    if k > n_units / 5:
        notes.append(f"{k} folds for {n_units} units leaves fewer than 5 units per fold")
    if n_rows < 300 and k > 3:
        notes.append(f"{k} folds on {n_rows} observations; consider K <= 3 for small samples")
    return notes


def _fit_fold(
    spec: LearnerSpec, X: np.ndarray, y: np.ndarray, row_folds: np.ndarray, k: int, names: Sequence[str], target: str
) -> Tuple[int, np.ndarray]:
    train = row_folds != k
    if train.sum() < 2:
        raise InsufficientData("fold complement has fewer than 2 rows", fold=k, target=target)
    fold_spec = spec.model_copy(update={"seed": derive_seed(spec.seed, k)})
    try:
        model = learners.fit(fold_spec, X[train], y[train], feature_names=names)
    except SdidmlError as err:
        raise annotate(err, fold=k, target=target)
    return k, learners.predict(model, X[row_folds == k])


def out_of_fold_predict(
    ds: PanelDataset,
    target: str,
    features: Sequence[str],
    spec: LearnerSpec,
    folds: FoldAssignment,
    n_jobs: int = 1,
) -> np.ndarray:
    """Cross-fitted predictions: rows of fold k come from a model trained on the other folds."""
    y = ds.column(target)
    X = ds.matrix(features)
    row_folds = folds.row_folds(ds)
    fitted = Parallel(n_jobs=n_jobs, require="sharedmem")(
        delayed(_fit_fold)(spec, X, y, row_folds, k, list(features), target) for k in range(1, folds.k + 1)
    )
    prediction = np.empty(ds.n_rows)
    for k, values in fitted:
        prediction[row_folds == k] = values
    return prediction


@dataclass(frozen=True, eq=False)
class ResidualizedPanel:
    y_res: np.ndarray
    d_res: np.ndarray
    z_res: Optional[np.ndarray] = None
    fold: Optional[np.ndarray] = None
    # row indices into ``source.frame``
    rows: Optional[np.ndarray] = None
    source: Optional[PanelDataset] = None
    cluster_ids: Optional[np.ndarray] = None
    learners: Mapping[str, str] = field(default_factory=dict)
    k: Optional[int] = None
    seed: Optional[int] = None
    absorb: str = "none"
    diagnostics: Mapping[str, float] = field(default_factory=dict)
    warnings: Tuple[str, ...] = ()

    @property
    def n_obs(self) -> int:
        return int(self.y_res.size)

    def clusters(self, cluster: Optional[str] = None) -> np.ndarray:
        if cluster is not None and self.source is not None:
            return self.source.cluster_values(cluster)[self.rows]
        if self.cluster_ids is not None:
            return self.cluster_ids
        return np.arange(self.n_obs)

    @classmethod
    def from_arrays(
        cls,
        y_res: Sequence[float],
        d_res: Sequence[float],
        z_res: Optional[Sequence[float]] = None,
        clusters: Optional[Sequence[Hashable]] = None,
    ) -> "ResidualizedPanel":
        y = np.asarray(y_res, dtype=np.float64)
        d = np.asarray(d_res, dtype=np.float64)
        if y.shape != d.shape:
            raise InvalidArgument("residual vectors differ in length", y=y.size, d=d.size)
        z = None if z_res is None else np.asarray(z_res, dtype=np.float64)
        ids = np.arange(y.size) if clusters is None else np.asarray(clusters)
        return cls(y_res=y, d_res=d, z_res=z, cluster_ids=ids)

    def to_frame(self) -> pd.DataFrame:
        if self.source is None:
            raise InvalidArgument("residual panel has no source dataset to export")
        frame = self.source.frame.iloc[self.rows]
        out = pd.DataFrame(
            {
                "unit": frame[self.source.unit_col].to_numpy(),
                "period": frame[self.source.time_col].to_numpy(),
                "fold": self.fold,
                "y_res": self.y_res,
                "d_res": self.d_res,
            }
        )
        if self.z_res is not None:
            out["z_res"] = self.z_res
        return out


def write_residuals_csv(res: ResidualizedPanel, path: Union[str, Path]) -> Path:
    path = Path(path)
    res.to_frame().to_csv(path, index=False, lineterminator="\n")
    return path


def _variance_ratio(residual: np.ndarray, target: np.ndarray) -> Optional[float]:
    spread = float(np.var(target))
    if spread <= 0.0:
        return None
    return float(np.var(residual)) / spread


def _check_instrument_survives(raw: np.ndarray, within: np.ndarray, absorb: str) -> None:
    spread = float(np.var(raw))
    if spread > 0.0 and float(np.var(within)) <= MIN_INSTRUMENT_SHARE * spread:
        raise CollinearAfterDemeaning(
            "instrument is absorbed by the fixed effects; use absorb=\"none\" or \"period\"", absorb=absorb
        )


def residualize(
    ds: PanelDataset,
    roles: Optional[RoleMap],
    y_spec: LearnerSpec,
    d_spec: LearnerSpec,
    z_spec: Optional[LearnerSpec],
    folds: FoldAssignment,
    absorb: str = "none",
    n_jobs: int = 1,
) -> ResidualizedPanel:
    """Out-of-fold residuals of Y, D (and Z when ``z_spec`` is given) on the covariates.

    With ``absorb`` other than "none" the outcome, treatment, instrument and
    covariates are first within-transformed for the requested fixed effects.
    """
    roles = roles or ds.require_roles()
    if not roles.covariates:
        raise InvalidArgument("nuisance fitting needs at least one covariate", role="covariates")
    if z_spec is not None and roles.instrument is None:
        raise MissingInstrument("an instrument learner was given but no instrument role is set")

    targets = [roles.outcome, roles.treatment] + ([roles.instrument] if z_spec is not None else [])
    source = ds.with_roles(roles)
    work = source
    if absorb != "none":
        work = within_transform(work, list(dict.fromkeys(targets + list(roles.covariates))), absorb)
        if z_spec is not None:
            _check_instrument_survives(source.column(roles.instrument), work.column(roles.instrument), absorb)

    y = work.column(roles.outcome)
    d = work.column(roles.treatment)
    y_res = y - out_of_fold_predict(work, roles.outcome, roles.covariates, y_spec, folds, n_jobs)
    d_res = d - out_of_fold_predict(work, roles.treatment, roles.covariates, d_spec, folds, n_jobs)
    if np.var(d_res, ddof=1) < MIN_TREATMENT_VARIANCE:
        raise NoResidualTreatmentVariation(
            "treatment is perfectly predicted by the covariates", variance=float(np.var(d_res, ddof=1))
        )

    diagnostics: Dict[str, float] = {"mean_y_res": float(y_res.mean()), "mean_d_res": float(d_res.mean())}
    learner_tags = {"y": y_spec.label, "d": d_spec.label}
    pairs = [("y", y_res, y), ("d", d_res, d)]
    z_res = None
    if z_spec is not None:
        z = work.column(roles.instrument)
        z_res = z - out_of_fold_predict(work, roles.instrument, roles.covariates, z_spec, folds, n_jobs)
        diagnostics["mean_z_res"] = float(z_res.mean())
        learner_tags["z"] = z_spec.label
        pairs.append(("z", z_res, z))
    for name, residual, target in pairs:
        ratio = _variance_ratio(residual, target)
        if ratio is not None:
            diagnostics[f"var_ratio_{name}"] = ratio

    warnings = fold_guidance(len(ds.units()), ds.n_rows, folds.k)
    for message in warnings:
        logger.warning(message)

    return ResidualizedPanel(
        y_res=y_res,
        d_res=d_res,
        z_res=z_res,
        fold=folds.row_folds(ds),
        rows=np.arange(ds.n_rows),
        source=source,
        cluster_ids=source.cluster_values(),
        learners=learner_tags,
        k=folds.k,
        seed=folds.seed,
        absorb=absorb,
        diagnostics=diagnostics,
        warnings=tuple(warnings),
    )
