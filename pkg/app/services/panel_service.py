from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, Hashable, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from app.core.errors import (
    DuplicateKey,
    EmptyData,
    EmptySubgroup,
    InconsistentGroup,
    InsufficientData,
    InvalidArgument,
    MissingColumn,
    NameCollision,
    NonBinaryTreatment,
    NonConvergence,
    ParseError,
    RoleOverlap,
    TimingOutOfRange,
    TreatmentReversal,
    UnknownUnit,
    ZeroVariance,
)
from app.models.schemas import FeatureSpec, RoleMap, ValidationReport

logger = logging.getLogger(__name__)


# Cohort entry for units that are never treated. Distinct from every real period.
NEVER: Optional[int] = None

LOW_VARIANCE_THRESHOLD = 1e-5


@dataclass(frozen=True, eq=False)
class PanelDataset:
    """Long-format unit x period panel.

    ``frame`` holds the unit and period columns plus named real-valued columns,
    sorted by (unit, period) with a 0..n-1 index. Instances are treated as values:
    every transform returns a new dataset and never mutates ``frame``.
    """

    frame: pd.DataFrame
    unit_col: str
    time_col: str
    roles: Optional[RoleMap] = None

    @property
    def n_rows(self) -> int:
        return int(len(self.frame))

    @property
    def column_names(self) -> List[str]:
        return [c for c in self.frame.columns if c not in (self.unit_col, self.time_col)]

    def has_column(self, name: str) -> bool:
        return name in self.frame.columns

    def units(self) -> np.ndarray:
        return np.asarray(sorted(pd.unique(self.frame[self.unit_col])), dtype=object)

    def periods(self) -> np.ndarray:
        return np.sort(pd.unique(self.frame[self.time_col])).astype(np.int64)

    def unit_ids(self) -> np.ndarray:
        return self.frame[self.unit_col].to_numpy()

    def period_values(self) -> np.ndarray:
        return self.frame[self.time_col].to_numpy(dtype=np.int64)

    def unit_codes(self) -> np.ndarray:
        return pd.factorize(self.frame[self.unit_col], sort=True)[0]

    def period_codes(self) -> np.ndarray:
        return pd.factorize(self.frame[self.time_col], sort=True)[0]

    def column(self, name: str) -> np.ndarray:
        if name not in self.frame.columns:
            raise MissingColumn("column not found", column=name)
        return self.frame[name].to_numpy(dtype=np.float64)

    def matrix(self, names: Sequence[str]) -> np.ndarray:
        if not names:
            return np.empty((self.n_rows, 0))
        return np.column_stack([self.column(n) for n in names])

    def cluster_values(self, cluster: Optional[str] = None) -> np.ndarray:
        name = cluster
        if name is None and self.roles is not None:
            name = self.roles.cluster
        if name is None or name == self.unit_col:
            return self.unit_ids()
        if name not in self.frame.columns:
            raise MissingColumn("cluster column not found", column=name)
        return self.frame[name].to_numpy()

    def require_roles(self) -> RoleMap:
        if self.roles is None:
            raise InvalidArgument("roles are not assigned; call assign_roles first")
        return self.roles

    def with_frame(self, frame: pd.DataFrame) -> "PanelDataset":
        return replace(self, frame=frame.reset_index(drop=True))

    def with_columns(self, columns: Mapping[str, Any]) -> "PanelDataset":
        frame = self.frame.copy()
        for name, values in columns.items():
            frame[name] = np.asarray(values)
        return replace(self, frame=frame)

    def with_roles(self, roles: Optional[RoleMap]) -> "PanelDataset":
        return replace(self, roles=roles)


@dataclass(frozen=True)
class CohortMap:
    """First treatment period per unit; ``NEVER`` for never-treated units."""

    entries: Mapping[Hashable, Optional[int]]
    warnings: Tuple[str, ...] = field(default=(), compare=False)

    def cohort(self, unit: Hashable) -> Optional[int]:
        if unit not in self.entries:
            raise UnknownUnit("unit has no cohort entry", unit=unit)
        return self.entries[unit]

    def treated_units(self) -> List[Hashable]:
        return [u for u, g in self.entries.items() if g is not NEVER]

    def never_treated_units(self) -> List[Hashable]:
        return [u for u, g in self.entries.items() if g is NEVER]

    def cohort_array(self, units: np.ndarray) -> np.ndarray:
        """Per-row first treatment period as floats, NaN for never treated."""
        lookup = {u: (np.nan if g is NEVER else float(g)) for u, g in self.entries.items()}
        return np.array([lookup[u] for u in units], dtype=np.float64)

    def indicator(self, units: np.ndarray, periods: np.ndarray) -> np.ndarray:
        cohorts = self.cohort_array(units)
        with np.errstate(invalid="ignore"):
            return np.where(np.isnan(cohorts), 0.0, (periods >= cohorts).astype(np.float64))

    @classmethod
    def from_treatment(cls, ds: PanelDataset, column: str) -> "CohortMap":
        treated = ds.frame.loc[ds.column(column) == 1.0]
        first = treated.groupby(ds.unit_col, sort=True)[ds.time_col].min()
        entries: Dict[Hashable, Optional[int]] = {u: NEVER for u in ds.units()}
        for unit, period in first.items():
            entries[unit] = int(period)
        return cls(entries=entries)


# Loading and writing
def _line(index: int) -> int:
    # header is line 1
    return int(index) + 2


def _parse_units(raw: pd.Series, unit_col: str) -> pd.Series:
    text = raw.str.strip()
    empty = text == ""
    if empty.any():
        idx = int(np.flatnonzero(empty.to_numpy())[0])
        raise ParseError("empty unit identifier", row=_line(idx), column=unit_col)
    numeric = pd.to_numeric(text, errors="coerce")
    if numeric.notna().all() and np.all(np.mod(numeric.to_numpy(), 1.0) == 0.0):
        return numeric.astype(np.int64)
    return text


def _parse_periods(raw: pd.Series, time_col: str) -> pd.Series:
    text = raw.str.strip()
    numeric = pd.to_numeric(text, errors="coerce")
    bad = numeric.isna() | (np.mod(numeric.fillna(0.5).to_numpy(), 1.0) != 0.0)
    if bad.any():
        idx = int(np.flatnonzero(bad.to_numpy())[0])
        raise ParseError(
            "period is not an integer", row=_line(idx), column=time_col, value=raw.iloc[idx]
        )
    return numeric.astype(np.int64)


def _parse_reals(raw: pd.Series, column: str) -> pd.Series:
    text = raw.str.strip()
    numeric = pd.to_numeric(text.replace("", np.nan), errors="coerce")
    bad = numeric.isna() & (text != "")
    if bad.any():
        idx = int(np.flatnonzero(bad.to_numpy())[0])
        raise ParseError("cell is not a real number", row=_line(idx), column=column, value=raw.iloc[idx])
    return numeric.astype(np.float64)


def load_panel_csv(path: Union[str, Path], unit_col: str, time_col: str) -> PanelDataset:
    path = Path(path)
    if not path.is_file():
        raise InvalidArgument("panel file does not exist", path=str(path))
    try:
        raw = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except pd.errors.EmptyDataError as exc:
        raise EmptyData("panel file has no header or rows", path=str(path)) from exc

    for name in (unit_col, time_col):
        if name not in raw.columns:
            raise MissingColumn("column not found in header", column=name, path=str(path))
    if len(raw) == 0:
        raise EmptyData("panel file has no data rows", path=str(path))

    frame = pd.DataFrame(index=raw.index)
    frame[unit_col] = _parse_units(raw[unit_col], unit_col)
    frame[time_col] = _parse_periods(raw[time_col], time_col)
    for column in raw.columns:
        if column in (unit_col, time_col):
            continue
        frame[column] = _parse_reals(raw[column], column)

    dup = frame.duplicated([unit_col, time_col])
    if dup.any():
        idx = int(np.flatnonzero(dup.to_numpy())[0])
        raise DuplicateKey(
            "(unit, period) repeated",
            unit=frame[unit_col].iloc[idx],
            period=int(frame[time_col].iloc[idx]),
            row=_line(idx),
        )

    frame = frame.sort_values([unit_col, time_col], kind="mergesort").reset_index(drop=True)
    ds = PanelDataset(frame=frame, unit_col=unit_col, time_col=time_col)
    logger.info(
        "Loaded panel path=%s rows=%d units=%d periods=%d",
        path,
        ds.n_rows,
        len(ds.units()),
        len(ds.periods()),
    )
    return ds


def write_panel_csv(ds: PanelDataset, path: Union[str, Path]) -> Path:
    path = Path(path)
    ds.frame.to_csv(path, index=False, na_rep="", lineterminator="\n", encoding="utf-8")
    return path


def panel_to_csv_text(ds: PanelDataset) -> str:
    return ds.frame.to_csv(index=False, na_rep="", lineterminator="\n")


# Roles
def _check_overlap(ds: PanelDataset, roles: RoleMap) -> None:
    seen: Dict[str, str] = {}
    pairs = roles.assignments()
    if roles.cluster is not None and roles.cluster != ds.unit_col:
        pairs = pairs + [("cluster", roles.cluster)]
    for label, column in pairs:
        if column in seen:
            raise RoleOverlap("column assigned to two roles", column=column, roles=(seen[column], label))
        seen[column] = label


def assign_roles(ds: PanelDataset, roles: RoleMap) -> Tuple[PanelDataset, ValidationReport]:
    """Validate ``roles`` against ``ds``; returns the estimation sample and its report."""
    _check_overlap(ds, roles)
    required = roles.columns()
    if roles.cluster is not None and roles.cluster != ds.unit_col:
        required.append(roles.cluster)
    for column in required:
        if column not in ds.frame.columns:
            raise MissingColumn("role column not found", column=column)

    frame = ds.frame
    dropped = np.zeros(len(frame), dtype=bool)
    reasons: Dict[str, int] = {}
    checks = list(roles.assignments())
    if roles.cluster is not None and roles.cluster != ds.unit_col:
        checks.append(("cluster", roles.cluster))
    for label, column in checks:
        missing = frame[column].isna().to_numpy() & ~dropped
        if missing.any():
            reason = f"missing {label}" if label != "covariate" else f"missing covariate {column}"
            reasons[reason] = reasons.get(reason, 0) + int(missing.sum())
            dropped |= missing

    kept = frame.loc[~dropped].reset_index(drop=True)
    if len(kept) == 0:
        raise EmptyData("no rows left after listwise deletion")

    treatment = kept[roles.treatment].to_numpy(dtype=np.float64)
    bad = ~np.isin(treatment, (0.0, 1.0))
    if bad.any():
        raise NonBinaryTreatment(
            "treatment must be 0 or 1", column=roles.treatment, value=float(treatment[bad][0])
        )
    steps = kept.groupby(ds.unit_col, sort=True)[roles.treatment].diff()
    if (steps < 0).any():
        unit = kept.loc[steps < 0, ds.unit_col].iloc[0]
        raise TreatmentReversal("treatment switches off after switching on", unit=unit)

    n_units = int(kept[ds.unit_col].nunique())
    n_periods = int(kept[ds.time_col].nunique())
    if n_units < 2 or n_periods < 2:
        raise InsufficientData("panel needs at least 2 units and 2 periods", units=n_units, periods=n_periods)

    warnings: List[str] = []
    balanced = len(kept) == n_units * n_periods
    if not balanced:
        warnings.append(f"unbalanced panel: {len(kept)} rows for {n_units} units x {n_periods} periods")

    zero_var: List[str] = []
    low_var: List[str] = []
    for column in roles.covariates:
        values = kept[column].to_numpy(dtype=np.float64)
        if np.ptp(values) == 0.0:
            zero_var.append(column)
        elif values.size > 1 and np.var(values, ddof=1) < LOW_VARIANCE_THRESHOLD:
            low_var.append(column)
    if zero_var:
        warnings.append(f"zero-variance covariates: {', '.join(zero_var)}")
    if low_var:
        warnings.append(f"covariates with variance below {LOW_VARIANCE_THRESHOLD:g}: {', '.join(low_var)}")
    for message in warnings:
        logger.warning(message)

    report = ValidationReport(
        n_rows=len(kept),
        n_units=n_units,
        n_periods=n_periods,
        balanced=balanced,
        dropped_rows=int(dropped.sum()),
        drop_reasons=reasons,
        zero_variance_columns=zero_var,
        low_variance_columns=low_var,
        warnings=warnings,
    )
    return replace(ds, frame=kept, roles=roles), report


def low_variance_covariates(ds: PanelDataset, threshold: float = LOW_VARIANCE_THRESHOLD) -> List[str]:
    roles = ds.require_roles()
    flagged = []
    for column in roles.covariates:
        values = ds.column(column)
        if values.size < 2 or np.var(values, ddof=1) < threshold:
            flagged.append(column)
    return flagged


def drop_covariates(ds: PanelDataset, names: Iterable[str]) -> PanelDataset:
    roles = ds.require_roles()
    drop = set(names)
    kept = [c for c in roles.covariates if c not in drop]
    return ds.with_roles(roles.model_copy(update={"covariates": kept}))


# Cohorts
def _resolve_unit(key: Hashable, by_text: Mapping[str, Hashable], units: set) -> Hashable:
    if key in units:
        return key
    text = str(key)
    if text in by_text:
        return by_text[text]
    raise UnknownUnit("timing refers to a unit not in the dataset", unit=key)


def _check_period(unit: Hashable, period: Optional[int], low: int, high: int) -> Optional[int]:
    if period is NEVER:
        return NEVER
    value = float(period)
    if value != int(value):
        raise TimingOutOfRange("treatment period is not an integer", unit=unit, period=period)
    if not low <= int(value) <= high:
        raise TimingOutOfRange("treatment period outside the observed range", unit=unit, period=int(value))
    return int(value)


def derive_cohorts(
    ds: PanelDataset,
    timing: Union[str, Mapping[Hashable, Optional[int]]],
    treatment_col: Optional[str] = None,
) -> Tuple[PanelDataset, CohortMap]:
    """Build the cohort map and (re)generate the absorbing treatment column 1{t >= G_i}."""
    units = ds.units()
    periods = ds.periods()
    low, high = int(periods.min()), int(periods.max())
    entries: Dict[Hashable, Optional[int]] = {u: NEVER for u in units}

    if isinstance(timing, str):
        if timing not in ds.frame.columns:
            raise MissingColumn("timing column not found", column=timing)
        per_unit = ds.frame.groupby(ds.unit_col, sort=True)[timing]
        for unit, values in per_unit:
            distinct = pd.unique(values.dropna())
            if len(distinct) > 1:
                raise InconsistentGroup("timing column varies within unit", unit=unit, column=timing)
            if len(distinct) == 1:
                entries[unit] = _check_period(unit, distinct[0], low, high)
    else:
        unit_set = set(units.tolist())
        by_text = {str(u): u for u in units}
        for key, period in timing.items():
            unit = _resolve_unit(key, by_text, unit_set)
            entries[unit] = _check_period(unit, period, low, high)

    column = treatment_col or (ds.roles.treatment if ds.roles is not None else "D")
    derived = CohortMap(entries=entries).indicator(ds.unit_ids(), ds.period_values())

    warnings: List[str] = []
    if column in ds.frame.columns:
        existing = ds.frame[column].to_numpy(dtype=np.float64)
        mismatch = ~np.isnan(existing) & (existing != derived)
        if mismatch.any():
            message = (
                f"treatment column '{column}' disagrees with cohort timing on "
                f"{int(mismatch.sum())} rows; regenerated from timing"
            )
            logger.warning(message)
            warnings.append(message)

    cohorts = CohortMap(entries=entries, warnings=tuple(warnings))
    logger.info(
        "Derived cohorts treated=%d never=%d", len(cohorts.treated_units()), len(cohorts.never_treated_units())
    )
    return ds.with_columns({column: derived}), cohorts


# Features
def derive_features(ds: PanelDataset, specs: Sequence[FeatureSpec]) -> PanelDataset:
    frame = ds.frame.copy()
    for spec in specs:
        sources = [spec.column] + ([spec.other] if spec.other else [])
        for source in sources:
            if source not in frame.columns:
                raise MissingColumn("feature source column not found", column=source)
        name = spec.output_name
        if name in frame.columns:
            raise NameCollision("derived column name already exists", column=name)

        values = frame[spec.column].astype(np.float64)
        if spec.kind == "standardize":
            sd = values.std(ddof=1)
            if not np.isfinite(sd) or sd == 0.0:
                raise ZeroVariance("cannot standardize a constant column", column=spec.column)
            frame[name] = (values - values.mean()) / sd
        elif spec.kind == "square":
            frame[name] = values**2
        elif spec.kind == "interact":
            frame[name] = values * frame[spec.other].astype(np.float64)
        else:
            frame[name] = values * (frame[ds.time_col] - spec.origin).astype(np.float64)
    return ds.with_frame(frame)


def relative_time(ds: PanelDataset, cohorts: CohortMap, floor_bin: int = -4) -> pd.Series:
    """Event time t - G_i censored below at ``floor_bin``; NaN for never-treated units."""
    if floor_bin >= 0:
        raise InvalidArgument("floor_bin must be negative", floor_bin=floor_bin)
    g = cohorts.cohort_array(ds.unit_ids())
    distance = ds.period_values().astype(np.float64) - g
    distance = np.where(np.isnan(distance), np.nan, np.maximum(distance, float(floor_bin)))
    return pd.Series(distance, index=ds.frame.index, name="distance")


# Sample selection
def filter_subgroup(ds: PanelDataset, column: str, keep_values: Iterable[Any]) -> PanelDataset:
    keep = set(keep_values)
    if not keep:
        raise InvalidArgument("keep_values must not be empty")
    if column not in ds.frame.columns:
        raise MissingColumn("group column not found", column=column)
    per_unit = ds.frame.groupby(ds.unit_col, sort=True)[column].nunique(dropna=False)
    varying = per_unit[per_unit > 1]
    if len(varying):
        raise InconsistentGroup("unit changes group value over time", unit=varying.index[0], column=column)
    mask = ds.frame[column].isin(keep)
    if not mask.any():
        raise EmptySubgroup("no unit falls in the requested group", column=column, keep=sorted(map(str, keep)))
    return ds.with_frame(ds.frame.loc[mask])


def unit_groups(ds: PanelDataset, column: str) -> Dict[Any, List[Hashable]]:
    """Time-invariant group value -> units, groups in sorted order."""
    if column not in ds.frame.columns:
        raise MissingColumn("group column not found", column=column)
    per_unit = ds.frame.groupby(ds.unit_col, sort=True)[column]
    groups: Dict[Any, List[Hashable]] = {}
    for unit, values in per_unit:
        distinct = pd.unique(values)
        if len(distinct) > 1:
            raise InconsistentGroup("unit changes group value over time", unit=unit, column=column)
        groups.setdefault(distinct[0], []).append(unit)
    return dict(sorted(groups.items(), key=lambda item: item[0]))


def restrict_sample(
    ds: PanelDataset,
    exclude_units: Iterable[Hashable] = (),
    exclude_periods: Iterable[int] = (),
    period_range: Optional[Tuple[int, int]] = None,
) -> PanelDataset:
    frame = ds.frame
    mask = ~frame[ds.unit_col].isin(list(exclude_units)) & ~frame[ds.time_col].isin(list(exclude_periods))
    if period_range is not None:
        low, high = period_range
        mask &= frame[ds.time_col].between(low, high)
    if not mask.any():
        raise EmptyData("sample restriction removed every row")
    return ds.with_frame(frame.loc[mask])


# Fixed-effect absorption
@dataclass(frozen=True)
class DemeanResult:
    values: np.ndarray
    iterations: int
    max_change: float
    converged: bool


def _group_means(values: np.ndarray, codes: np.ndarray, counts: np.ndarray) -> np.ndarray:
    sums = np.stack([np.bincount(codes, weights=values[:, j], minlength=counts.size) for j in range(values.shape[1])], axis=1)
    return sums / counts[:, None]


def two_way_demean(
    matrix: np.ndarray,
    unit_codes: Optional[np.ndarray],
    period_codes: Optional[np.ndarray],
    tol: float = 1e-10,
    max_sweeps: int = 1000,
) -> DemeanResult:
    """Alternating unit-mean and period-mean subtraction until no cell moves more than ``tol``.

    Passing ``None`` for one of the code arrays absorbs only the other dimension,
    which is exact after a single sweep.
    """
    values = np.array(matrix, dtype=np.float64, copy=True)
    squeeze = values.ndim == 1
    if squeeze:
        values = values[:, None]
    dims = [codes for codes in (unit_codes, period_codes) if codes is not None]
    if not dims:
        return DemeanResult(values[:, 0] if squeeze else values, 0, 0.0, True)
    counts = [np.bincount(codes).astype(np.float64) for codes in dims]

    change = np.inf
    sweep = 0
    for sweep in range(1, max_sweeps + 1):
        before = values.copy()
        for codes, n in zip(dims, counts):
            values -= _group_means(values, codes, n)[codes]
        change = float(np.max(np.abs(values - before))) if values.size else 0.0
        if change < tol or len(dims) == 1:
            break
    converged = change < tol or len(dims) == 1
    out = values[:, 0] if squeeze else values
    return DemeanResult(out, sweep, change, converged)


def absorb_codes(ds: PanelDataset, absorb: str) -> Tuple[Optional[np.ndarray], Optional[np.ndarray]]:
    if absorb not in ("none", "unit", "period", "two_way"):
        raise InvalidArgument("unknown absorb mode", absorb=absorb)
    unit = ds.unit_codes() if absorb in ("unit", "two_way") else None
    period = ds.period_codes() if absorb in ("period", "two_way") else None
    return unit, period


def within_transform(ds: PanelDataset, columns: Sequence[str], absorb: str = "two_way") -> PanelDataset:
    """Replace ``columns`` by their deviations from the absorbed unit and/or period means."""
    unit, period = absorb_codes(ds, absorb)
    if unit is None and period is None:
        return ds
    result = two_way_demean(ds.matrix(columns), unit, period)
    if not result.converged:
        raise NonConvergence("within transform did not converge", sweeps=result.iterations, change=result.max_change)
    return ds.with_columns({c: result.values[:, j] for j, c in enumerate(columns)})
