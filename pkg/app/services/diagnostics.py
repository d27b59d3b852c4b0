from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import stats

from app.core.errors import (
    InsufficientData,
    InvalidArgument,
    NameCollision,
    NotPositiveSemiDefinite,
    PerfectCollinearity,
    SingularCorrelation,
    UnknownVariable,
    ZeroVariance,
)
from app.models.schemas import CorrelationTable, DescribeRow, DescribeTable, KmoResult, VifRow, VifTable
from app.services.panel_service import PanelDataset

logger = logging.getLogger(__name__)


def _require(ds: PanelDataset, names: Sequence[str]) -> None:
    for name in names:
        if not ds.has_column(name):
            raise UnknownVariable("variable not found", variable=name)


def _complete(ds: PanelDataset, names: Sequence[str]) -> Tuple[np.ndarray, np.ndarray]:
    values = ds.matrix(names)
    keep = np.all(np.isfinite(values), axis=1)
    return values[keep], np.flatnonzero(keep)


def describe(ds: PanelDataset, names: Sequence[str]) -> DescribeTable:
    _require(ds, names)
    rows = []
    for name in names:
        values = ds.column(name)
        values = values[np.isfinite(values)]
        if values.size == 0:
            rows.append(DescribeRow(name=name, n=0, mean=math.nan, sd=math.nan, min=math.nan, max=math.nan))
            continue
        sd = float(values.std(ddof=1)) if values.size > 1 else 0.0
        rows.append(
            DescribeRow(
                name=name,
                n=int(values.size),
                mean=float(values.mean()),
                sd=sd,
                min=float(values.min()),
                max=float(values.max()),
            )
        )
    return DescribeTable(rows=rows)


def _pair(x: np.ndarray, y: np.ndarray) -> Tuple[Optional[float], Optional[float], int]:
    keep = np.isfinite(x) & np.isfinite(y)
    n = int(keep.sum())
    if n < 3:
        raise InsufficientData("correlation needs at least 3 complete rows per pair", n=n)
    xc = x[keep] - x[keep].mean()
    yc = y[keep] - y[keep].mean()
    sxx, syy = float(xc @ xc), float(yc @ yc)
    if sxx == 0.0 or syy == 0.0:
        return None, None, n
    r = float(np.clip((xc @ yc) / math.sqrt(sxx * syy), -1.0, 1.0))
    if abs(r) == 1.0:
        return r, 0.0, n
    t = r * math.sqrt((n - 2) / (1.0 - r * r))
    return r, float(2.0 * stats.t.sf(abs(t), n - 2)), n


def correlation_matrix(ds: PanelDataset, names: Sequence[str]) -> CorrelationTable:
    """Pairwise-complete Pearson correlations with t-test p-values.

    Pairs involving a zero-variance column are reported as ``None``.
    """
    _require(ds, names)
    columns = [ds.column(name) for name in names]
    p = len(names)
    r_mat: List[List[Optional[float]]] = [[None] * p for _ in range(p)]
    p_mat: List[List[Optional[float]]] = [[None] * p for _ in range(p)]
    n_mat = [[0] * p for _ in range(p)]
    for i in range(p):
        for j in range(i, p):
            r, pv, n = _pair(columns[i], columns[j])
            if i == j:
                r, pv = (None, None) if r is None else (1.0, None)
            r_mat[i][j] = r_mat[j][i] = r
            p_mat[i][j] = p_mat[j][i] = pv
            n_mat[i][j] = n_mat[j][i] = n
    return CorrelationTable(variables=list(names), r=r_mat, p=p_mat, n=n_mat)


def _r_squared(target: np.ndarray, others: np.ndarray) -> float:
    design = np.column_stack([np.ones(target.size), others])
    beta, *_ = np.linalg.lstsq(design, target, rcond=None)
    resid = target - design @ beta
    centered = target - target.mean()
    return 1.0 - float(resid @ resid) / float(centered @ centered)


def vif(ds: PanelDataset, regressors: Sequence[str]) -> VifTable:
    """1 / (1 - R^2_j) per regressor from OLS on the others plus an intercept; sorted descending."""
    if len(regressors) < 2:
        raise InvalidArgument("VIF needs at least 2 regressors", regressors=len(regressors))
    _require(ds, regressors)
    values, _ = _complete(ds, regressors)
    if values.shape[0] <= len(regressors):
        raise InsufficientData("more regressors than complete rows", n=values.shape[0], p=len(regressors))
    rows = []
    for j, name in enumerate(regressors):
        target = values[:, j]
        if np.ptp(target) == 0.0:
            raise PerfectCollinearity("regressor is constant", variable=name)
        r2 = _r_squared(target, np.delete(values, j, axis=1))
        if r2 >= 1.0 - 1e-12:
            raise PerfectCollinearity("regressor is an exact linear combination of the others", variable=name)
        factor = 1.0 / (1.0 - r2)
        rows.append(VifRow(name=name, vif=factor, inverse=1.0 / factor))
    rows.sort(key=lambda row: -row.vif)
    return VifTable(rows=rows, mean_vif=float(np.mean([row.vif for row in rows])))


def kmo(correlation: np.ndarray, names: Optional[Sequence[str]] = None) -> KmoResult:
    """Kaiser-Meyer-Olkin adequacy from a correlation matrix; 0/0 cases are ``None``."""
    R = np.asarray(correlation, dtype=np.float64)
    p = R.shape[0]
    labels = list(names) if names is not None else [f"v{i + 1}" for i in range(p)]
    if np.linalg.matrix_rank(R) < p:
        raise SingularCorrelation("correlation matrix is not invertible", rank=int(np.linalg.matrix_rank(R)), p=p)
    S = np.linalg.inv(R)
    diag = np.sqrt(np.diag(S))
    partial = -S / np.outer(diag, diag)
    off = ~np.eye(p, dtype=bool)
    r2 = np.where(off, R**2, 0.0)
    a2 = np.where(off, partial**2, 0.0)

    def ratio(num: float, other: float) -> Optional[float]:
        total = num + other
        return None if total == 0.0 else num / total

    per_variable = {labels[j]: ratio(float(r2[j].sum()), float(a2[j].sum())) for j in range(p)}
    return KmoResult(overall=ratio(float(r2.sum()), float(a2.sum())), per_variable=per_variable)


@dataclass(frozen=True, eq=False)
class PcaResult:
    variables: Tuple[str, ...]
    eigenvalues: np.ndarray
    # columns are components, sign-normalized
    loadings: np.ndarray
    retained: int
    scores: np.ndarray
    proportions: np.ndarray
    cumulative: np.ndarray
    correlation: np.ndarray
    rows: np.ndarray
    mineigen: float
    kmo: Optional[KmoResult] = None

    def eigen_table(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "component": np.arange(1, self.eigenvalues.size + 1),
                "eigenvalue": self.eigenvalues,
                "proportion": self.proportions,
                "cumulative": self.cumulative,
            }
        )

    def loadings_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(
            self.loadings, columns=[f"comp{i + 1}" for i in range(self.loadings.shape[1])]
        )
        frame.insert(0, "variable", list(self.variables))
        return frame


def pca(ds: PanelDataset, names: Sequence[str], mineigen: float = 1.0) -> PcaResult:
    """Correlation-matrix PCA on internally standardized variables.

    Components with eigenvalue >= ``mineigen`` are retained (inclusive, with a
    1e-10 allowance for rounding).
    """
    if len(names) < 2:
        raise InvalidArgument("PCA needs at least 2 variables", variables=len(names))
    _require(ds, names)
    values, rows = _complete(ds, names)
    n, p = values.shape
    if n <= p:
        raise InsufficientData("more variables than complete rows", n=n, p=p)
    sd = values.std(axis=0, ddof=1)
    for name, spread in zip(names, sd):
        if spread == 0.0:
            raise ZeroVariance("cannot standardize a constant column", column=name)
    Z = (values - values.mean(axis=0)) / sd
    R = (Z.T @ Z) / (n - 1)
    R = 0.5 * (R + R.T)

    eigenvalues, vectors = np.linalg.eigh(R)
    order = np.argsort(eigenvalues)[::-1]
    eigenvalues, vectors = eigenvalues[order], vectors[:, order]
    if eigenvalues.min() < -1e-8:
        raise NotPositiveSemiDefinite("correlation matrix has a negative eigenvalue", eigenvalue=float(eigenvalues.min()))
    for c in range(p):
        lead = int(np.argmax(np.abs(vectors[:, c])))
        if vectors[lead, c] < 0.0:
            vectors[:, c] = -vectors[:, c]

    retained = int(np.sum(eigenvalues >= mineigen - 1e-10))
    proportions = eigenvalues / eigenvalues.sum()
    try:
        adequacy: Optional[KmoResult] = kmo(R, names)
    except SingularCorrelation as err:
        logger.warning("KMO not available: %s", err)
        adequacy = None
    return PcaResult(
        variables=tuple(names),
        eigenvalues=eigenvalues,
        loadings=vectors,
        retained=retained,
        scores=Z @ vectors[:, :retained],
        proportions=proportions,
        cumulative=np.cumsum(proportions),
        correlation=R,
        rows=rows,
        mineigen=mineigen,
        kmo=adequacy,
    )


def append_pca_scores(ds: PanelDataset, result: PcaResult, names: Optional[Sequence[str]] = None) -> PanelDataset:
    """Add retained component scores as columns; rows excluded from the PCA get NaN."""
    labels = list(names) if names is not None else [f"pc{i + 1}" for i in range(result.retained)]
    if len(labels) != result.retained:
        raise InvalidArgument("one name per retained component is required", retained=result.retained, names=len(labels))
    for label in labels:
        if ds.has_column(label):
            raise NameCollision("score column already exists", column=label)
    columns = {}
    for c, label in enumerate(labels):
        values = np.full(ds.n_rows, np.nan)
        values[result.rows] = result.scores[:, c]
        columns[label] = values
    return ds.with_columns(columns)
