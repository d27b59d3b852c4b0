"""Nuisance regression learners: mean, OLS, ridge, cross-validated lasso,
regression forest and gradient boosting.

Everything is plain numpy so that fits are bit-reproducible from
``(spec, X, y, seed)``; tree ensembles draw every random choice from a
stream keyed on (seed, tree index, node id), which keeps results identical
for any ``n_jobs``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from app.core.errors import InsufficientData, InvalidArgument, ShapeMismatch, SingularDesign
from app.core.seeding import rng_for
from app.models.schemas import LearnerSpec

logger = logging.getLogger(__name__)

LASSO_TOL = 1e-7
LASSO_MAX_SWEEPS = 100_000
BOOSTING_HOLDOUT = 0.2


@dataclass(frozen=True, eq=False)
class RegressionTree:
    """Array-encoded CART tree; ``feature == -1`` marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    @property
    def n_leaves(self) -> int:
        return int(np.sum(self.feature < 0))

    def predict(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(X.shape[0], dtype=np.int64)
        while True:
            split = self.feature[node]
            active = np.flatnonzero(split >= 0)
            if active.size == 0:
                break
            current = node[active]
            go_left = X[active, split[active]] <= self.threshold[current]
            node[active] = np.where(go_left, self.left[current], self.right[current])
        return self.value[node]


@dataclass(frozen=True)
class FitSummary:
    train_mse: float
    selected_lambda: Optional[float] = None
    cv_mse: Tuple[float, ...] = ()
    boosting_rounds: Optional[int] = None
    best_round: Optional[int] = None
    warnings: Tuple[str, ...] = ()


@dataclass(frozen=True, eq=False)
class FittedModel:
    spec: LearnerSpec
    n_features: int
    feature_names: Tuple[str, ...] = ()
    intercept: float = 0.0
    coef: Optional[np.ndarray] = None
    # ridge/lasso slopes on the internally standardized scale
    coef_std: Optional[np.ndarray] = None
    trees: Tuple[RegressionTree, ...] = ()
    learning_rate: float = 1.0
    summary: FitSummary = field(default_factory=lambda: FitSummary(train_mse=float("nan")))


# Standardization
@dataclass(frozen=True, eq=False)
class _Scaling:
    mean: np.ndarray
    scale: np.ndarray
    active: np.ndarray

    def apply(self, X: np.ndarray) -> np.ndarray:
        Z = np.zeros_like(X, dtype=np.float64)
        Z[:, self.active] = (X[:, self.active] - self.mean[self.active]) / self.scale[self.active]
        return Z

    def to_original(self, beta_std: np.ndarray, y_mean: float) -> Tuple[float, np.ndarray]:
        coef = np.zeros_like(beta_std)
        coef[self.active] = beta_std[self.active] / self.scale[self.active]
        return float(y_mean - self.mean @ coef), coef


def _scaling(X: np.ndarray) -> _Scaling:
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    active = scale > 1e-12 * np.maximum(1.0, np.abs(mean))
    return _Scaling(mean=mean, scale=np.where(active, scale, 1.0), active=active)


def _check_inputs(X: np.ndarray, y: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or y.ndim != 1 or X.shape[0] != y.shape[0]:
        raise ShapeMismatch("X must be n x p and y length n", x_shape=X.shape, y_shape=y.shape)
    if X.shape[0] < 2:
        raise InsufficientData("at least 2 observations are required", n=X.shape[0])
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise InvalidArgument("learner inputs contain missing or non-finite values")
    return X, y


# Linear learners
def _column_label(index: int, names: Sequence[str]) -> str:
    return names[index] if index < len(names) else f"x{index + 1}"


def _fit_ols(spec: LearnerSpec, X: np.ndarray, y: np.ndarray, names: Sequence[str]) -> FittedModel:
    design = np.column_stack([np.ones(X.shape[0]), X])
    if np.linalg.matrix_rank(design) < design.shape[1]:
        rank = 1
        for j in range(X.shape[1]):
            next_rank = np.linalg.matrix_rank(design[:, : j + 2])
            if next_rank == rank:
                raise SingularDesign("design matrix is rank deficient", column=_column_label(j, names))
            rank = next_rank
    beta, *_ = np.linalg.lstsq(design, y, rcond=None)
    return FittedModel(spec=spec, n_features=X.shape[1], intercept=float(beta[0]), coef=beta[1:])


def _fit_ridge(spec: LearnerSpec, X: np.ndarray, y: np.ndarray) -> FittedModel:
    n = X.shape[0]
    scaling = _scaling(X)
    Z = scaling.apply(X)
    y_mean = float(y.mean())
    yc = y - y_mean
    beta = np.zeros(X.shape[1])
    active = scaling.active
    if active.any():
        Za = Z[:, active]
        if spec.ridge_lambda == 0.0:
            beta[active], *_ = np.linalg.lstsq(Za, yc, rcond=None)
        else:
            gram = Za.T @ Za / n + spec.ridge_lambda * np.eye(Za.shape[1])
            beta[active] = np.linalg.solve(gram, Za.T @ yc / n)
    intercept, coef = scaling.to_original(beta, y_mean)
    return FittedModel(spec=spec, n_features=X.shape[1], intercept=intercept, coef=coef, coef_std=beta)


def ridge_objective(X: np.ndarray, y: np.ndarray, lam: float, beta_std: np.ndarray) -> float:
    """(1/2n)||y_c - Z beta||^2 + (lam/2)||beta||^2 on the standardized scale."""
    X, y = _check_inputs(X, y)
    Z = _scaling(X).apply(X)
    resid = (y - y.mean()) - Z @ beta_std
    return float(resid @ resid / (2 * X.shape[0]) + 0.5 * lam * beta_std @ beta_std)


def ridge_gradient(X: np.ndarray, y: np.ndarray, lam: float, beta_std: np.ndarray) -> np.ndarray:
    X, y = _check_inputs(X, y)
    Z = _scaling(X).apply(X)
    resid = (y - y.mean()) - Z @ beta_std
    return -Z.T @ resid / X.shape[0] + lam * beta_std


def _soft_threshold(value: float, lam: float) -> float:
    if value > lam:
        return value - lam
    if value < -lam:
        return value + lam
    return 0.0


def _lasso_cd(Z: np.ndarray, yc: np.ndarray, lam: float, beta: np.ndarray) -> np.ndarray:
    """Cyclic coordinate descent on (1/2n)||yc - Z b||^2 + lam*||b||_1.

    Columns of ``Z`` are standardized (unit mean square) or all-zero.
    """
    n = Z.shape[0]
    beta = beta.copy()
    norms = np.einsum("ij,ij->j", Z, Z) / n
    resid = yc - Z @ beta
    for _ in range(LASSO_MAX_SWEEPS):
        max_change = 0.0
        for j in range(Z.shape[1]):
            if norms[j] == 0.0:
                continue
            old = beta[j]
            rho = Z[:, j] @ resid / n + norms[j] * old
            new = _soft_threshold(rho, lam) / norms[j]
            if new != old:
                resid -= Z[:, j] * (new - old)
                beta[j] = new
                max_change = max(max_change, abs(new - old))
        if max_change < LASSO_TOL:
            return beta
    logger.warning("lasso coordinate descent hit the sweep cap at lambda=%g", lam)
    return beta


def _lasso_solution(Z: np.ndarray, yc: np.ndarray, lam: float, warm: np.ndarray) -> np.ndarray:
    if lam == 0.0:
        beta, *_ = np.linalg.lstsq(Z, yc, rcond=None)
        return beta
    return _lasso_cd(Z, yc, lam, warm)


def lasso_lambda_path(X: np.ndarray, y: np.ndarray, n_lambdas: int = 100, lambda_min_ratio: float = 1e-4) -> np.ndarray:
    """Descending geometric grid from lambda_max down to lambda_max * lambda_min_ratio."""
    if n_lambdas < 2:
        raise InvalidArgument("n_lambdas must be at least 2", n_lambdas=n_lambdas)
    if not 0.0 < lambda_min_ratio < 1.0:
        raise InvalidArgument("lambda_min_ratio must lie in (0, 1)", lambda_min_ratio=lambda_min_ratio)
    X, y = _check_inputs(X, y)
    Z = _scaling(X).apply(X)
    lam_max = float(np.max(np.abs(Z.T @ (y - y.mean())))) / X.shape[0]
    if lam_max <= 0.0:
        logger.warning("lasso target has no variance explained by any feature; path is [0]")
        return np.array([0.0])
    return np.geomspace(lam_max, lam_max * lambda_min_ratio, n_lambdas)


def lasso_path(X: np.ndarray, y: np.ndarray, lambdas: Sequence[float]) -> np.ndarray:
    """Standardized-scale lasso coefficients at each lambda, warm-started along the path."""
    X, y = _check_inputs(X, y)
    Z = _scaling(X).apply(X)
    yc = y - y.mean()
    beta = np.zeros(X.shape[1])
    rows = []
    for lam in lambdas:
        beta = _lasso_solution(Z, yc, float(lam), beta)
        rows.append(beta.copy())
    return np.vstack(rows)


def lasso_kkt_violation(X: np.ndarray, y: np.ndarray, lam: float, beta_std: np.ndarray) -> float:
    """Largest violation of the lasso optimality conditions on the standardized scale."""
    X, y = _check_inputs(X, y)
    Z = _scaling(X).apply(X)
    grad = Z.T @ ((y - y.mean()) - Z @ beta_std) / X.shape[0]
    zero = beta_std == 0.0
    worst = 0.0
    if zero.any():
        worst = max(worst, float(np.max(np.abs(grad[zero]) - lam)))
    if (~zero).any():
        worst = max(worst, float(np.max(np.abs(grad[~zero] - lam * np.sign(beta_std[~zero])))))
    return max(worst, 0.0)


def _observation_folds(n: int, k: int, seed: int) -> np.ndarray:
    order = rng_for(seed).permutation(n)
    folds = np.empty(n, dtype=np.int64)
    folds[order] = np.arange(n) % k
    return folds


def select_lambda_cv(X: np.ndarray, y: np.ndarray, spec: LearnerSpec) -> Tuple[float, pd.DataFrame]:
    """Min-MSE lambda over seeded K-fold CV; ties go to the larger lambda."""
    X, y = _check_inputs(X, y)
    n = X.shape[0]
    if spec.cv_folds > n:
        raise InsufficientData("more CV folds than observations", n=n, cv_folds=spec.cv_folds)
    lambdas = lasso_lambda_path(X, y, spec.n_lambdas, spec.lambda_min_ratio)
    folds = _observation_folds(n, spec.cv_folds, spec.seed)
    sse = np.zeros(lambdas.size)
    for k in range(spec.cv_folds):
        train, test = folds != k, folds == k
        Xtr, ytr = X[train], y[train]
        scaling = _scaling(Xtr)
        Ztr = scaling.apply(Xtr)
        y_mean = float(ytr.mean())
        beta = np.zeros(X.shape[1])
        for i, lam in enumerate(lambdas):
            beta = _lasso_solution(Ztr, ytr - y_mean, float(lam), beta)
            intercept, coef = scaling.to_original(beta, y_mean)
            err = y[test] - (intercept + X[test] @ coef)
            sse[i] += float(err @ err)
    mse = sse / n
    table = pd.DataFrame({"lambda": lambdas, "mse": mse})
    lambda_star = float(lambdas[int(np.argmin(mse))])
    return lambda_star, table


def _fit_lasso(spec: LearnerSpec, X: np.ndarray, y: np.ndarray) -> FittedModel:
    warnings: List[str] = []
    cv_mse: Tuple[float, ...] = ()
    if spec.lasso_lambda is not None:
        lam = float(spec.lasso_lambda)
        path = [lam]
    else:
        lam, table = select_lambda_cv(X, y, spec)
        cv_mse = tuple(float(v) for v in table["mse"])
        path = [float(v) for v in table["lambda"] if v >= lam]
        if table.shape[0] == 1:
            warnings.append("zero-variance target; lasso path collapsed to lambda=0")
    scaling = _scaling(X)
    Z = scaling.apply(X)
    y_mean = float(y.mean())
    beta = np.zeros(X.shape[1])
    for value in path:
        beta = _lasso_solution(Z, y - y_mean, value, beta)
    intercept, coef = scaling.to_original(beta, y_mean)
    return FittedModel(
        spec=spec,
        n_features=X.shape[1],
        intercept=intercept,
        coef=coef,
        coef_std=beta,
        summary=FitSummary(train_mse=float("nan"), selected_lambda=lam, cv_mse=cv_mse, warnings=tuple(warnings)),
    )


# Trees
def _best_split(Xn: np.ndarray, yn: np.ndarray, features: np.ndarray, min_leaf: int) -> Optional[Tuple[int, float, float]]:
    n = yn.size
    total = float(yn.sum())
    base = total * total / n
    node_sse = float(np.sum((yn - yn.mean()) ** 2))
    best_gain = 1e-12 * max(1.0, node_sse)
    best: Optional[Tuple[int, float, float]] = None
    n_left = np.arange(1, n)
    n_right = n - n_left
    size_ok = (n_left >= min_leaf) & (n_right >= min_leaf)
    for f in features:
        order = np.argsort(Xn[:, f], kind="mergesort")
        xs = Xn[order, f]
        left_sum = np.cumsum(yn[order])[:-1]
        valid = size_ok & (xs[:-1] < xs[1:])
        if not valid.any():
            continue
        gain = left_sum**2 / n_left + (total - left_sum) ** 2 / n_right - base
        gain = np.where(valid, gain, -np.inf)
        i = int(np.argmax(gain))
        if gain[i] > best_gain:
            best_gain = float(gain[i])
            best = (int(f), 0.5 * (xs[i] + xs[i + 1]), best_gain)
    return best


def grow_tree(
    X: np.ndarray,
    y: np.ndarray,
    max_depth: int,
    min_leaf: int,
    mtry: int,
    seed: int,
    tree_index: int,
    rows: Optional[np.ndarray] = None,
) -> RegressionTree:
    """Variance-reduction CART tree grown depth-first.

    Candidate features at a node are drawn from ``rng_for(seed, tree_index, node_id)``
    with heap node ids, so a deeper tree extends a shallower one split for split.
    """
    n_features = X.shape[1]
    feature: List[int] = []
    threshold: List[float] = []
    left: List[int] = []
    right: List[int] = []
    value: List[float] = []

    def build(idx: np.ndarray, depth: int, node_id: int) -> int:
        node = len(value)
        yv = y[idx]
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(float(yv.mean()))
        if depth >= max_depth or idx.size < 2 * min_leaf:
            return node
        if mtry < n_features:
            candidates = np.sort(rng_for(seed, tree_index, node_id).choice(n_features, mtry, replace=False))
        else:
            candidates = np.arange(n_features)
        split = _best_split(X[idx], yv, candidates, min_leaf)
        if split is None:
            return node
        f, thr, _ = split
        mask = X[idx, f] <= thr
        feature[node] = f
        threshold[node] = thr
        left[node] = build(idx[mask], depth + 1, 2 * node_id)
        right[node] = build(idx[~mask], depth + 1, 2 * node_id + 1)
        return node

    build(np.arange(y.size) if rows is None else rows, 0, 1)
    return RegressionTree(
        feature=np.asarray(feature, dtype=np.int64),
        threshold=np.asarray(threshold, dtype=np.float64),
        left=np.asarray(left, dtype=np.int64),
        right=np.asarray(right, dtype=np.int64),
        value=np.asarray(value, dtype=np.float64),
    )


def _forest_tree(spec: LearnerSpec, X: np.ndarray, y: np.ndarray, tree_index: int) -> RegressionTree:
    rows = None
    if spec.bootstrap:
        rows = np.sort(rng_for(spec.seed, tree_index).integers(0, y.size, size=y.size))
    return grow_tree(
        X,
        y,
        max_depth=spec.depth,
        min_leaf=spec.min_leaf,
        mtry=spec.resolved_mtry(X.shape[1]),
        seed=spec.seed,
        tree_index=tree_index,
        rows=rows,
    )


def _fit_forest(spec: LearnerSpec, X: np.ndarray, y: np.ndarray, n_jobs: int) -> FittedModel:
    if y.size < 2 * spec.min_leaf:
        raise InsufficientData("too few rows for min_leaf", n=y.size, min_leaf=spec.min_leaf)
    trees = Parallel(n_jobs=n_jobs, require="sharedmem")(
        delayed(_forest_tree)(spec, X, y, t) for t in range(spec.n_trees)
    )
    return FittedModel(spec=spec, n_features=X.shape[1], trees=tuple(trees))


def _fit_boosting(spec: LearnerSpec, X: np.ndarray, y: np.ndarray) -> FittedModel:
    n = y.size
    if n < 2 * spec.min_leaf:
        raise InsufficientData("too few rows for min_leaf", n=n, min_leaf=spec.min_leaf)
    n_val = max(1, int(round(BOOSTING_HOLDOUT * n)))
    order = rng_for(spec.seed).permutation(n)
    val, train = np.sort(order[:n_val]), np.sort(order[n_val:])
    Xtr, ytr, Xval, yval = X[train], y[train], X[val], y[val]

    base = float(ytr.mean())
    fit_tr = np.full(ytr.size, base)
    fit_val = np.full(yval.size, base)
    best_mse = float(np.mean((yval - fit_val) ** 2))
    best_round = 0
    trees: List[RegressionTree] = []
    rounds = 0
    for rounds in range(1, spec.max_rounds + 1):
        tree = grow_tree(
            Xtr,
            ytr - fit_tr,
            max_depth=spec.depth,
            min_leaf=spec.min_leaf,
            mtry=X.shape[1],
            seed=spec.seed,
            tree_index=rounds,
        )
        trees.append(tree)
        fit_tr += spec.learning_rate * tree.predict(Xtr)
        fit_val += spec.learning_rate * tree.predict(Xval)
        mse = float(np.mean((yval - fit_val) ** 2))
        if mse < best_mse:
            best_mse, best_round = mse, rounds
        elif rounds - best_round >= spec.early_stop_rounds:
            break
    logger.debug("boosting stopped after %d rounds (best %d)", rounds, best_round)
    return FittedModel(
        spec=spec,
        n_features=X.shape[1],
        intercept=base,
        trees=tuple(trees[:best_round]),
        learning_rate=spec.learning_rate,
        summary=FitSummary(train_mse=float("nan"), boosting_rounds=rounds, best_round=best_round),
    )


# Public API
def fit(
    spec: LearnerSpec,
    X: np.ndarray,
    y: np.ndarray,
    feature_names: Sequence[str] = (),
    n_jobs: int = 1,
) -> FittedModel:
    X, y = _check_inputs(X, y)
    if X.shape[1] < 1 and spec.kind != "mean":
        raise InvalidArgument("at least one feature is required", kind=spec.kind)
    names = tuple(feature_names)

    if spec.kind == "mean":
        model = FittedModel(spec=spec, n_features=X.shape[1], intercept=float(y.mean()))
    elif spec.kind == "ols":
        model = _fit_ols(spec, X, y, names)
    elif spec.kind == "ridge":
        model = _fit_ridge(spec, X, y)
    elif spec.kind == "lasso_cv":
        model = _fit_lasso(spec, X, y)
    elif spec.kind == "forest":
        model = _fit_forest(spec, X, y, n_jobs)
    else:
        model = _fit_boosting(spec, X, y)

    resid = y - predict(model, X)
    summary = replace(model.summary, train_mse=float(resid @ resid / y.size))
    return replace(model, feature_names=names, summary=summary)


def predict(model: FittedModel, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.n_features:
        raise ShapeMismatch("feature count differs from training", expected=model.n_features, got=X.shape[-1])
    kind = model.spec.kind
    if kind == "mean":
        return np.full(X.shape[0], model.intercept)
    if kind in ("ols", "ridge", "lasso_cv"):
        return model.intercept + X @ model.coef
    total = np.zeros(X.shape[0])
    for tree in model.trees:
        total += tree.predict(X)
    if kind == "forest":
        return total / len(model.trees)
    return model.intercept + model.learning_rate * total
