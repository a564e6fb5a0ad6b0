"""Linear building blocks: OLS, cross-validated LASSO via cyclic coordinate
descent, multi-output ridge, PCA projections, and the linear trial-side
encoder assembled from an observational projection plus a ridge imputer."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from calmcate.data import CovariateLayout, FoldAssignment, make_folds

PENALTY_GRID_SIZE = 50
PENALTY_GRID_RATIO = 1e-4
PENALTY_GRID_RATIO_WIDE = 1e-2
CD_TOL = 1e-7
CD_MAX_PASSES = 100_000


class LassoConvergenceError(RuntimeError):
    """Coordinate descent failed to converge; carries the last iterate."""

    def __init__(self, message, intercept, coef):
        super().__init__(message)
        self.intercept = intercept
        self.coef = coef


@dataclass(frozen=True)
class LinearModel:
    """A fitted linear predictor on the original feature scale.

    ``predict(X)`` computes ``intercept + X @ coef``. For penalized fits,
    ``penalty`` records the penalty level on the standardized scale.
    """

    intercept: float
    coef: np.ndarray
    penalty: float | None = None
    diagnostics: dict = field(default_factory=dict, repr=False)

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return self.intercept + X @ self.coef


@dataclass(frozen=True)
class MultiLinearModel:
    """Multi-output linear predictor: ``predict(X) = intercept + X @ coef``."""

    intercept: np.ndarray
    coef: np.ndarray

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return self.intercept + X @ self.coef


def fit_ols(X: np.ndarray, y: np.ndarray) -> LinearModel:
    """Ordinary least squares with an intercept.

    Raises
    ------
    numpy.linalg.LinAlgError
        If the intercept-augmented design is rank-deficient.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    n, p = X.shape
    design = np.column_stack([np.ones(n), X])
    beta, _, rank, _ = np.linalg.lstsq(design, y, rcond=None)
    if rank < p + 1:
        raise np.linalg.LinAlgError(
            f"design matrix is rank-deficient (rank {rank} < {p + 1})"
        )
    return LinearModel(intercept=float(beta[0]), coef=beta[1:])


@njit(cache=True)
def _cd_gram(G, c, w, lam, tol, max_passes):
    """Cyclic coordinate descent on the Gram system.

    Minimizes (1/2) w'Gw - c'w + lam*||w||_1 where G = Xs'Xs/n and
    c = Xs'yc/n for standardized columns Xs and centered response yc.
    Columns with zero Gram diagonal (constants) are skipped.
    """
    p = G.shape[0]
    for it in range(max_passes):
        max_delta = 0.0
        for j in range(p):
            gjj = G[j, j]
            if gjj <= 0.0:
                continue
            grad_j = 0.0
            for k in range(p):
                grad_j += G[j, k] * w[k]
            rho = c[j] - grad_j + gjj * w[j]
            if rho > lam:
                w_new = (rho - lam) / gjj
            elif rho < -lam:
                w_new = (rho + lam) / gjj
            else:
                w_new = 0.0
            delta = abs(w_new - w[j])
            if delta > max_delta:
                max_delta = delta
            w[j] = w_new
        if max_delta < tol:
            return it + 1, True
    return max_passes, False


def _standardize_cols(X):
    mean = X.mean(axis=0)
    sd = X.std(axis=0)
    scale = np.where(sd <= 1e-12, 1.0, sd)
    Xs = (X - mean) / scale
    Xs[:, sd <= 1e-12] = 0.0
    return Xs, mean, scale


def penalty_grid_for(X: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Default descending penalty grid: 50 log-spaced values from the
    smallest all-zero penalty down to 1e-4 of it (1e-2 when the design is
    wider than it is tall, where the unpenalized end is ill-posed)."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    Xs, _, _ = _standardize_cols(X)
    yc = y - y.mean()
    lam_max = float(np.max(np.abs(Xs.T @ yc)) / len(y))
    if lam_max <= 0.0:
        return np.zeros(1)
    ratio = PENALTY_GRID_RATIO if X.shape[0] > X.shape[1] else PENALTY_GRID_RATIO_WIDE
    return np.geomspace(lam_max, ratio * lam_max, PENALTY_GRID_SIZE)


def _lasso_path_gram(G, c, grid, tol, max_passes):
    p = G.shape[0]
    coefs = np.zeros((len(grid), p))
    w = np.zeros(p)
    for i, lam in enumerate(grid):
        passes, ok = _cd_gram(G, c, w, lam, tol, max_passes)
        if not ok:
            return coefs, i, passes
        coefs[i] = w
    return coefs, len(grid), 0


def fit_lasso_at(
    X: np.ndarray,
    y: np.ndarray,
    penalty: float,
    tol: float = CD_TOL,
    max_passes: int = CD_MAX_PASSES,
) -> LinearModel:
    """LASSO at a fixed penalty on internally standardized features.

    The objective is (1/2n)||yc - Xs w||^2 + penalty*||w||_1; coefficients
    are reported back on the original feature scale and the intercept is
    unpenalized.
    """
    if penalty < 0:
        raise ValueError("penalty must be non-negative")
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    n = len(y)
    Xs, mean, scale = _standardize_cols(X)
    yc = y - y.mean()
    # Solve on the unit-variance response so the stopping tolerance is
    # scale-free; the substitution is exact (penalty and coefficients both
    # scale linearly with the response).
    y_sd = float(yc.std())
    if y_sd <= 1e-12:
        y_sd = 1.0
    G = Xs.T @ Xs / n
    c = Xs.T @ (yc / y_sd) / n
    w = np.zeros(X.shape[1])
    passes, ok = _cd_gram(G, c, w, penalty / y_sd, tol, max_passes)
    coef = w * y_sd / scale
    intercept = float(y.mean() - mean @ coef)
    if not ok:
        raise LassoConvergenceError(
            f"coordinate descent did not converge in {max_passes} passes",
            intercept,
            coef,
        )
    return LinearModel(
        intercept=intercept,
        coef=coef,
        penalty=float(penalty),
        diagnostics={"n_passes": passes},
    )


def _select_penalty(grid: np.ndarray, cv_mse: np.ndarray) -> int:
    """Index of the minimum CV error; exact ties resolve toward the larger
    penalty (grids are descending, so toward the smaller index)."""
    best = 0
    for i in range(1, len(grid)):
        if cv_mse[i] < cv_mse[best]:
            best = i
    return best


def fit_lasso(
    X: np.ndarray,
    y: np.ndarray,
    penalty_grid: np.ndarray | None = None,
    folds: int | FoldAssignment = 5,
    seed: int = 0,
    tol: float = CD_TOL,
    max_passes: int = CD_MAX_PASSES,
) -> LinearModel:
    """Cross-validated LASSO.

    Fits a warm-started coordinate-descent path over a descending penalty
    grid within each fold, picks the penalty with minimum mean validation
    squared error (ties toward the larger penalty), and refits on all rows.
    If a fold's path stops converging partway down the grid (an effectively
    unpenalized fit on a near-collinear design), the remaining penalties are
    dropped from selection rather than failing the fit.

    Parameters
    ----------
    penalty_grid : ndarray, optional
        Descending penalties on the standardized scale. Defaults to
        ``penalty_grid_for(X, y)``.
    folds : int or FoldAssignment
        Fold count (assigned from ``seed``) or a precomputed assignment.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    n = len(y)
    if penalty_grid is None:
        penalty_grid = penalty_grid_for(X, y)
    grid = np.asarray(penalty_grid, dtype=float)
    if len(grid) > 1 and np.any(np.diff(grid) > 0):
        raise ValueError("penalty grid must be descending")
    if len(grid) == 1:
        model = fit_lasso_at(X, y, float(grid[0]), tol, max_passes)
        model.diagnostics["cv_mse"] = None
        return model
    assignment = folds if isinstance(folds, FoldAssignment) else make_folds(n, folds, seed)
    if assignment.n != n:
        raise ValueError("fold assignment does not match the number of rows")
    K = assignment.n_folds

    cv_sse = np.zeros(len(grid))
    usable = len(grid)
    for k in range(K):
        tr = assignment.train_indices(k)
        va = assignment.fold_indices(k)
        Xs, mean, scale = _standardize_cols(X[tr])
        y_mean = y[tr].mean()
        yc = y[tr] - y_mean
        y_sd = float(yc.std())
        if y_sd <= 1e-12:
            y_sd = 1.0
        G = Xs.T @ Xs / len(tr)
        c = Xs.T @ (yc / y_sd) / len(tr)
        coefs, done, passes = _lasso_path_gram(G, c, grid / y_sd, tol, max_passes)
        if done == 0:
            raise LassoConvergenceError(
                f"coordinate descent did not converge in {max_passes} passes "
                f"(fold {k}, grid index {done})",
                float(y_mean),
                coefs[0] * y_sd / scale,
            )
        # A fold that stalls near the unpenalized end of the path truncates
        # the selectable grid there for every fold.
        usable = min(usable, done)
        Xva = (X[va] - mean) / scale
        preds = y_mean + Xva @ (coefs * y_sd).T
        cv_sse += ((preds - y[va][:, None]) ** 2).sum(axis=0)
    cv_mse = cv_sse / n
    idx = _select_penalty(grid[:usable], cv_mse[:usable])
    model = fit_lasso_at(X, y, float(grid[idx]), tol, max_passes)
    model.diagnostics["cv_mse"] = cv_mse[:usable]
    model.diagnostics["grid"] = grid[:usable]
    return model


def kkt_residuals(model: LinearModel, X: np.ndarray, y: np.ndarray):
    """Stationarity residuals of a LASSO fit on the standardized scale.

    Returns (correlations, active_mask) where ``correlations[j] = Xs_j'r/n``;
    at an exact solution, inactive coordinates satisfy |corr| <= penalty and
    active ones satisfy corr = penalty * sign(coef).
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    Xs, mean, scale = _standardize_cols(X)
    w_std = model.coef * scale
    r = (y - y.mean()) - Xs @ w_std
    corr = Xs.T @ r / len(y)
    return corr, w_std != 0


def fit_ridge_multi(X: np.ndarray, Y: np.ndarray, alpha: float) -> MultiLinearModel:
    """Multi-output ridge regression on centered data.

    Solves (Xc'Xc + n*alpha*I) B = Xc'Yc column by column in one call;
    intercepts make predictions exact at the column means. ``alpha = 0``
    reduces to per-output least squares.
    """
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.asarray(Y, dtype=float).reshape(len(X), -1)
    n, p = X.shape
    x_mean = X.mean(axis=0)
    y_mean = Y.mean(axis=0)
    Xc = X - x_mean
    Yc = Y - y_mean
    A = Xc.T @ Xc + n * alpha * np.eye(p)
    rhs = Xc.T @ Yc
    if alpha == 0:
        B, _, _, _ = np.linalg.lstsq(A, rhs, rcond=None)
    else:
        B = np.linalg.solve(A, rhs)
    intercept = y_mean - x_mean @ B
    return MultiLinearModel(intercept=intercept, coef=B)


@dataclass(frozen=True)
class Projection:
    """Affine map ``apply(X) = X @ W.T + offset`` used as a linear encoder."""

    W: np.ndarray
    offset: np.ndarray
    explained_variance: np.ndarray | None = None

    @property
    def out_dim(self) -> int:
        return self.W.shape[0]

    def apply(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return X @ self.W.T + self.offset


def fit_pca(X: np.ndarray, d: int) -> Projection:
    """Top-``d`` principal directions of the centered matrix.

    Directions are orthonormal, ordered by decreasing explained variance,
    and sign-fixed so each direction's largest-magnitude loading is
    positive. If ``d`` exceeds the centered rank, the projection is
    truncated to the rank with a warning.
    """
    if d < 1:
        raise ValueError("d must be at least 1")
    X = np.atleast_2d(np.asarray(X, dtype=float))
    n, p = X.shape
    mean = X.mean(axis=0)
    Xc = X - mean
    _, s, Vt = np.linalg.svd(Xc, full_matrices=False)
    tol = s[0] * max(n, p) * np.finfo(float).eps if s.size else 0.0
    rank = int((s > tol).sum())
    if d > min(rank, p):
        warnings.warn(
            f"requested d={d} exceeds data rank {rank}; truncating", stacklevel=2
        )
        d = max(rank, 1)
    W = Vt[:d].copy()
    for i in range(d):
        j = np.argmax(np.abs(W[i]))
        if W[i, j] < 0:
            W[i] = -W[i]
    offset = -(mean @ W.T)
    return Projection(W=W, offset=offset, explained_variance=(s[:d] ** 2) / n)


def identity_projection(p: int) -> Projection:
    """The PCA-disabled encoder: pass-through of all ``p`` columns."""
    return Projection(W=np.eye(p), offset=np.zeros(p), explained_variance=None)


def build_rct_encoder_linear(
    os_projection: Projection,
    imputer: MultiLinearModel,
    layout: CovariateLayout,
) -> Projection:
    """Trial-side encoder matching "impute missing block, then project".

    Given the observational projection over (Z, V) columns and a ridge
    imputer Z -> V, returns the affine map on trial covariates (U, Z) whose
    output equals ``os_projection.apply([z, imputer.predict(z)])``. U
    columns receive zero weight by construction.
    """
    W = os_projection.W
    if W.shape[1] != layout.p_o:
        raise ValueError("projection width does not match the (Z, V) layout")
    if imputer.coef.shape != (layout.p_z, layout.p_v):
        raise ValueError("imputer must map the Z block to the V block")
    W_z = W[:, : layout.p_z]
    W_v = W[:, layout.p_z :]
    W_r = np.zeros((W.shape[0], layout.p_r))
    W_r[:, layout.p_u :] = W_z + W_v @ imputer.coef.T
    offset = os_projection.offset + W_v @ imputer.intercept
    return Projection(W=W_r, offset=offset, explained_variance=None)
