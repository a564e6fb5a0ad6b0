"""Containers and small utilities shared by every stage of the pipeline:
covariate layouts, immutable datasets, propensity models, folds, and scaling."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

SOURCE_OS = "os"
SOURCE_RCT = "rct"
SOURCES = (SOURCE_OS, SOURCE_RCT)

TREATMENT_VALUES = (-1, 1)

# Columns with standard deviation at or below this are treated as constant.
CONSTANT_SD_TOL = 1e-12


@dataclass(frozen=True)
class CovariateLayout:
    """Dimensions of the three covariate blocks.

    The trial measures (U, Z) in that column order; the observational study
    measures (Z, V). Z is the shared block.

    Parameters
    ----------
    p_u : int
        Trial-only block width (may be zero).
    p_z : int
        Shared block width (at least one).
    p_v : int
        Observational-only block width (may be zero).
    """

    p_u: int
    p_z: int
    p_v: int

    def __post_init__(self):
        if self.p_z < 1:
            raise ValueError(f"p_z must be >= 1, got {self.p_z}")
        if self.p_u < 0 or self.p_v < 0:
            raise ValueError("block widths must be non-negative")

    @property
    def p_r(self) -> int:
        return self.p_u + self.p_z

    @property
    def p_o(self) -> int:
        return self.p_z + self.p_v

    @property
    def p(self) -> int:
        return self.p_u + self.p_z + self.p_v

    def n_cols(self, source: str) -> int:
        _check_source(source)
        return self.p_r if source == SOURCE_RCT else self.p_o

    def z_slice(self, source: str) -> slice:
        """Column slice of the shared block within a source's design matrix."""
        _check_source(source)
        if source == SOURCE_RCT:
            return slice(self.p_u, self.p_u + self.p_z)
        return slice(0, self.p_z)

    def u_slice(self) -> slice:
        return slice(0, self.p_u)

    def v_slice(self) -> slice:
        return slice(self.p_z, self.p_z + self.p_v)


def _check_source(source: str):
    if source not in SOURCES:
        raise ValueError(f"source must be one of {SOURCES}, got {source!r}")


def _readonly(arr: np.ndarray) -> np.ndarray:
    out = np.array(arr, dtype=float, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class Dataset:
    """One source's sample: covariates, outcomes, treatments.

    Parameters
    ----------
    X : ndarray of shape (n, p_source)
        Design matrix in the source's column order.
    y : ndarray of shape (n,)
        Observed outcomes.
    a : ndarray of shape (n,)
        Treatments coded in {-1, +1}.
    source : str
        Either ``"rct"`` or ``"os"``.
    layout : CovariateLayout

    Raises
    ------
    ValueError
        On shape mismatch, non-finite entries, treatments outside {-1, +1},
        or a column count that contradicts the layout.
    """

    X: np.ndarray
    y: np.ndarray
    a: np.ndarray
    source: str
    layout: CovariateLayout

    def __post_init__(self):
        _check_source(self.source)
        X = _readonly(np.atleast_2d(self.X))
        y = _readonly(np.asarray(self.y, dtype=float).ravel())
        a = np.asarray(self.a)
        if not np.isin(a, TREATMENT_VALUES).all():
            raise ValueError("treatments must be coded in {-1, +1}")
        a = _readonly(a)
        if X.ndim != 2:
            raise ValueError("X must be two-dimensional")
        n = X.shape[0]
        if y.shape[0] != n or a.shape[0] != n:
            raise ValueError(
                f"row mismatch: X has {n} rows, y has {y.shape[0]}, a has {a.shape[0]}"
            )
        if not (np.isfinite(X).all() and np.isfinite(y).all()):
            raise ValueError("X and y must be finite")
        expected = self.layout.n_cols(self.source)
        if X.shape[1] != expected:
            raise ValueError(
                f"{self.source} data must have {expected} columns per layout, "
                f"got {X.shape[1]}"
            )
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "a", a)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    def arm(self, a: int) -> np.ndarray:
        """Boolean row mask of units assigned treatment ``a``."""
        if a not in TREATMENT_VALUES:
            raise ValueError(f"treatment must be in {TREATMENT_VALUES}")
        return self.a == a


def shared_block(data: Dataset) -> np.ndarray:
    """Return the Z columns of a dataset, in the shared column order."""
    return data.X[:, data.layout.z_slice(data.source)]


class PropensityModel:
    """Treatment-assignment probabilities for A in {-1, +1}.

    Parameters
    ----------
    treat_prob : float or ndarray
        P(A = +1 | x), either a known constant (randomized trials) or one
        value per unit of the dataset it describes.
    positivity : float
        Required margin rho: every probability must lie in [rho, 1 - rho].
    """

    def __init__(self, treat_prob, positivity: float = 0.01):
        if not 0 < positivity < 0.5:
            raise ValueError("positivity margin must be in (0, 0.5)")
        p = np.asarray(treat_prob, dtype=float)
        if p.ndim > 1:
            raise ValueError("treat_prob must be scalar or one-dimensional")
        if np.any(p < positivity) or np.any(p > 1 - positivity):
            raise ValueError(
                f"propensities violate positivity margin {positivity}"
            )
        self.positivity = positivity
        self._p = p

    @property
    def is_constant(self) -> bool:
        return self._p.ndim == 0

    def treat_prob(self, n: int) -> np.ndarray:
        """P(A = +1) per unit, broadcast to length ``n``."""
        if self.is_constant:
            return np.full(n, float(self._p))
        if self._p.shape[0] != n:
            raise ValueError(f"stored propensities have length {self._p.shape[0]}, need {n}")
        return self._p.copy()

    def prob_of(self, a: np.ndarray) -> np.ndarray:
        """P(A = a_i) for each unit's realized treatment."""
        a = np.asarray(a)
        p1 = self.treat_prob(a.shape[0])
        return np.where(a == 1, p1, 1.0 - p1)


@dataclass(frozen=True)
class FoldAssignment:
    """A K-way partition of unit indices 0..n-1."""

    n: int
    fold_of: np.ndarray = field(repr=False)

    def __post_init__(self):
        object.__setattr__(self, "fold_of", _readonly_int(self.fold_of))

    @property
    def n_folds(self) -> int:
        return int(self.fold_of.max()) + 1

    def fold_indices(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.fold_of == k)

    def train_indices(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.fold_of != k)


def _readonly_int(arr) -> np.ndarray:
    out = np.array(arr, dtype=np.int64, copy=True)
    out.setflags(write=False)
    return out


def derive_seed(base: int, *parts) -> int:
    """Deterministic sub-seed for a named stage of a computation.

    Hash-based so distinct (base, parts) tuples never collide in practice,
    unlike arithmetic offsets which alias across replicates.
    """
    digest = hashlib.blake2b(
        repr((int(base), *parts)).encode(), digest_size=8
    ).digest()
    return int.from_bytes(digest, "little")


def make_folds(n: int, n_folds: int, seed: int) -> FoldAssignment:
    """Randomly partition ``n`` units into folds of near-equal size.

    Fold sizes differ by at most one; the assignment is a deterministic
    function of ``seed``.
    """
    if n_folds < 2:
        raise ValueError("need at least two folds")
    if n_folds > n:
        raise ValueError(f"cannot split {n} units into {n_folds} folds")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    fold_of = np.empty(n, dtype=np.int64)
    base, extra = divmod(n, n_folds)
    start = 0
    for k in range(n_folds):
        size = base + (1 if k < extra else 0)
        fold_of[perm[start:start + size]] = k
        start += size
    return FoldAssignment(n=n, fold_of=fold_of)


@dataclass(frozen=True)
class ScalerParams:
    mean: np.ndarray
    scale: np.ndarray
    constant_mask: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mean", _readonly(self.mean))
        object.__setattr__(self, "scale", _readonly(self.scale))
        mask = np.array(self.constant_mask, dtype=bool, copy=True)
        mask.setflags(write=False)
        object.__setattr__(self, "constant_mask", mask)


class ColumnScaler:
    """Column-wise standardization fit on a training matrix.

    Means and population standard deviations come from the fitted matrix.
    Constant columns (sd <= 1e-12) are flagged: they are centered but not
    divided, so a standardized constant column is identically zero.
    """

    def __init__(self):
        self.params_: ScalerParams | None = None

    def fit(self, X: np.ndarray) -> "ColumnScaler":
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[0] < 1:
            raise ValueError("cannot fit a scaler on an empty matrix")
        mean = X.mean(axis=0)
        sd = X.std(axis=0)
        constant = sd <= CONSTANT_SD_TOL
        scale = np.where(constant, 1.0, sd)
        self.params_ = ScalerParams(mean=mean, scale=scale, constant_mask=constant)
        return self

    def transform(self, X: np.ndarray) -> np.ndarray:
        p = self._require_fit()
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return (X - p.mean) / p.scale

    def fit_transform(self, X: np.ndarray) -> np.ndarray:
        return self.fit(X).transform(X)

    def inverse_transform(self, X: np.ndarray) -> np.ndarray:
        p = self._require_fit()
        return np.atleast_2d(np.asarray(X, dtype=float)) * p.scale + p.mean

    def _require_fit(self) -> ScalerParams:
        if self.params_ is None:
            raise RuntimeError("scaler is not fitted")
        return self.params_


def standardize(X: np.ndarray) -> tuple[ScalerParams, ColumnScaler]:
    """Fit a scaler on ``X`` and return (params, transform)."""
    scaler = ColumnScaler().fit(X)
    return scaler.params_, scaler
