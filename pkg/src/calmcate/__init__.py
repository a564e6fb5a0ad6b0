"""Calibrated borrowing of observational data for CATE estimation under
covariate mismatch: data generators, estimators, and a sweep harness."""

from calmcate.data import (
    ColumnScaler,
    CovariateLayout,
    Dataset,
    FoldAssignment,
    PropensityModel,
    ScalerParams,
    derive_seed,
    make_folds,
    shared_block,
    standardize,
)

__version__ = "0.1.0"

__all__ = [
    "ColumnScaler",
    "CovariateLayout",
    "Dataset",
    "FoldAssignment",
    "PropensityModel",
    "ScalerParams",
    "derive_seed",
    "make_folds",
    "shared_block",
    "standardize",
    "__version__",
]
