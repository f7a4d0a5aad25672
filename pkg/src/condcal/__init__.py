"""Conditional conformal prediction with guarantees over classes of covariate shifts."""

from .core import (
    BasisSpec,
    CalibrationSet,
    Column,
    GroupPredicate,
    KernelSpec,
    LipschitzSpec,
    PredictionInterval,
    ScoreFunction,
    ValidationError,
    evaluate_basis,
    evaluate_score,
    interval_groups,
    split_conformal_threshold,
)
from .calibrate import (
    CalibratedModel,
    RandomDraw,
    ThresholdResult,
    conservative_threshold,
    eta_at,
    fit_model,
    fit_two_sided,
    predict_set,
    predict_two_sided,
    threshold_binary_search,
    threshold_sensitivity,
)
from .estimate import (
    CoverageEstimate,
    TiltSpec,
    cross_validate_lambda,
    lipschitz_coverage_bounds,
    rkhs_coverage_estimate,
)
from .qr_solver import SolverError

__version__ = "0.1.0"

__all__ = [
    "BasisSpec",
    "CalibratedModel",
    "CalibrationSet",
    "Column",
    "CoverageEstimate",
    "GroupPredicate",
    "KernelSpec",
    "LipschitzSpec",
    "PredictionInterval",
    "RandomDraw",
    "ScoreFunction",
    "SolverError",
    "ThresholdResult",
    "TiltSpec",
    "ValidationError",
    "conservative_threshold",
    "cross_validate_lambda",
    "eta_at",
    "evaluate_basis",
    "evaluate_score",
    "fit_model",
    "fit_two_sided",
    "interval_groups",
    "lipschitz_coverage_bounds",
    "predict_set",
    "predict_two_sided",
    "rkhs_coverage_estimate",
    "split_conformal_threshold",
    "threshold_binary_search",
    "threshold_sensitivity",
]
