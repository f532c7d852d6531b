"""fanfever: latent arousal dynamics for wearable fan panels.

A structural-equation-modeling engine for intensive longitudinal
two-indicator panels (heart rate and device stress level on a 34-point
match grid): piecewise latent growth, AR(1) latent residuals, structured
measurement errors, maximum-likelihood estimation over multiply-imputed
datasets, Rubin-pooled inference, and dimension-corrected fit assessment,
plus a simulator providing ground-truth oracles.
"""

__version__ = "0.1.0"

from .model import (
    BaselineParameterVector,
    ModelDefinition,
    ParameterVector,
    TimeGrid,
    Variant,
    degrees_of_freedom,
    parameter_count,
    trend_loadings,
)
from .moments import (
    ImpliedMoments,
    ar_covariance,
    ar_variances,
    baseline_implied_moments,
    error_covariance,
    expected_fever,
    implied_moments,
    latent_covariance,
)

__all__ = [
    "__version__",
    "TimeGrid",
    "ParameterVector",
    "BaselineParameterVector",
    "ModelDefinition",
    "Variant",
    "trend_loadings",
    "parameter_count",
    "degrees_of_freedom",
    "ImpliedMoments",
    "ar_variances",
    "ar_covariance",
    "latent_covariance",
    "expected_fever",
    "error_covariance",
    "implied_moments",
    "baseline_implied_moments",
]
