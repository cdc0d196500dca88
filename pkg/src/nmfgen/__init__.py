"""Non-negative matrix factorization under Normal, Poisson, Tweedie and negative binomial models."""

from .deviance import (
    SeriesConvergenceError,
    SupportError,
    UnsupportedDensityError,
    divergence,
    log_likelihood,
    negbin_divergence,
    negbin_logpmf,
    tweedie_divergence,
    tweedie_log_density,
    unit_deviance,
)
from .diagnose import FitReport, bic, cosine_similarity, fit_report, match_features, residual_table, top_entries
from .estimate import ResolvedFit, estimate_alpha, estimate_power, fit_model, resolve_cost
from .factorize import Factorization, FitConfig, fit
from .io import load_matrix
from .model import (
    CostModel,
    DataMatrix,
    Family,
    ModelSpec,
    ModelSpecError,
    Storage,
    Variant,
    format_model_spec,
    free_parameter_count,
    parse_model_spec,
)
from .synth import synth

__version__ = "0.1.0"

__all__ = [
    "CostModel", "DataMatrix", "Factorization", "Family", "FitConfig", "FitReport", "ModelSpec",
    "ModelSpecError", "ResolvedFit", "SeriesConvergenceError", "Storage", "SupportError",
    "UnsupportedDensityError", "Variant", "bic", "cosine_similarity", "divergence", "estimate_alpha",
    "estimate_power", "fit", "fit_model", "fit_report", "format_model_spec", "free_parameter_count",
    "load_matrix", "log_likelihood", "match_features", "negbin_divergence", "negbin_logpmf",
    "parse_model_spec", "residual_table", "resolve_cost", "synth", "top_entries", "tweedie_divergence",
    "tweedie_log_density", "unit_deviance",
]
