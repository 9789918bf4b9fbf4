"""Innovation estimators for continuous-discrete SDE models with LL filters."""

__version__ = "0.1.0"

from .estimator import EstimationError, EstimationResult, Mode, OptimizerSettings, estimate, innovation_nll
from .filter import FilterConfig, FilterError, FilterTrace, exact_lmv_filter, run_filter
from .llmoments import MomentState, predict_step
from .model import (InitialCondition, ObservationModel, ObservationSeries, SdeModel, TimeGrid,
                    validate_model)
from .registry import exact_moment_oracle, test_model

__all__ = [
    "EstimationError", "EstimationResult", "FilterConfig", "FilterError", "FilterTrace",
    "InitialCondition", "Mode", "MomentState", "ObservationModel", "ObservationSeries",
    "OptimizerSettings", "SdeModel", "TimeGrid", "estimate", "exact_lmv_filter",
    "exact_moment_oracle", "innovation_nll", "predict_step", "run_filter", "test_model",
    "validate_model",
]
