"""Pooled categorical-biomarker analysis for matched case-control studies.

Estimates category-level biomarker-disease associations from pooled
matched/nested case-control studies whose biomarker assays differ across
laboratories.  Study-specific multinomial-logistic calibration models map
local measurements onto reference-laboratory categories; the association is
then estimated by a pseudo-likelihood that marginalizes each matched set
over the unobserved categories, with a stacked sandwich variance estimator
accounting for the calibration step.
"""

__version__ = "0.1.0"

from .calibration import (
    CalibrationModel,
    LinearCalibrationModel,
    StudyCalibration,
    fit_all_calibrations,
    fit_calibration,
    fit_linear_calibration,
    fit_multinomial_logit,
    predict_category_probs,
)
from .data import (
    CategoryScheme,
    Participant,
    PooledDataset,
    Stratum,
    Study,
    categorize,
    indicator_vector,
    load_dataset,
    save_dataset,
)
from .errors import (
    CalibrationError,
    EnumerationLimitError,
    PoolcalError,
    RankDefectError,
    SeparationError,
    ValidationError,
)
from .inference import (
    FitResult,
    clr_fit,
    fit_pooled,
    linear_calibration_fit,
    naive_fit,
    sandwich_covariance,
)
from .likelihood import (
    FULL,
    INTERNALIZED,
    Beta,
    PooledObjective,
    build_prob_tables,
    clr_stratum_loglik,
    pooled_logpseudolik,
    pooled_score,
    pseudo_stratum_loglik,
)
from .simulation import (
    DatasetTruth,
    ScenarioConfig,
    SimulationReport,
    mc_standard_error,
    run_simulation,
    simulate_dataset,
)

__all__ = [
    "__version__",
    "Beta",
    "CalibrationError",
    "CalibrationModel",
    "CategoryScheme",
    "DatasetTruth",
    "EnumerationLimitError",
    "FitResult",
    "FULL",
    "INTERNALIZED",
    "LinearCalibrationModel",
    "Participant",
    "PooledDataset",
    "PooledObjective",
    "PoolcalError",
    "RankDefectError",
    "ScenarioConfig",
    "SeparationError",
    "SimulationReport",
    "Stratum",
    "Study",
    "StudyCalibration",
    "ValidationError",
    "build_prob_tables",
    "categorize",
    "clr_fit",
    "clr_stratum_loglik",
    "fit_all_calibrations",
    "fit_calibration",
    "fit_linear_calibration",
    "fit_multinomial_logit",
    "fit_pooled",
    "indicator_vector",
    "linear_calibration_fit",
    "load_dataset",
    "mc_standard_error",
    "naive_fit",
    "pooled_logpseudolik",
    "pooled_score",
    "predict_category_probs",
    "pseudo_stratum_loglik",
    "run_simulation",
    "sandwich_covariance",
    "save_dataset",
    "simulate_dataset",
]
