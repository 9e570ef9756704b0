"""subtraj: sub-trajectory discovery in longitudinal biomarker cohorts.

Fits a two-level mixture of increasing sigmoid trajectories over a common
disease time axis: the outer level decides, per biomarker, whether one
shared trajectory suffices or a pair of sub-trajectories is warranted
(with a split confidence); the inner level assigns each subject a
probability of belonging to either sub-population, consistently across
biomarkers. Includes a synthetic benchmark with controlled separation,
trajectory-set and clustering metrics, optional per-subject time-shift
estimation, and a command line interface.
"""

__version__ = "0.1.0"

from .model import (  # noqa: E402
    CohortData,
    DimensionMismatchError,
    Hyperparameters,
    ModelState,
    SigmoidParams,
    SubjectSeries,
    log_likelihood,
    log_posterior,
    series_loglik,
    sigmoid_eval,
)
from .em import (  # noqa: E402
    FitConfig,
    FitError,
    FittedModel,
    ResponsibilityTensor,
    e_step,
    estimate_membership,
    fit,
    initial_state,
    m_step_pi,
    m_step_sigma,
    m_step_theta,
    m_step_xi,
)
from .timeshift import ShiftEstimate, alternate_fit, estimate_time_shifts  # noqa: E402
from .simulate import (  # noqa: E402
    CalibrationError,
    GroundTruth,
    SyntheticConfig,
    calibrate_separation,
    curve_pair_mse,
    generate_dataset,
    sample_trajectory,
)
from .metrics import (  # noqa: E402
    CurveSet,
    RocResult,
    align_membership,
    membership_accuracy,
    ospa,
    roc_auc,
    sigma_relative_error,
    subdivision_table,
)
from .benchmark import (  # noqa: E402
    BenchmarkReport,
    CellSummary,
    DatasetResult,
    default_grid,
    estimated_curve_set,
    run_benchmark,
    score_fit,
)
from .estimator import SubtrajectoryMixture, cohort_from_frame  # noqa: E402

__all__ = [
    "BenchmarkReport",
    "CalibrationError",
    "CellSummary",
    "CohortData",
    "CurveSet",
    "DatasetResult",
    "DimensionMismatchError",
    "FitConfig",
    "FitError",
    "FittedModel",
    "GroundTruth",
    "Hyperparameters",
    "ModelState",
    "ResponsibilityTensor",
    "RocResult",
    "ShiftEstimate",
    "SigmoidParams",
    "SubjectSeries",
    "SubtrajectoryMixture",
    "SyntheticConfig",
    "align_membership",
    "alternate_fit",
    "calibrate_separation",
    "cohort_from_frame",
    "curve_pair_mse",
    "default_grid",
    "e_step",
    "estimate_membership",
    "estimate_time_shifts",
    "estimated_curve_set",
    "fit",
    "generate_dataset",
    "initial_state",
    "log_likelihood",
    "log_posterior",
    "m_step_pi",
    "m_step_sigma",
    "m_step_theta",
    "m_step_xi",
    "membership_accuracy",
    "ospa",
    "roc_auc",
    "run_benchmark",
    "sample_trajectory",
    "score_fit",
    "series_loglik",
    "sigma_relative_error",
    "sigmoid_eval",
    "subdivision_table",
    "__version__",
]
