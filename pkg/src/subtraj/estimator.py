"""Scikit-learn style front end for the trajectory mixture."""

from __future__ import annotations

import numbers

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .em import FitConfig, estimate_membership, fit as em_fit
from .model import CohortData, Hyperparameters, ModelState, SubjectSeries, log_likelihood
from .timeshift import alternate_fit


def as_cohort(X) -> CohortData:
    """Coerce estimator input into a cohort.

    Accepts a ``CohortData`` directly, or a pandas DataFrame in the wide
    cohort layout (``subject_id``, ``time``, one column per biomarker,
    optional ``label``).
    """
    if isinstance(X, CohortData):
        return X
    try:
        import pandas as pd
    except ImportError:  # pragma: no cover - pandas is a hard dependency
        pd = None
    if pd is not None and isinstance(X, pd.DataFrame):
        return cohort_from_frame(X)
    raise TypeError(
        "X must be a CohortData or a wide-format pandas DataFrame "
        f"(got {type(X).__name__})"
    )


def cohort_from_frame(frame, label_column: str = "label") -> CohortData:
    """Build a cohort from a wide DataFrame (same layout as the CSV format)."""
    required = {"subject_id", "time"}
    missing = required - set(frame.columns)
    if missing:
        raise ValueError(f"DataFrame is missing columns: {sorted(missing)}")
    biomarkers = [c for c in frame.columns
                  if c not in required and c != label_column]
    if not biomarkers:
        raise ValueError("DataFrame has no biomarker columns")
    subjects = []
    for sid, group in frame.groupby("subject_id", sort=False):
        group = group.sort_values("time")
        label = None
        if label_column in frame.columns:
            non_null = group[label_column].dropna()
            if len(non_null):
                label = str(non_null.iloc[-1])
        subjects.append(SubjectSeries(
            subject_id=str(sid),
            times=group["time"].to_numpy(dtype=float),
            values=group[biomarkers].to_numpy(dtype=float).T,
            label=label,
        ))
    return CohortData(subjects=tuple(subjects), biomarker_names=tuple(biomarkers))


class SubtrajectoryMixture(BaseEstimator):
    """Two-level mixture of sigmoid trajectories over a disease time axis.

    Fitting estimates, per biomarker, a shared trajectory plus an optional
    pair of sub-trajectories with a split confidence, and per subject a
    sub-population membership probability shared across biomarkers.

    Parameters
    ----------
    beta : float or None
        Strength of the split penalty; ``None`` uses 15% of the subject
        count.
    beta_noise : float or None
        Strength of the noise prior; ``None`` uses 15% of the subject
        count (floored just above 1).
    granularity : {"subject", "observation"}
        Whether a latent component assignment ties together a subject's
        whole series or each single visit.
    n_restarts : int
        Independent EM restarts; the best final objective wins.
    max_iter : int
        EM iteration cap per restart.
    tol : float
        Relative objective change declaring convergence.
    estimate_shifts : bool
        Alternate fitting with per-subject time-shift estimation.
    shift_window : float
        Half-width of the shift search window (years).
    shift_step : float
        Shift grid resolution.
    n_rounds : int
        Fit/shift alternation rounds when ``estimate_shifts`` is set.
    n_jobs : int or None
        Parallel workers for restarts (joblib).
    random_state : int or None
        Seed for the restart initialisations.
    init_state : ModelState or None
        Explicit starting state for the first restart.

    Attributes
    ----------
    state_ : ModelState
        Full fitted parameter set.
    split_confidence_ : ndarray of shape (B,)
        Per-biomarker confidence that a sub-trajectory pair exists.
    pi_ : ndarray of shape (J,)
        Per-subject probability of sub-population 1.
    labels_ : ndarray of shape (J,)
        Hard sub-population assignment (0 = sub-population 1).
    shifts_ : ndarray of shape (J,)
        Estimated (or inherited) time shifts.
    objective_trace_ : ndarray
        Penalised objective per EM iteration of the winning run.
    """

    def __init__(
        self,
        *,
        beta: float | None = None,
        beta_noise: float | None = None,
        granularity: str = "subject",
        n_restarts: int = 3,
        max_iter: int = 500,
        tol: float = 1e-6,
        estimate_shifts: bool = False,
        shift_window: float = 10.0,
        shift_step: float = 0.1,
        n_rounds: int = 3,
        n_jobs: int | None = None,
        random_state: int | None = None,
        init_state=None,
    ):
        self.beta = beta
        self.beta_noise = beta_noise
        self.granularity = granularity
        self.n_restarts = n_restarts
        self.max_iter = max_iter
        self.tol = tol
        self.estimate_shifts = estimate_shifts
        self.shift_window = shift_window
        self.shift_step = shift_step
        self.n_rounds = n_rounds
        self.n_jobs = n_jobs
        self.random_state = random_state
        self.init_state = init_state

    def _hyper(self, data: CohortData) -> Hyperparameters:
        default = Hyperparameters.from_cohort_size(data.n_subjects, self.granularity)
        return Hyperparameters(
            beta=default.beta if self.beta is None else self.beta,
            beta_noise=default.beta_noise if self.beta_noise is None else self.beta_noise,
            granularity=self.granularity,
        )

    def _seed(self) -> int:
        if self.random_state is None:
            return int(np.random.SeedSequence().generate_state(1)[0])
        if isinstance(self.random_state, numbers.Integral):
            return int(self.random_state)
        raise ValueError("random_state must be an int or None")

    def fit(self, X, y=None):
        """Fit the mixture to a cohort (``y`` is ignored)."""
        data = as_cohort(X)
        hyper = self._hyper(data)
        config = FitConfig(
            max_iterations=self.max_iter,
            tolerance=self.tol,
            restarts=self.n_restarts,
            rng_seed=self._seed(),
            init_overrides=self.init_state,
        )
        if self.estimate_shifts:
            model, estimate = alternate_fit(
                data, hyper, config,
                outer_rounds=self.n_rounds,
                bounds=(-self.shift_window, self.shift_window),
                grid_step=self.shift_step,
                n_jobs=self.n_jobs,
            )
            shifts = estimate.shifts
        else:
            model = em_fit(data, hyper, config, n_jobs=self.n_jobs)
            shifts = np.asarray(data.time_shifts)

        self.hyper_ = hyper
        self.result_ = model
        self.state_ = model.state
        self.biomarker_names_ = data.biomarker_names
        self.subject_ids_ = data.subject_ids
        self.sigma_ = model.state.sigma
        self.xi_ = model.state.xi
        self.split_confidence_ = model.state.split_confidence
        self.pi_ = model.state.pi
        self.labels_ = np.where(model.state.pi >= 0.5, 0, 1)
        self.shifts_ = shifts
        self.objective_trace_ = model.objective_trace
        self.converged_ = model.converged
        self.n_iter_ = model.n_iterations
        self.restart_index_ = model.restart_index
        return self

    def predict_proba(self, X=None) -> np.ndarray:
        """Sub-population probabilities, columns (sub-pop 1, sub-pop 2).

        With ``X=None`` returns the fitted memberships; otherwise
        memberships are inferred for the given cohort under the frozen
        fitted curves.
        """
        check_is_fitted(self, "state_")
        if X is None:
            pi = self.pi_
        else:
            data = as_cohort(X)
            pi = estimate_membership(data, self.state_, self.hyper_)
        return np.column_stack([pi, 1.0 - pi])

    def predict(self, X=None) -> np.ndarray:
        """Hard sub-population assignment (0 = sub-population 1)."""
        proba = self.predict_proba(X)
        return np.where(proba[:, 0] >= 0.5, 0, 1)

    def score(self, X, y=None) -> float:
        """Mean per-subject mixture log-likelihood under the fitted state.

        New cohorts are scored with memberships inferred under the frozen
        curves; time shifts are taken from the cohort itself.
        """
        check_is_fitted(self, "state_")
        data = as_cohort(X)
        pi = estimate_membership(data, self.state_, self.hyper_)
        eval_state = ModelState(self.state_.shared, self.state_.sub1, self.state_.sub2,
                                self.state_.sigma, self.state_.xi, pi)
        return log_likelihood(data, eval_state, self.hyper_) / data.n_subjects
