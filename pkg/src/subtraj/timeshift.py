"""Per-subject time-shift estimation on the common disease time axis.

Visit ages only measure time since enrolment; the model lives on an
absolute progression axis. Each subject's translation onto that axis is
estimated by exhaustive grid search over a bounded window, maximising the
subject's mixture log-likelihood under the current fitted curves. Grid
search is used deliberately: the per-subject shift likelihood can be
multi-modal, and the window is small enough that exhaustive evaluation is
cheap and robust.

The model is invariant under a joint translation of all shifts and all
curve midpoints, so shifts are anchored to mean zero after every pass,
with the compensating translation applied to the curve midpoints.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.special import logsumexp

from .em import FitConfig, FittedModel, fit
from .model import (
    _LOG_2PI,
    CohortData,
    Hyperparameters,
    ModelState,
    _check_dimensions,
    _theta_stack,
    log_posterior,
)


@dataclass(frozen=True, eq=False)
class ShiftEstimate:
    """Per-subject time shifts plus the search window that produced them."""

    shifts: np.ndarray
    search_bounds: tuple[float, float]
    grid_step: float

    def __post_init__(self):
        shifts = np.asarray(self.shifts, dtype=float)
        object.__setattr__(self, "shifts", shifts)
        object.__setattr__(self, "search_bounds",
                           (float(self.search_bounds[0]), float(self.search_bounds[1])))
        object.__setattr__(self, "grid_step", float(self.grid_step))


def _candidate_grid(bounds: tuple[float, float], grid_step: float) -> np.ndarray:
    lo, hi = float(bounds[0]), float(bounds[1])
    if not grid_step > 0:
        raise ValueError("grid_step must be positive")
    if lo >= hi:
        raise ValueError(f"empty shift grid: lo={lo} >= hi={hi}")
    n = int(math.floor((hi - lo) / grid_step + 1e-9))
    return lo + grid_step * np.arange(n + 1)


def _subject_shift_scores(times, values, candidates, log_w, theta, sigma, granularity):
    """Mixture log-likelihood of one subject for every candidate shift.

    ``log_w`` is the (B, 3) matrix of log prior component weights for this
    subject; ``theta`` the stacked (3, B) curve parameter arrays.
    """
    a, r, c = theta
    t = times[None, :] + candidates[:, None]                    # (m, k)
    with np.errstate(over="ignore"):
        f = a / (1.0 + np.exp(-r * (t[:, :, None, None] - c)))  # (m, k, 3, B)
    x = values.T[None, :, None, :]                              # (1, k, 1, B)
    logpdf = -0.5 * _LOG_2PI - np.log(sigma) - 0.5 * np.square((x - f) / sigma)
    logpdf = np.where(np.isfinite(x), logpdf, 0.0)
    if granularity == "subject":
        series = logpdf.sum(axis=1)                             # (m, 3, B)
        return logsumexp(series + log_w.T[None, :, :], axis=1).sum(axis=1)
    mixed = logsumexp(logpdf + log_w.T[None, None, :, :], axis=2)  # (m, k, B)
    return mixed.sum(axis=(1, 2))


def _argmax_shifts(
    data: CohortData,
    state: ModelState,
    bounds: tuple[float, float],
    grid_step: float,
    granularity: str,
) -> np.ndarray:
    """Raw per-subject argmax shifts, before any mean anchoring.

    Candidates are the regular grid plus the subject's current shift, so
    the best candidate never scores below the current configuration. Ties
    go to the smaller absolute shift.
    """
    _check_dimensions(data, state)
    base_grid = _candidate_grid(bounds, grid_step)
    theta = _theta_stack(state)
    with np.errstate(divide="ignore"):
        log_xi = np.log(state.xi)
        log_not_xi = np.log1p(-state.xi)
        log_pi = np.log(state.pi)
        log_not_pi = np.log1p(-state.pi)
    shifts = np.empty(data.n_subjects)
    for j, series in enumerate(data.subjects):
        candidates = np.append(base_grid, data.time_shifts[j])
        order = np.lexsort((candidates, np.abs(candidates)))
        candidates = candidates[order]
        log_w = np.stack(
            [log_xi, log_not_xi + log_pi[j], log_not_xi + log_not_pi[j]], axis=1
        )  # (B, 3)
        scores = _subject_shift_scores(
            series.times, series.values, candidates, log_w, theta, state.sigma, granularity
        )
        shifts[j] = candidates[int(np.argmax(scores))]
    return shifts


def estimate_time_shifts(
    data: CohortData,
    state: ModelState,
    bounds: tuple[float, float] = (-10.0, 10.0),
    grid_step: float = 0.1,
    granularity: str = "subject",
) -> ShiftEstimate:
    """Grid-search each subject's time shift under the current model.

    Returns shifts re-centred to mean zero (shifts are identifiable only
    up to a common translation). Callers that keep a fitted state must
    translate its midpoints by the same centring offset to stay on the
    identical objective; ``alternate_fit`` does exactly that.
    """
    raw = _argmax_shifts(data, state, bounds, grid_step, granularity)
    return ShiftEstimate(shifts=raw - raw.mean(), search_bounds=bounds, grid_step=grid_step)


def alternate_fit(
    data: CohortData,
    hyper: Hyperparameters | None = None,
    config: FitConfig | None = None,
    outer_rounds: int = 3,
    bounds: tuple[float, float] = (-10.0, 10.0),
    grid_step: float = 0.1,
    n_jobs: int | None = None,
) -> tuple[FittedModel, ShiftEstimate]:
    """Alternate full model fits with time-shift re-estimation.

    Round one runs the multi-restart fit as configured; later rounds
    warm-start a single EM run from the previous state. Every half-step
    maximises the same objective over its own block, so the objective
    trace concatenated over rounds (with the value recorded after each
    shift pass) is non-decreasing. After each shift pass the shifts are
    anchored to mean zero and the midpoints translated to compensate,
    which leaves the objective unchanged.
    """
    if outer_rounds < 1:
        raise ValueError("outer_rounds must be >= 1")
    if hyper is None:
        hyper = Hyperparameters.from_cohort_size(data.n_subjects)
    if config is None:
        config = FitConfig()
    shifts = np.asarray(data.time_shifts, dtype=float)
    trace_parts: list[np.ndarray] = []
    model: FittedModel | None = None
    restart_index = 0
    for round_idx in range(outer_rounds):
        shifted = data.with_shifts(shifts)
        round_config = config if round_idx == 0 else replace(
            config, restarts=1, init_overrides=model.state
        )
        model = fit(shifted, hyper, round_config, n_jobs=n_jobs)
        if round_idx == 0:
            restart_index = model.restart_index
        trace_parts.append(model.objective_trace)

        raw = _argmax_shifts(shifted, model.state, bounds, grid_step, hyper.granularity)
        centre = float(raw.mean())
        shifts = raw - centre
        state = model.state.translate_midpoints(-centre)
        model = FittedModel(
            state=state,
            objective_trace=model.objective_trace,
            converged=model.converged,
            restart_index=model.restart_index,
        )
        post_shift = log_posterior(data.with_shifts(shifts), state, hyper)
        trace_parts.append(np.array([post_shift]))

    full_trace = np.concatenate(trace_parts)
    final = FittedModel(
        state=model.state,
        objective_trace=full_trace,
        converged=model.converged,
        restart_index=restart_index,
    )
    return final, ShiftEstimate(shifts=shifts, search_bounds=bounds, grid_step=grid_step)
