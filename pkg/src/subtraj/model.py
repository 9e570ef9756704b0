"""Core model types and exact evaluation of the mixture objective.

The generative model: each biomarker ``b`` follows either one shared
increasing sigmoid trajectory (with probability ``xi_b``) or, with
probability ``1 - xi_b``, a pair of sub-trajectories; in the latter case
subject ``j`` is drawn from sub-trajectory 1 with probability ``pi_j``
(shared across biomarkers). Observations carry additive Gaussian noise
with a per-biomarker standard deviation ``sigma_b``.

The fitted objective is the log-likelihood of this two-level mixture plus
two penalty terms: ``beta * sum_b xi_b`` (a truncated Laplace prior on
``xi_b`` with mode 1, discouraging spurious splits) and
``-beta_noise * sum_b (log sigma_b + 1 / sigma_b)`` (an inverse-gamma
prior keeping noise estimates away from zero).

All mixture sums are evaluated in log-space with log-sum-exp.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.special import logsumexp

_LOG_2PI = math.log(2.0 * math.pi)

GRANULARITIES = ("subject", "observation")


class DimensionMismatchError(ValueError):
    """Model state dimensions do not match the cohort."""


@dataclass(frozen=True)
class SigmoidParams:
    """Parameters of one increasing sigmoid ``a / (1 + exp(-r * (t - c)))``.

    Attributes
    ----------
    supremum : float
        Upper asymptote ``a``, strictly positive (biomarker units).
    growth_rate : float
        Rate ``r``, strictly positive (1 / time units).
    midpoint : float
        Inflection time ``c`` where the curve crosses ``a / 2``.
    """

    supremum: float
    growth_rate: float
    midpoint: float

    def __post_init__(self):
        for name in ("supremum", "growth_rate", "midpoint"):
            v = float(getattr(self, name))
            if not math.isfinite(v):
                raise ValueError(f"{name} must be finite, got {v}")
            object.__setattr__(self, name, v)
        if self.supremum <= 0:
            raise ValueError(f"supremum must be positive, got {self.supremum}")
        if self.growth_rate <= 0:
            raise ValueError(f"growth_rate must be positive, got {self.growth_rate}")

    def translated(self, delta: float) -> "SigmoidParams":
        """Same curve shifted along the time axis by ``delta``."""
        return replace(self, midpoint=self.midpoint + delta)


def sigmoid_eval(params: SigmoidParams, t):
    """Evaluate the sigmoid at time(s) ``t``.

    Strictly increasing in ``t`` with range ``(0, supremum)``; exponent
    overflow/underflow saturates to the asymptotes.
    """
    t_arr = np.asarray(t, dtype=float)
    with np.errstate(over="ignore"):
        out = params.supremum / (1.0 + np.exp(-params.growth_rate * (t_arr - params.midpoint)))
    if np.isscalar(t) or t_arr.ndim == 0:
        return float(out)
    return out


def _curve_matrix(curves, t):
    """Evaluate a sequence of B sigmoids on times ``t`` -> array (len(t), B)."""
    a = np.array([c.supremum for c in curves])
    r = np.array([c.growth_rate for c in curves])
    c = np.array([c.midpoint for c in curves])
    t = np.asarray(t, dtype=float)
    with np.errstate(over="ignore"):
        return a / (1.0 + np.exp(-r * (t[:, None] - c)))


def series_loglik(times, values, params: SigmoidParams, sigma: float) -> float:
    """Gaussian log-likelihood of one subject's series for one biomarker.

    Missing values (NaN) are skipped; an empty series contributes 0.
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    if times.shape != values.shape:
        raise ValueError("times and values must have the same length")
    mask = np.isfinite(values)
    if not mask.any():
        return 0.0
    resid = values[mask] - sigmoid_eval(params, times[mask])
    n = resid.size
    return float(-0.5 * n * _LOG_2PI - n * math.log(sigma) - 0.5 * np.sum((resid / sigma) ** 2))


@dataclass(frozen=True, eq=False)
class SubjectSeries:
    """Longitudinal observations of one subject across all biomarkers.

    ``values`` has shape (B, k): one row per biomarker, aligned with
    ``times`` (length k). NaN marks a missing measurement. ``label`` is an
    optional clinical category carried through for cross-tabulation.
    """

    subject_id: str
    times: np.ndarray
    values: np.ndarray
    label: str | None = None

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        values = np.atleast_2d(np.asarray(self.values, dtype=float))
        if times.ndim != 1:
            raise ValueError("times must be one-dimensional")
        if values.shape[1] != times.size:
            raise ValueError(
                f"subject {self.subject_id!r}: values have {values.shape[1]} "
                f"columns but there are {times.size} times"
            )
        if not np.all(np.isfinite(times)):
            raise ValueError(f"subject {self.subject_id!r}: non-finite time")
        if np.any(np.diff(times) < 0):
            raise ValueError(f"subject {self.subject_id!r}: times must be sorted")
        if not np.isfinite(values).any():
            raise ValueError(f"subject {self.subject_id!r}: no observed values")
        times = times.copy()
        values = values.copy()
        times.flags.writeable = False
        values.flags.writeable = False
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)

    @property
    def n_visits(self) -> int:
        return self.times.size


@dataclass(frozen=True, eq=False)
class CohortData:
    """A cohort of subjects measured on a common biomarker panel.

    ``time_shifts`` holds the per-subject translation mapping visit times
    onto the common disease time axis; the model always evaluates curves
    at ``times + shift``. Zero shifts mean the recorded times already live
    on that axis.
    """

    subjects: tuple[SubjectSeries, ...]
    biomarker_names: tuple[str, ...]
    time_shifts: np.ndarray | None = None

    def __post_init__(self):
        subjects = tuple(self.subjects)
        names = tuple(str(n) for n in self.biomarker_names)
        if not subjects:
            raise ValueError("cohort has no subjects")
        if not names:
            raise ValueError("cohort has no biomarkers")
        ids = [s.subject_id for s in subjects]
        if len(set(ids)) != len(ids):
            raise ValueError("subject_id values must be unique")
        for s in subjects:
            if s.values.shape[0] != len(names):
                raise ValueError(
                    f"subject {s.subject_id!r} has {s.values.shape[0]} biomarker "
                    f"rows, expected {len(names)}"
                )
        shifts = self.time_shifts
        if shifts is None:
            shifts = np.zeros(len(subjects))
        shifts = np.asarray(shifts, dtype=float).copy()
        if shifts.shape != (len(subjects),):
            raise ValueError("time_shifts must have one entry per subject")
        shifts.flags.writeable = False
        object.__setattr__(self, "subjects", subjects)
        object.__setattr__(self, "biomarker_names", names)
        object.__setattr__(self, "time_shifts", shifts)

    @property
    def n_subjects(self) -> int:
        return len(self.subjects)

    @property
    def n_biomarkers(self) -> int:
        return len(self.biomarker_names)

    @property
    def subject_ids(self) -> tuple[str, ...]:
        return tuple(s.subject_id for s in self.subjects)

    @property
    def labels(self) -> tuple[str | None, ...]:
        return tuple(s.label for s in self.subjects)

    def with_shifts(self, shifts) -> "CohortData":
        return CohortData(self.subjects, self.biomarker_names, np.asarray(shifts, dtype=float))

    def value_std(self) -> np.ndarray:
        """Per-biomarker standard deviation of observed values (floored at 1e-6)."""
        stacked = np.concatenate([s.values for s in self.subjects], axis=1)
        with np.errstate(invalid="ignore"):
            std = np.nanstd(stacked, axis=1)
        return np.maximum(np.nan_to_num(std), 1e-6)

    def time_span(self) -> tuple[float, float]:
        """Range of shifted observation times across the cohort."""
        lo = min(float(s.times.min()) + d for s, d in zip(self.subjects, self.time_shifts))
        hi = max(float(s.times.max()) + d for s, d in zip(self.subjects, self.time_shifts))
        return lo, hi


@dataclass(frozen=True)
class Hyperparameters:
    """Penalty strengths and the unit of mixture membership.

    ``granularity`` selects what carries a latent component assignment:
    "subject" ties all of a subject's visits together per biomarker (the
    longitudinal linking), "observation" treats every visit independently
    (the cross-sectional setting, useful when temporal correlation should
    be ignored).
    """

    beta: float = 15.0
    beta_noise: float = 15.0
    granularity: str = "subject"

    def __post_init__(self):
        if not (math.isfinite(self.beta) and self.beta >= 0):
            raise ValueError(f"beta must be >= 0, got {self.beta}")
        if not (math.isfinite(self.beta_noise) and self.beta_noise > 1):
            raise ValueError(f"beta_noise must be > 1, got {self.beta_noise}")
        if self.granularity not in GRANULARITIES:
            raise ValueError(f"granularity must be one of {GRANULARITIES}")

    @classmethod
    def from_cohort_size(cls, n_subjects: int, granularity: str = "subject") -> "Hyperparameters":
        """Default strengths: 15% of the subject count (floored so beta_noise > 1)."""
        strength = 0.15 * n_subjects
        return cls(beta=strength, beta_noise=max(strength, 1.01), granularity=granularity)


@dataclass(frozen=True, eq=False)
class ModelState:
    """Full parameter set of the two-level trajectory mixture.

    ``shared``, ``sub1`` and ``sub2`` hold one sigmoid per biomarker for
    the no-split trajectory and the two sub-trajectories. ``xi[b]`` is the
    mixture weight of the shared trajectory, so the reported split
    confidence for biomarker ``b`` is ``1 - xi[b]``. ``pi[j]`` is subject
    ``j``'s probability of belonging to sub-population 1.
    """

    shared: tuple[SigmoidParams, ...]
    sub1: tuple[SigmoidParams, ...]
    sub2: tuple[SigmoidParams, ...]
    sigma: np.ndarray
    xi: np.ndarray
    pi: np.ndarray

    def __post_init__(self):
        shared = tuple(self.shared)
        sub1 = tuple(self.sub1)
        sub2 = tuple(self.sub2)
        b = len(shared)
        if len(sub1) != b or len(sub2) != b:
            raise ValueError("shared, sub1 and sub2 must have the same length")
        sigma = np.asarray(self.sigma, dtype=float).copy()
        xi = np.asarray(self.xi, dtype=float).copy()
        pi = np.asarray(self.pi, dtype=float).copy()
        if sigma.shape != (b,) or xi.shape != (b,):
            raise ValueError("sigma and xi must have one entry per biomarker")
        if pi.ndim != 1:
            raise ValueError("pi must be one-dimensional")
        if not np.all(np.isfinite(sigma)) or np.any(sigma <= 0):
            raise ValueError("all sigma values must be positive and finite")
        if np.any(xi < 0) or np.any(xi > 1) or not np.all(np.isfinite(xi)):
            raise ValueError("all xi values must lie in [0, 1]")
        if np.any(pi < 0) or np.any(pi > 1) or not np.all(np.isfinite(pi)):
            raise ValueError("all pi values must lie in [0, 1]")
        for arr in (sigma, xi, pi):
            arr.flags.writeable = False
        object.__setattr__(self, "shared", shared)
        object.__setattr__(self, "sub1", sub1)
        object.__setattr__(self, "sub2", sub2)
        object.__setattr__(self, "sigma", sigma)
        object.__setattr__(self, "xi", xi)
        object.__setattr__(self, "pi", pi)

    @property
    def n_biomarkers(self) -> int:
        return len(self.shared)

    @property
    def n_subjects(self) -> int:
        return self.pi.size

    @property
    def split_confidence(self) -> np.ndarray:
        return 1.0 - self.xi

    def swap_subpopulations(self) -> "ModelState":
        """Exchange the two sub-trajectories and flip memberships."""
        return ModelState(self.shared, self.sub2, self.sub1, self.sigma, self.xi, 1.0 - self.pi)

    def translate_midpoints(self, delta: float) -> "ModelState":
        """Shift every component curve along the time axis by ``delta``."""
        return ModelState(
            tuple(c.translated(delta) for c in self.shared),
            tuple(c.translated(delta) for c in self.sub1),
            tuple(c.translated(delta) for c in self.sub2),
            self.sigma,
            self.xi,
            self.pi,
        )


# ---------------------------------------------------------------------------
# Flattened design view used by the evaluation and fitting machinery.
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class _Design:
    """Cohort flattened to observation rows, grouped into mixture units.

    Rows are ordered by subject (times within a subject already sorted).
    A "unit" is whatever carries one latent component assignment per
    biomarker: whole subjects or single observations.
    """

    times: np.ndarray          # (n,) shifted observation times
    values: np.ndarray         # (n, B), NaN = missing
    row_subject: np.ndarray    # (n,) subject index of each row
    unit_starts: np.ndarray    # (U,) first row of each unit
    row_unit: np.ndarray       # (n,) unit index of each row
    unit_subject: np.ndarray   # (U,) subject index of each unit
    n_subjects: int

    @classmethod
    def from_cohort(cls, data: CohortData, granularity: str) -> "_Design":
        if granularity not in GRANULARITIES:
            raise ValueError(f"granularity must be one of {GRANULARITIES}")
        times = np.concatenate(
            [s.times + d for s, d in zip(data.subjects, data.time_shifts)]
        )
        values = np.concatenate([s.values.T for s in data.subjects], axis=0)
        counts = np.array([s.n_visits for s in data.subjects])
        row_subject = np.repeat(np.arange(data.n_subjects), counts)
        n = times.size
        if granularity == "subject":
            unit_starts = np.concatenate(([0], np.cumsum(counts)[:-1]))
            row_unit = row_subject
            unit_subject = np.arange(data.n_subjects)
        else:
            unit_starts = np.arange(n)
            row_unit = np.arange(n)
            unit_subject = row_subject
        return cls(times, values, row_subject, unit_starts, row_unit, unit_subject, data.n_subjects)

    @property
    def n_rows(self) -> int:
        return self.times.size

    @property
    def n_units(self) -> int:
        return self.unit_starts.size

    @property
    def n_biomarkers(self) -> int:
        return self.values.shape[1]

    def reduce_units(self, rows: np.ndarray) -> np.ndarray:
        """Sum a per-row array over the rows of each unit (axis 0)."""
        if self.n_units == self.n_rows:
            return rows
        return np.add.reduceat(rows, self.unit_starts, axis=0)

    def unit_obs_counts(self) -> np.ndarray:
        """(U, B) number of non-missing observations per unit and biomarker."""
        return self.reduce_units(np.isfinite(self.values).astype(float))


def _theta_stack(state: ModelState) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Component curve parameters as (3, B) arrays (a, r, c)."""
    comps = (state.shared, state.sub1, state.sub2)
    a = np.array([[p.supremum for p in comp] for comp in comps])
    r = np.array([[p.growth_rate for p in comp] for comp in comps])
    c = np.array([[p.midpoint for p in comp] for comp in comps])
    return a, r, c


def _row_curves(design: _Design, state: ModelState) -> np.ndarray:
    """Fitted curve values per row, biomarker and component -> (n, B, 3)."""
    a, r, c = _theta_stack(state)
    t = design.times[:, None, None]
    with np.errstate(over="ignore"):
        f = a.T / (1.0 + np.exp(-r.T * (t - c.T)))
    return f


def _row_logpdf(design: _Design, state: ModelState) -> tuple[np.ndarray, np.ndarray]:
    """Per-row Gaussian log-density and squared residual for each component.

    Missing observations contribute 0 to both. Returns (logpdf, sq_resid),
    each of shape (n, B, 3).
    """
    f = _row_curves(design, state)
    x = design.values[:, :, None]
    sigma = state.sigma[None, :, None]
    with np.errstate(invalid="ignore"):
        resid2 = np.square(x - f)
        logpdf = -0.5 * _LOG_2PI - np.log(sigma) - 0.5 * resid2 / np.square(sigma)
    missing = ~np.isfinite(design.values)
    logpdf[missing] = 0.0
    resid2[missing] = 0.0
    return logpdf, resid2


def _unit_log_weights(design: _Design, state: ModelState) -> np.ndarray:
    """Log prior component weights per unit and biomarker -> (U, B, 3)."""
    with np.errstate(divide="ignore"):
        log_xi = np.log(state.xi)
        log_not_xi = np.log1p(-state.xi)
        log_pi = np.log(state.pi)
        log_not_pi = np.log1p(-state.pi)
    lw = np.empty((design.n_units, design.n_biomarkers, 3))
    lw[:, :, 0] = log_xi[None, :]
    lw[:, :, 1] = log_not_xi[None, :] + log_pi[design.unit_subject][:, None]
    lw[:, :, 2] = log_not_xi[None, :] + log_not_pi[design.unit_subject][:, None]
    return lw


def _unit_loglik(design: _Design, state: ModelState) -> np.ndarray:
    """Per-unit, per-biomarker, per-component series log-likelihood."""
    logpdf, _ = _row_logpdf(design, state)
    return design.reduce_units(logpdf)


def _mixture_terms(design: _Design, state: ModelState) -> np.ndarray:
    """(U, B, 3) array of log weight + log component likelihood."""
    return _unit_loglik(design, state) + _unit_log_weights(design, state)


def _objective_parts(design: _Design, state: ModelState, hyper: Hyperparameters):
    """Log-likelihood and penalty terms of the fitted objective."""
    loglik = float(np.sum(logsumexp(_mixture_terms(design, state), axis=2)))
    xi_term = hyper.beta * float(np.sum(state.xi))
    sigma_term = -hyper.beta_noise * float(np.sum(np.log(state.sigma) + 1.0 / state.sigma))
    return loglik, xi_term, sigma_term


def _check_dimensions(data: CohortData, state: ModelState):
    if state.n_biomarkers != data.n_biomarkers:
        raise DimensionMismatchError(
            f"state has {state.n_biomarkers} biomarkers, cohort has {data.n_biomarkers}"
        )
    if state.n_subjects != data.n_subjects:
        raise DimensionMismatchError(
            f"state has {state.n_subjects} subjects, cohort has {data.n_subjects}"
        )


def log_likelihood(data: CohortData, state: ModelState, hyper: Hyperparameters) -> float:
    """Total log-likelihood of the two-level mixture over the cohort.

    Each (unit, biomarker) contributes
    ``log[xi_b * L0 + (1 - xi_b) * (pi_j * L1 + (1 - pi_j) * L2)]`` where
    ``Li`` is the Gaussian series likelihood under component ``i``.
    """
    _check_dimensions(data, state)
    design = _Design.from_cohort(data, hyper.granularity)
    return float(np.sum(logsumexp(_mixture_terms(design, state), axis=2)))


def log_posterior(data: CohortData, state: ModelState, hyper: Hyperparameters) -> float:
    """Penalised objective: log-likelihood plus the xi and sigma priors."""
    _check_dimensions(data, state)
    design = _Design.from_cohort(data, hyper.granularity)
    loglik, xi_term, sigma_term = _objective_parts(design, state, hyper)
    return loglik + xi_term + sigma_term
