"""MAP estimation of the trajectory mixture by expectation-maximisation.

One iteration computes responsibilities over the three components
(shared, sub-1, sub-2) for every (biomarker, unit), then block-maximises
the penalised objective: curve parameters by weighted nonlinear least
squares, then noise, split weight and membership in closed form. Each
block is a coordinate ascent on the same surrogate, so the objective
never decreases. Multiple randomised restarts guard against local
maxima; the run with the best final objective wins.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from joblib import Parallel, delayed
from scipy.special import softmax

from .model import (
    CohortData,
    Hyperparameters,
    ModelState,
    SigmoidParams,
    _Design,
    _check_dimensions,
    _mixture_terms,
    _objective_parts,
    _row_logpdf,
)


class FitError(RuntimeError):
    """The optimisation could not produce a usable model."""


@dataclass(frozen=True, eq=False)
class ResponsibilityTensor:
    """Posterior component weights gamma indexed (biomarker, unit, component).

    Components are ordered (shared, sub-1, sub-2) and sum to one per
    (biomarker, unit). Units are whole subjects or single observations
    depending on the granularity the tensor was computed under.
    """

    gamma: np.ndarray
    granularity: str

    def __post_init__(self):
        g = np.asarray(self.gamma, dtype=float)
        if g.ndim != 3 or g.shape[2] != 3:
            raise ValueError("gamma must have shape (B, U, 3)")
        object.__setattr__(self, "gamma", g)

    @property
    def n_biomarkers(self) -> int:
        return self.gamma.shape[0]

    @property
    def n_units(self) -> int:
        return self.gamma.shape[1]


@dataclass(frozen=True)
class FitConfig:
    """Optimiser settings: stopping rule, restarts and seeding."""

    max_iterations: int = 500
    tolerance: float = 1e-6
    restarts: int = 3
    rng_seed: int = 0
    init_overrides: ModelState | None = None

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be positive")
        if not (self.tolerance > 0):
            raise ValueError("tolerance must be positive")
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")


@dataclass(frozen=True, eq=False)
class FittedModel:
    """Result of one fit: winning state plus its optimisation record."""

    state: ModelState
    objective_trace: np.ndarray
    converged: bool
    restart_index: int

    def __post_init__(self):
        trace = np.asarray(self.objective_trace, dtype=float)
        object.__setattr__(self, "objective_trace", trace)

    @property
    def final_objective(self) -> float:
        return float(self.objective_trace[-1])

    @property
    def n_iterations(self) -> int:
        return max(self.objective_trace.size - 1, 0)


# ---------------------------------------------------------------------------
# E-step
# ---------------------------------------------------------------------------


def _responsibilities(design: _Design, state: ModelState) -> np.ndarray:
    """(U, B, 3) posterior component weights, normalised per (unit, biomarker)."""
    return softmax(_mixture_terms(design, state), axis=2)


def e_step(data: CohortData, state: ModelState, hyper: Hyperparameters) -> ResponsibilityTensor:
    """Posterior component weights for every (biomarker, unit).

    A unit with no observed values for a biomarker falls back to the prior
    weights ``(xi, (1 - xi) * pi, (1 - xi) * (1 - pi))``.
    """
    _check_dimensions(data, state)
    design = _Design.from_cohort(data, hyper.granularity)
    gamma = _responsibilities(design, state)
    return ResponsibilityTensor(gamma.transpose(1, 0, 2), hyper.granularity)


# ---------------------------------------------------------------------------
# Closed-form M-steps
# ---------------------------------------------------------------------------


def m_step_xi(shared_weight: float, split_weight: float, beta: float) -> float:
    """Maximise ``A log(xi) + B log(1 - xi) + beta * xi`` over [0, 1].

    ``shared_weight`` (A) and ``split_weight`` (B) are summed
    responsibilities of the shared component and of the two
    sub-components. The objective is concave whenever A + B > 0, so the
    maximiser is the unique root of ``beta xi^2 + (A + B - beta) xi - A``
    in [0, 1] (which collapses to the correct boundary when A or B is 0).
    """
    a, b, beta = float(shared_weight), float(split_weight), float(beta)
    if a < 0 or b < 0 or beta < 0:
        raise ValueError("weights and beta must be non-negative")
    if a + b == 0:
        raise ValueError("no responsibility mass: A + B must be positive")
    if beta == 0:
        return a / (a + b)
    # The root is invariant under a common rescaling; normalising keeps the
    # discriminant away from under- and overflow at extreme magnitudes.
    scale = max(a, b, beta)
    a, b, beta = a / scale, b / scale, beta / scale
    lin = a + b - beta
    disc = math.sqrt(lin * lin + 4.0 * beta * a)
    if lin <= 0:
        xi = (-lin + disc) / (2.0 * beta)
    else:
        xi = 2.0 * a / (lin + disc)
    return min(max(xi, 0.0), 1.0)


def m_step_pi(sum1: float, sum2: float, fallback: float) -> float:
    """Membership update ``sum1 / (sum1 + sum2)``; keeps ``fallback`` when
    all responsibility mass sits on the shared component."""
    if sum1 < 0 or sum2 < 0:
        raise ValueError("responsibility sums must be non-negative")
    total = sum1 + sum2
    if total == 0:
        return float(fallback)
    return float(sum1) / total


def m_step_sigma(sq_residual_sum: float, obs_count: float, beta_noise: float) -> float:
    """Noise update: maximise ``-(N + bn) log(s) - S / (2 s^2) - bn / s``.

    ``sq_residual_sum`` (S) is the responsibility-weighted sum of squared
    residuals pooled over the three components, ``obs_count`` (N) the
    weighted number of observations. The stationary point solves
    ``-(N + bn) s^2 + bn s + S = 0``; with no data it returns the prior
    mode 1.
    """
    s, n, bn = float(sq_residual_sum), float(obs_count), float(beta_noise)
    if s < 0 or n < 0:
        raise ValueError("residual sum and count must be non-negative")
    if n + bn == 0:
        raise ValueError("obs_count + beta_noise must be positive")
    return (bn + math.sqrt(bn * bn + 4.0 * (n + bn) * s)) / (2.0 * (n + bn))


# ---------------------------------------------------------------------------
# Curve M-step (weighted nonlinear least squares)
# ---------------------------------------------------------------------------

_LOG_CLIP = 300.0


def _pack(params: SigmoidParams) -> np.ndarray:
    return np.array([math.log(params.supremum), math.log(params.growth_rate), params.midpoint])


def _unpack(vec: np.ndarray) -> SigmoidParams:
    return SigmoidParams(
        supremum=math.exp(float(vec[0])),
        growth_rate=math.exp(float(vec[1])),
        midpoint=float(vec[2]),
    )


def _batch_cost_and_curve(t, x, w, theta):
    """Weighted SSE and fitted values for a batch of sigmoids.

    ``theta`` is (Q, 3) in (log a, log r, c); ``t`` is (n,), ``x`` and
    ``w`` are (n, Q) with zero weight marking an excluded row.
    """
    with np.errstate(over="ignore"):
        a = np.exp(theta[:, 0])
        r = np.exp(theta[:, 1])
        s = 1.0 / (1.0 + np.exp(-r * (t[:, None] - theta[:, 2])))
    f = a * s
    resid = f - x
    cost = np.einsum("nq,nq->q", w, np.square(resid))
    return cost, f, s, resid, a, r


def _fit_sigmoids_batch(t, x, w, theta0, max_iterations=200, gradient_tol=1e-8):
    """Damped Gauss-Newton refit of a batch of sigmoids, one per column.

    Minimises ``sum_n w[n, q] * (x[n, q] - f(t[n] | theta_q))^2``
    independently for every problem ``q``, iterating in
    ``(log a, log r, c)`` space so positivity holds by construction. Steps
    are accepted only when they strictly reduce the cost (Levenberg
    damping grows otherwise), so the result never scores worse than the
    start. A problem stops when its gradient norm falls below
    ``gradient_tol``, an accepted step makes negligible progress, its
    damping explodes, or the iteration cap is hit; converged problems drop
    out of the working set.
    """
    theta = np.array(theta0, dtype=float)
    x = np.nan_to_num(x, nan=0.0)
    ids = np.where(w.sum(axis=0) > 0)[0]
    if ids.size == 0:
        return theta
    th = theta[ids]
    xs, ws = x[:, ids], w[:, ids]
    cost, _, s, resid, a, r = _batch_cost_and_curve(t, xs, ws, th)
    lam = np.full(ids.size, 1e-3)
    identity = np.eye(3)
    for _ in range(max_iterations):
        dt = t[:, None] - th[:, 2]
        core = a * s * (1.0 - s)
        jac = np.empty((t.size, ids.size, 3))
        jac[:, :, 0] = a * s
        jac[:, :, 1] = core * r * dt
        jac[:, :, 2] = -core * r
        grad = 2.0 * np.einsum("nq,nqk->qk", ws * resid, jac)
        keep = (np.abs(grad).max(axis=1) > gradient_tol) & (lam < 1e12)
        if not keep.all():
            theta[ids[~keep]] = th[~keep]
            ids, th, xs, ws = ids[keep], th[keep], xs[:, keep], ws[:, keep]
            if ids.size == 0:
                break
            cost, s, resid = cost[keep], s[:, keep], resid[:, keep]
            a, r, lam, grad, jac = a[keep], r[keep], lam[keep], grad[keep], jac[:, keep]
        hess = 2.0 * np.einsum("nq,nqi,nqj->qij", ws, jac, jac)
        diag = np.maximum(np.einsum("qii->qi", hess), 1e-12)
        damped = hess + lam[:, None, None] * diag[:, None, :] * identity
        try:
            step = np.linalg.solve(damped, -grad[:, :, None])[:, :, 0]
        except np.linalg.LinAlgError:
            lam *= 3.0
            continue
        trial = th + step
        trial[:, 0] = np.clip(trial[:, 0], -_LOG_CLIP, _LOG_CLIP)
        trial[:, 1] = np.clip(trial[:, 1], -_LOG_CLIP, _LOG_CLIP)
        trial_cost, _, ts, tresid, ta, tr = _batch_cost_and_curve(t, xs, ws, trial)
        gain = cost - trial_cost
        improved = np.isfinite(trial_cost) & (gain > 0)
        th[improved] = trial[improved]
        cost[improved] = trial_cost[improved]
        s[:, improved] = ts[:, improved]
        resid[:, improved] = tresid[:, improved]
        a[improved] = ta[improved]
        r[improved] = tr[improved]
        lam[improved] = np.maximum(lam[improved] / 3.0, 1e-12)
        lam[~improved] *= 3.0
        # Negligible progress on an accepted step means convergence.
        stalled = improved & (
            (gain <= 1e-10 * np.maximum(cost, 1e-300))
            | (np.abs(step).max(axis=1) <= 1e-12)
        )
        if stalled.any():
            keep = ~stalled
            theta[ids[stalled]] = th[stalled]
            ids, th, xs, ws = ids[keep], th[keep], xs[:, keep], ws[:, keep]
            if ids.size == 0:
                break
            cost, s, resid = cost[keep], s[:, keep], resid[:, keep]
            a, r, lam = a[keep], r[keep], lam[keep]
    if ids.size:
        theta[ids] = th
    return theta


def m_step_theta(
    times,
    values,
    weights,
    init: SigmoidParams,
    sigma: float,
    *,
    max_iterations: int = 200,
    gradient_tol: float = 1e-8,
) -> SigmoidParams:
    """Weighted least-squares refit of one sigmoid.

    Minimises ``sum_m w_m (x_m - f(t_m))^2`` (residuals scaled by
    ``sigma``) by damped Gauss-Newton on ``(log a, log r, c)``, which
    keeps the supremum and growth rate positive. The returned parameters
    never score worse than ``init``, so an enclosing EM sweep keeps its
    ascent guarantee even when the inner iteration stalls.
    """
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    weights = np.asarray(weights, dtype=float)
    if times.shape != values.shape or times.shape != weights.shape:
        raise ValueError("times, values and weights must have the same length")
    if np.any(weights < 0):
        raise ValueError("weights must be non-negative")
    effective = weights * np.isfinite(values)
    if not np.any(effective > 0):
        raise ValueError("all weights are zero (or no observed values)")
    w = (effective / float(sigma) ** 2)[:, None]
    theta = _fit_sigmoids_batch(
        times, values[:, None], w, _pack(init)[None, :],
        max_iterations=max_iterations, gradient_tol=gradient_tol,
    )
    return _unpack(theta[0])


# ---------------------------------------------------------------------------
# Full EM driver
# ---------------------------------------------------------------------------


def _positive_normal(rng: np.random.Generator, mean: float, sd: float) -> float:
    """Normal draw truncated to the positive axis (by resampling)."""
    for _ in range(100):
        v = rng.normal(mean, sd)
        if v > 0:
            return float(v)
    return abs(float(rng.normal(mean, sd))) + 1e-6


def _random_curve(rng, value_range: float, t_lo: float, t_hi: float) -> SigmoidParams:
    span = max(t_hi - t_lo, 1e-6)
    return SigmoidParams(
        supremum=_positive_normal(rng, value_range, value_range / 4.0),
        growth_rate=_positive_normal(rng, 4.0 / span, 2.0 / span),
        midpoint=float(rng.uniform(t_lo, t_hi)),
    )


def initial_state(data: CohortData, rng: np.random.Generator) -> ModelState:
    """Randomised starting point: uninformative xi and pi (0.5), noise set
    to the per-biomarker data standard deviation, curves drawn to land
    inside the data envelope."""
    t_lo, t_hi = data.time_span()
    sigma = data.value_std()
    stacked = np.concatenate([s.values for s in data.subjects], axis=1)
    with np.errstate(invalid="ignore"):
        ranges = np.nanmax(stacked, axis=1) - np.nanmin(stacked, axis=1)
    ranges = np.maximum(np.nan_to_num(ranges), 1e-3)
    components = [
        tuple(_random_curve(rng, float(ranges[b]), t_lo, t_hi) for b in range(data.n_biomarkers))
        for _ in range(3)
    ]
    b = data.n_biomarkers
    return ModelState(
        shared=components[0],
        sub1=components[1],
        sub2=components[2],
        sigma=sigma,
        xi=np.full(b, 0.5),
        pi=np.full(data.n_subjects, 0.5),
    )


def _em_iteration(design: _Design, state: ModelState, hyper: Hyperparameters,
                  obs_mask: np.ndarray) -> ModelState:
    """One generalised EM sweep: responsibilities, then theta, sigma, xi, pi."""
    gamma = _responsibilities(design, state)  # (U, B, 3)
    n_b = design.n_biomarkers

    # Curve updates: one damped Gauss-Newton batch over every
    # (biomarker, component) pair; problems without weight stay put.
    finite = np.isfinite(design.values)
    row_gamma = gamma[design.row_unit]  # (n, B, 3)
    w_batch = (row_gamma * finite[:, :, None]
               / np.square(state.sigma)[None, :, None]).reshape(design.n_rows, 3 * n_b)
    x_batch = np.repeat(design.values, 3, axis=1)
    comps = (state.shared, state.sub1, state.sub2)
    theta0 = np.array([_pack(comps[i][b]) for b in range(n_b) for i in range(3)])
    theta = _fit_sigmoids_batch(design.times, x_batch, w_batch, theta0)
    candidate = ModelState(
        tuple(_unpack(theta[b * 3 + 0]) for b in range(n_b)),
        tuple(_unpack(theta[b * 3 + 1]) for b in range(n_b)),
        tuple(_unpack(theta[b * 3 + 2]) for b in range(n_b)),
        state.sigma,
        state.xi,
        state.pi,
    )

    # Noise update under the refreshed curves, pooled over components.
    _, resid2 = _row_logpdf(design, candidate)
    sq_sums = np.sum(row_gamma * resid2, axis=(0, 2))
    counts = np.sum(finite, axis=0).astype(float)
    sigma = np.array([
        m_step_sigma(sq_sums[b], counts[b], hyper.beta_noise) if counts[b] > 0 else state.sigma[b]
        for b in range(n_b)
    ])

    # Split-weight update from responsibilities of units that carry data.
    shared_mass = np.sum(gamma[:, :, 0] * obs_mask, axis=0)
    split_mass = np.sum((gamma[:, :, 1] + gamma[:, :, 2]) * obs_mask, axis=0)
    xi = np.array([
        m_step_xi(shared_mass[b], split_mass[b], hyper.beta)
        if shared_mass[b] + split_mass[b] > 0 else state.xi[b]
        for b in range(n_b)
    ])

    # Membership update: pool sub-component responsibilities per subject.
    s1_units = np.sum(gamma[:, :, 1] * obs_mask, axis=1)
    s2_units = np.sum(gamma[:, :, 2] * obs_mask, axis=1)
    s1 = np.bincount(design.unit_subject, weights=s1_units, minlength=design.n_subjects)
    s2 = np.bincount(design.unit_subject, weights=s2_units, minlength=design.n_subjects)
    total = s1 + s2
    with np.errstate(invalid="ignore", divide="ignore"):
        pi = np.where(total > 0, s1 / total, state.pi)

    return ModelState(candidate.shared, candidate.sub1, candidate.sub2, sigma, xi, pi)


def _run_em(design: _Design, hyper: Hyperparameters, config: FitConfig,
            init: ModelState) -> tuple[ModelState, list[float], bool]:
    obs_mask = (design.unit_obs_counts() > 0).astype(float)
    state = init
    loglik, xi_term, sigma_term = _objective_parts(design, state, hyper)
    objective = loglik + xi_term + sigma_term
    if not math.isfinite(objective):
        raise FitError("initial objective is not finite; check data scaling")
    trace = [objective]
    converged = False
    for _ in range(config.max_iterations):
        state = _em_iteration(design, state, hyper, obs_mask)
        loglik, xi_term, sigma_term = _objective_parts(design, state, hyper)
        objective = loglik + xi_term + sigma_term
        if not math.isfinite(objective):
            raise FitError("objective became non-finite during optimisation")
        previous = trace[-1]
        trace.append(objective)
        if abs(objective - previous) <= config.tolerance * (1.0 + abs(previous)):
            converged = True
            break
    return state, trace, converged


def fit(
    data: CohortData,
    hyper: Hyperparameters | None = None,
    config: FitConfig | None = None,
    n_jobs: int | None = None,
) -> FittedModel:
    """Fit the trajectory mixture by multi-restart EM.

    Each restart starts from an independent randomised initialisation
    (restart 0 uses ``config.init_overrides`` when provided) and runs EM
    until the relative objective change drops below ``config.tolerance``
    or ``config.max_iterations`` is reached. The restart with the highest
    final objective is returned. Results are deterministic for a fixed
    ``config.rng_seed`` regardless of ``n_jobs``.
    """
    if data.n_subjects < 2:
        raise FitError("cohort must contain at least two subjects")
    if hyper is None:
        hyper = Hyperparameters.from_cohort_size(data.n_subjects)
    if config is None:
        config = FitConfig()
    _validate_overrides(data, config)
    design = _Design.from_cohort(data, hyper.granularity)
    seeds = np.random.SeedSequence(config.rng_seed).spawn(config.restarts)
    inits = []
    for r, seed in enumerate(seeds):
        if r == 0 and config.init_overrides is not None:
            inits.append(config.init_overrides)
        else:
            inits.append(initial_state(data, np.random.default_rng(seed)))
    runs = Parallel(n_jobs=n_jobs or 1)(
        delayed(_run_em)(design, hyper, config, init) for init in inits
    )
    best = max(range(len(runs)), key=lambda r: runs[r][1][-1])
    state, trace, converged = runs[best]
    return FittedModel(state=state, objective_trace=np.asarray(trace),
                       converged=converged, restart_index=best)


def _validate_overrides(data: CohortData, config: FitConfig):
    if config.init_overrides is not None:
        _check_dimensions(data, config.init_overrides)


def estimate_membership(
    data: CohortData,
    state: ModelState,
    hyper: Hyperparameters,
    *,
    max_iterations: int = 500,
    tolerance: float = 1e-12,
) -> np.ndarray:
    """Sub-population probabilities for a cohort under frozen curves.

    Runs the EM membership update alone (curves, noise and split weights
    fixed), starting from uninformative 0.5, until ``pi`` stabilises.
    Useful for scoring subjects that were not part of the original fit.
    """
    if state.n_biomarkers != data.n_biomarkers:
        raise ValueError("state and cohort disagree on the biomarker panel")
    design = _Design.from_cohort(data, hyper.granularity)
    obs_mask = (design.unit_obs_counts() > 0).astype(float)
    pi = np.full(data.n_subjects, 0.5)
    eval_state = ModelState(state.shared, state.sub1, state.sub2, state.sigma, state.xi, pi)
    for _ in range(max_iterations):
        gamma = _responsibilities(design, eval_state)
        s1_units = np.sum(gamma[:, :, 1] * obs_mask, axis=1)
        s2_units = np.sum(gamma[:, :, 2] * obs_mask, axis=1)
        s1 = np.bincount(design.unit_subject, weights=s1_units, minlength=design.n_subjects)
        s2 = np.bincount(design.unit_subject, weights=s2_units, minlength=design.n_subjects)
        total = s1 + s2
        with np.errstate(invalid="ignore", divide="ignore"):
            new_pi = np.where(total > 0, s1 / total, eval_state.pi)
        delta = float(np.max(np.abs(new_pi - eval_state.pi)))
        eval_state = ModelState(state.shared, state.sub1, state.sub2, state.sigma, state.xi, new_pi)
        if delta < tolerance:
            break
    return eval_state.pi
