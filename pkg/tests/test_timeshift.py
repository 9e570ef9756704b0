"""Time-shift grid estimation, gauge fixing and the alternating driver."""

import numpy as np
import pytest

from subtraj import (
    CohortData,
    FitConfig,
    Hyperparameters,
    ModelState,
    SigmoidParams,
    SubjectSeries,
    alternate_fit,
    estimate_time_shifts,
    log_posterior,
    sigmoid_eval,
)
from subtraj.timeshift import _argmax_shifts, _candidate_grid

from conftest import make_cohort

CURVES = [SigmoidParams(3.0, 0.7, 8.0), SigmoidParams(2.0, 0.9, 12.0)]


def single_group_state(cohort, sigma=0.5, xi=1.0):
    b = cohort.n_biomarkers
    return ModelState(
        shared=tuple(CURVES), sub1=tuple(CURVES), sub2=tuple(CURVES),
        sigma=np.full(b, sigma), xi=np.full(b, xi),
        pi=np.full(cohort.n_subjects, 0.5),
    )


def staggered_cohort(true_shifts, points=3, seed=0, noise=0.0):
    """Observed times are disease times minus the true shift, so the model
    recovers exactly ``true_shifts``. Visits are stratified over the curve
    transition window so every subject's shift is identifiable."""
    rng = np.random.default_rng(seed)
    edges = np.linspace(2.0, 16.0, points + 1)
    subjects = []
    for j, delta in enumerate(true_shifts):
        t_disease = np.sort(rng.uniform(edges[:-1], edges[1:]))
        values = np.stack([sigmoid_eval(c, t_disease) for c in CURVES])
        if noise:
            values = values + rng.normal(0, noise, values.shape)
        subjects.append(SubjectSeries(f"s{j:02d}", t_disease - delta, values))
    return CohortData(tuple(subjects), ("bm1", "bm2"))


class TestCandidateGrid:
    def test_covers_bounds(self):
        grid = _candidate_grid((-1.0, 1.0), 0.25)
        np.testing.assert_allclose(grid, np.arange(-1.0, 1.01, 0.25))

    def test_rejects_empty_window(self):
        with pytest.raises(ValueError):
            _candidate_grid((2.0, 2.0), 0.1)

    def test_rejects_bad_step(self):
        with pytest.raises(ValueError):
            _candidate_grid((0.0, 1.0), 0.0)


class TestEstimateTimeShifts:
    def test_recovers_known_translation(self):
        # nine anchored subjects plus one translated by +3.0
        shifts = [0.0] * 9 + [3.0]
        cohort = staggered_cohort(shifts, points=3, seed=4)
        state = single_group_state(cohort)
        raw = _argmax_shifts(cohort, state, (-5.0, 5.0), 0.05, "subject")
        assert abs(raw[-1] - 3.0) <= 0.05
        assert np.all(np.abs(raw[:-1]) <= 0.05)
        estimate = estimate_time_shifts(cohort, state, (-5.0, 5.0), 0.05)
        np.testing.assert_allclose(estimate.shifts, raw - raw.mean(), atol=1e-12)

    def test_on_curve_subject_stays_at_zero(self):
        cohort = staggered_cohort([0.0] * 6, points=2, seed=1)
        raw = _argmax_shifts(cohort, single_group_state(cohort), (-4.0, 4.0), 0.1,
                             "subject")
        np.testing.assert_allclose(raw, 0.0, atol=1e-12)

    def test_equal_shifts_recentre_to_zero(self):
        cohort = staggered_cohort([2.0] * 6, points=2, seed=2)
        estimate = estimate_time_shifts(cohort, single_group_state(cohort),
                                        (-4.0, 4.0), 0.1)
        np.testing.assert_allclose(estimate.shifts, 0.0, atol=1e-12)

    def test_ties_break_toward_smaller_absolute_shift(self):
        # saturated curve: every candidate scores identically
        flat = [SigmoidParams(1.0, 5.0, 1000.0)]
        cohort = make_cohort([flat], [[1.0, 2.0]] * 3, noise=0.0)
        state = ModelState(tuple(flat), tuple(flat), tuple(flat),
                           sigma=np.array([1.0]), xi=np.array([1.0]),
                           pi=np.full(3, 0.5))
        raw = _argmax_shifts(cohort, state, (-5.0, 5.0), 0.5, "subject")
        np.testing.assert_allclose(raw, 0.0, atol=1e-12)

    def test_never_decreases_objective(self):
        rng = np.random.default_rng(7)
        cohort = staggered_cohort(rng.uniform(-2, 2, 8), points=2, seed=3, noise=0.2)
        state = single_group_state(cohort, xi=0.8)
        hyper = Hyperparameters(beta=2.0, beta_noise=2.0)
        start = log_posterior(cohort, state, hyper)
        raw = _argmax_shifts(cohort, state, (-4.0, 4.0), 0.1, "subject")
        after = log_posterior(cohort.with_shifts(raw), state, hyper)
        assert after >= start - 1e-10 * (1 + abs(start))

    def test_current_shift_outside_grid_is_kept_as_candidate(self):
        cohort = staggered_cohort([0.0] * 4, points=2, seed=5)
        shifted = cohort.with_shifts(np.array([7.5, 0.0, 0.0, 0.0]))
        state = single_group_state(shifted)
        hyper = Hyperparameters(beta=2.0, beta_noise=2.0)
        start = log_posterior(shifted, state, hyper)
        raw = _argmax_shifts(shifted, state, (-1.0, 1.0), 0.5, "subject")
        after = log_posterior(shifted.with_shifts(raw), state, hyper)
        assert after >= start - 1e-10 * (1 + abs(start))


class TestGaugeSymmetry:
    def test_joint_translation_leaves_objective_unchanged(self):
        cohort = staggered_cohort([-1.0, 0.5, 1.5, -0.5, 0.0, 2.0], points=3,
                                  seed=11, noise=0.3)
        state = single_group_state(cohort, xi=0.7)
        hyper = Hyperparameters(beta=3.0, beta_noise=2.5)
        base = log_posterior(cohort, state, hyper)
        for delta in (-4.0, 2.5, 11.0):
            moved = cohort.with_shifts(np.asarray(cohort.time_shifts) + delta)
            translated = state.translate_midpoints(delta)
            value = log_posterior(moved, translated, hyper)
            assert value == pytest.approx(base, rel=1e-10)


class TestAlternateFit:
    def test_zero_shift_cohort_stays_anchored(self):
        # noiseless data already on the disease axis: nothing to correct
        cohort = staggered_cohort([0.0] * 12, points=2, seed=8, noise=0.0)
        hyper = Hyperparameters(beta=12.0, beta_noise=2.0)
        config = FitConfig(max_iterations=120, tolerance=1e-8, restarts=2, rng_seed=4)
        model, estimate = alternate_fit(cohort, hyper, config, outer_rounds=1,
                                        bounds=(-3.0, 3.0), grid_step=0.1)
        assert np.all(np.abs(estimate.shifts) <= 0.1 + 1e-9)

    def test_recovers_two_year_stagger_noiselessly(self):
        # a no-split validation cohort (huge beta shuts the sub-trajectory
        # channel, which could otherwise absorb the stagger outright)
        true = np.round(np.linspace(-2.0, 2.0, 30), 6)
        cohort = staggered_cohort(true, points=4, seed=3)
        hyper = Hyperparameters(beta=2000.0, beta_noise=3.0)
        config = FitConfig(max_iterations=150, tolerance=1e-8, restarts=4, rng_seed=1)
        model, estimate = alternate_fit(cohort, hyper, config, outer_rounds=3,
                                        bounds=(-4.0, 4.0), grid_step=0.1)
        rmse = float(np.sqrt(np.mean((estimate.shifts - true) ** 2)))
        assert rmse <= 0.1

    def test_concatenated_trace_is_monotone(self):
        cohort = staggered_cohort(np.linspace(-1.5, 1.5, 10), points=2, seed=21,
                                  noise=0.2)
        config = FitConfig(max_iterations=60, tolerance=1e-6, restarts=2, rng_seed=9)
        model, _ = alternate_fit(cohort, None, config, outer_rounds=3,
                                 bounds=(-3.0, 3.0), grid_step=0.2)
        trace = model.objective_trace
        assert np.all(np.diff(trace) >= -1e-8 * (1 + np.abs(trace[:-1])))

    def test_rejects_nonpositive_rounds(self):
        cohort = staggered_cohort([0.0, 0.0], points=2, seed=2)
        with pytest.raises(ValueError):
            alternate_fit(cohort, outer_rounds=0)
