"""EM machinery: closed-form M-steps against grid oracles, E-step, driver."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import subtraj
from subtraj import (
    FitConfig,
    FitError,
    Hyperparameters,
    ModelState,
    SigmoidParams,
    e_step,
    estimate_membership,
    fit,
    log_posterior,
    m_step_pi,
    m_step_sigma,
    m_step_theta,
    m_step_xi,
    membership_accuracy,
    sigmoid_eval,
)
from subtraj.simulate import SyntheticConfig, generate_dataset

from conftest import grid_argmax, make_cohort


def xi_objective(a, b, beta):
    def fn(xi):
        with np.errstate(divide="ignore", invalid="ignore"):
            val = beta * xi
            if a > 0:
                val = val + a * np.log(xi)
            if b > 0:
                val = val + b * np.log(1.0 - xi)
        return val
    return fn


def sigma_objective(s, n, beta_noise):
    def fn(sig):
        return (-(n + beta_noise) * np.log(sig) - s / (2.0 * sig ** 2)
                - beta_noise / sig)
    return fn


class TestMStepXi:
    def test_symmetric_counts_without_prior(self):
        assert m_step_xi(10, 10, 0.0) == pytest.approx(0.5)

    def test_closed_form_without_prior(self):
        assert m_step_xi(30, 10, 0.0) == pytest.approx(0.75)

    def test_quadratic_root_case(self):
        # root of 3 xi^2 + xi - 2 = 0 inside (0, 1)
        value = m_step_xi(10, 10, 15.0)
        assert value == pytest.approx(2.0 / 3.0, abs=1e-12)
        oracle = grid_argmax(xi_objective(10, 10, 15.0), 1e-9, 1 - 1e-9)
        assert value == pytest.approx(oracle, abs=1e-4)

    def test_boundary_no_shared_mass(self):
        # A = 0: prior pulls up from 0 only when beta exceeds B
        assert m_step_xi(0.0, 10.0, 4.0) == pytest.approx(0.0)
        assert m_step_xi(0.0, 4.0, 10.0) == pytest.approx(0.6)

    def test_boundary_no_split_mass(self):
        assert m_step_xi(12.0, 0.0, 3.0) == pytest.approx(1.0)

    def test_rejects_empty_mass(self):
        with pytest.raises(ValueError):
            m_step_xi(0.0, 0.0, 1.0)

    @settings(max_examples=60, deadline=None)
    @given(a=st.floats(0, 50), b=st.floats(0, 50), beta=st.floats(0, 40))
    def test_matches_grid_search(self, a, b, beta):
        if a + b == 0:
            return
        value = m_step_xi(a, b, beta)
        oracle = grid_argmax(xi_objective(a, b, beta), 1e-9, 1 - 1e-9)
        assert value == pytest.approx(oracle, abs=1e-4)


class TestMStepPi:
    def test_symmetry(self):
        assert m_step_pi(3.0, 3.0, 0.1) == pytest.approx(0.5)

    def test_closed_form(self):
        assert m_step_pi(3.0, 1.0, 0.1) == pytest.approx(0.75)

    def test_fallback_when_no_mass(self):
        assert m_step_pi(0.0, 0.0, 0.42) == pytest.approx(0.42)

    def test_matches_grid_search(self):
        rng = np.random.default_rng(0)
        for _ in range(25):
            s1, s2 = rng.uniform(0.01, 20, size=2)

            def fn(pi):
                return s1 * np.log(pi) + s2 * np.log(1 - pi)

            assert m_step_pi(s1, s2, 0.5) == pytest.approx(
                grid_argmax(fn, 1e-9, 1 - 1e-9), abs=1e-4)


class TestMStepSigma:
    def test_pure_prior_shrinkage(self):
        value = m_step_sigma(0.0, 85.0, 15.0)
        assert value == pytest.approx(0.15, abs=1e-12)
        # stationarity by central finite differences
        fn = sigma_objective(0.0, 85.0, 15.0)
        h = 1e-7
        derivative = (fn(0.15 + h) - fn(0.15 - h)) / (2 * h)
        assert abs(derivative) < 1e-4

    def test_prior_mode_without_data(self):
        assert m_step_sigma(0.0, 0.0, 7.0) == pytest.approx(1.0)

    def test_quadratic_root_case(self):
        # root of 6 sigma^2 - sigma - 12 = 0
        value = m_step_sigma(24.0, 10.0, 2.0)
        assert value == pytest.approx(1.5, abs=1e-12)
        oracle = grid_argmax(sigma_objective(24.0, 10.0, 2.0), 1e-6, 5.0)
        assert value == pytest.approx(oracle, abs=1e-4)

    def test_rejects_degenerate_input(self):
        with pytest.raises(ValueError):
            m_step_sigma(-1.0, 1.0, 2.0)
        with pytest.raises(ValueError):
            m_step_sigma(1.0, 0.0, 0.0)

    @settings(max_examples=60, deadline=None)
    @given(s=st.floats(0, 50), n=st.floats(0, 200), bn=st.floats(1.01, 30))
    def test_matches_grid_search(self, s, n, bn):
        value = m_step_sigma(s, n, bn)
        oracle = grid_argmax(sigma_objective(s, n, bn), 1e-6, max(5.0, 3.0 * value))
        assert value == pytest.approx(oracle, abs=1e-4)


class TestMStepTheta:
    def test_recovers_exact_curve_from_nearby_init(self):
        true = SigmoidParams(3.0, 0.7, 9.0)
        t = np.linspace(0, 20, 60)
        x = sigmoid_eval(true, t)
        init = SigmoidParams(2.6, 0.8, 8.2)
        fitted = m_step_theta(t, x, np.ones_like(t), init, 1.0)
        rmse = float(np.sqrt(np.mean((sigmoid_eval(fitted, t) - x) ** 2)))
        assert rmse <= 1e-6

    def test_zero_weight_rows_equal_filtered_fit(self):
        rng = np.random.default_rng(5)
        true = SigmoidParams(2.0, 0.9, 10.0)
        t = np.sort(rng.uniform(0, 20, 80))
        x = sigmoid_eval(true, t) + rng.normal(0, 0.3, t.size)
        w = np.ones_like(t)
        w[40:] = 0.0
        init = SigmoidParams(1.5, 0.5, 9.0)
        full = m_step_theta(t, x, w, init, 1.0)
        half = m_step_theta(t[:40], x[:40], w[:40], init, 1.0)
        assert full.supremum == pytest.approx(half.supremum, rel=1e-12)
        assert full.growth_rate == pytest.approx(half.growth_rate, rel=1e-12)
        assert full.midpoint == pytest.approx(half.midpoint, rel=1e-12)

    def test_indicator_weights_match_coarse_grid_oracle(self):
        rng = np.random.default_rng(11)
        cluster1 = SigmoidParams(3.2, 0.8, 7.0)
        cluster2 = SigmoidParams(1.2, 1.1, 13.0)
        t = np.sort(rng.uniform(0, 20, 120))
        labels = rng.integers(0, 2, t.size)
        noise = 0.2
        x = np.where(labels == 0, sigmoid_eval(cluster1, t), sigmoid_eval(cluster2, t))
        x = x + rng.normal(0, noise, t.size)
        w = (labels == 0).astype(float)
        fitted = m_step_theta(t, x, w, SigmoidParams(2.0, 0.5, 10.0), 1.0)

        # independent coarse grid search over (a, r, c)
        best = (np.inf, None)
        mask = labels == 0
        for a in np.linspace(2.0, 4.5, 18):
            for r in np.linspace(0.3, 1.5, 18):
                for c in np.linspace(4, 11, 22):
                    f = a / (1.0 + np.exp(-r * (t[mask] - c)))
                    sse = float(np.sum((x[mask] - f) ** 2))
                    if sse < best[0]:
                        best = (sse, (a, r, c))
        fitted_sse = float(np.sum(w * (x - sigmoid_eval(fitted, t)) ** 2))
        assert fitted_sse <= best[0] + 1e-9
        grid_curve = SigmoidParams(*best[1])
        rmse = float(np.sqrt(np.mean(
            (sigmoid_eval(fitted, t[mask]) - sigmoid_eval(grid_curve, t[mask])) ** 2)))
        assert rmse <= 2 * noise

    def test_never_scores_worse_than_init(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            t = np.sort(rng.uniform(0, 20, 40))
            x = rng.uniform(0, 4, t.size)
            w = rng.uniform(0, 1, t.size)
            init = SigmoidParams(*rng.uniform([0.5, 0.1, 0], [4, 2, 20]))
            fitted = m_step_theta(t, x, w, init, 1.0)
            before = float(np.sum(w * (x - sigmoid_eval(init, t)) ** 2))
            after = float(np.sum(w * (x - sigmoid_eval(fitted, t)) ** 2))
            assert after <= before + 1e-12

    def test_rejects_all_zero_weights(self):
        with pytest.raises(ValueError):
            m_step_theta([1.0, 2.0], [1.0, 1.0], [0.0, 0.0],
                         SigmoidParams(1, 1, 0), 1.0)


class TestEStep:
    def setup_method(self):
        self.curves = [SigmoidParams(2.0, 0.8, 8.0)]
        self.cohort = make_cohort([self.curves], [[4.0], [9.0], [15.0]],
                                  noise=0.3, seed=2)

    def _state(self, xi, pi):
        return ModelState(
            shared=tuple(self.curves), sub1=tuple(self.curves),
            sub2=tuple(self.curves), sigma=np.array([1.0]),
            xi=np.array([xi]), pi=np.full(3, pi),
        )

    def test_degenerate_shared(self):
        gamma = e_step(self.cohort, self._state(1.0, 0.5), Hyperparameters(1, 2)).gamma
        np.testing.assert_allclose(gamma[0, :, 0], 1.0)
        np.testing.assert_allclose(gamma[0, :, 1:], 0.0)

    def test_degenerate_sub1(self):
        gamma = e_step(self.cohort, self._state(0.0, 1.0), Hyperparameters(1, 2)).gamma
        np.testing.assert_allclose(gamma[0, :, 1], 1.0)

    def test_equal_likelihood_mixture(self):
        # identical component curves: responsibilities follow the priors
        gamma = e_step(self.cohort, self._state(0.5, 0.5), Hyperparameters(1, 2)).gamma
        np.testing.assert_allclose(gamma[0, :, 0], 0.5, atol=1e-12)
        np.testing.assert_allclose(gamma[0, :, 1], 0.25, atol=1e-12)
        np.testing.assert_allclose(gamma[0, :, 2], 0.25, atol=1e-12)

    def test_normalisation_on_random_states(self):
        rng = np.random.default_rng(8)
        curves = [[SigmoidParams(*rng.uniform([1, .3, 2], [4, 1.5, 18])) for _ in range(2)]
                  for _ in range(3)]
        cohort = make_cohort([curves[0]], [[3.0, 7.0], [11.0], [2.0, 15.0, 19.0]],
                             noise=0.5, seed=13)
        for granularity in ("subject", "observation"):
            state = ModelState(tuple(curves[0]), tuple(curves[1]), tuple(curves[2]),
                               sigma=rng.uniform(0.4, 2, 2), xi=rng.uniform(0, 1, 2),
                               pi=rng.uniform(0, 1, 3))
            tensor = e_step(cohort, state, Hyperparameters(1, 2, granularity))
            np.testing.assert_allclose(tensor.gamma.sum(axis=2), 1.0, atol=1e-12)

    def test_all_missing_unit_gets_prior_weights(self):
        subjects = (
            subtraj.SubjectSeries("s1", [2.0], [[np.nan], [1.0]]),
            subtraj.SubjectSeries("s2", [5.0], [[1.4], [0.8]]),
        )
        cohort = subtraj.CohortData(subjects, ("bm1", "bm2"))
        curves = [SigmoidParams(2, 1, 8), SigmoidParams(1, 1, 4)]
        state = ModelState(tuple(curves), tuple(curves), tuple(curves),
                           sigma=np.array([1.0, 1.0]), xi=np.array([0.7, 0.5]),
                           pi=np.array([0.3, 0.5]))
        gamma = e_step(cohort, state, Hyperparameters(1, 2)).gamma
        np.testing.assert_allclose(
            gamma[0, 0], [0.7, 0.3 * 0.3, 0.3 * 0.7], atol=1e-12)


class TestFit:
    def test_truth_init_is_a_fixed_point_on_noiseless_data(self):
        # the generating configuration, completed into an EM stationary
        # point: hard xi/pi at their absorbing boundaries and sigma at the
        # value the noise update returns for zero residuals
        config = SyntheticConfig(n_subjects=40, n_biomarkers=2, snr_level="high",
                                 noise_std=0.0, points_per_subject=2, rng_seed=21)
        cohort, truth = generate_dataset(config)
        hyper = Hyperparameters.from_cohort_size(cohort.n_subjects)
        n_obs = cohort.n_subjects * config.points_per_subject
        init = ModelState(
            shared=tuple(truth.curve_for(i, 0) for i in range(2)),
            sub1=tuple(truth.curve_for(i, 0) for i in range(2)),
            sub2=tuple(truth.curve_for(i, 1) for i in range(2)),
            sigma=np.full(2, m_step_sigma(0.0, n_obs, hyper.beta_noise)),
            xi=np.where(truth.split_flags, 0.0, 1.0),
            pi=np.where(truth.subject_labels == 0, 1.0, 0.0),
        )
        model = fit(cohort, hyper, FitConfig(max_iterations=50, tolerance=1e-8,
                                             restarts=1, rng_seed=0,
                                             init_overrides=init))
        assert model.converged
        assert model.n_iterations <= 3
        diffs = np.diff(model.objective_trace)
        assert np.all(diffs >= -1e-8 * (1 + np.abs(model.objective_trace[:-1])))

    def test_em_ascent_on_noisy_data(self):
        config = SyntheticConfig(n_subjects=50, n_biomarkers=3, snr_level="normal",
                                 rng_seed=5)
        cohort, _ = generate_dataset(config)
        model = fit(cohort, None, FitConfig(max_iterations=60, tolerance=1e-7,
                                            restarts=2, rng_seed=3))
        trace = model.objective_trace
        assert np.all(np.diff(trace) >= -1e-8 * (1 + np.abs(trace[:-1])))

    def test_single_trajectory_cohort_reports_no_splits(self):
        # a strong split penalty (beta = J) must silence every biomarker
        # when the generator used one trajectory throughout
        config = SyntheticConfig(n_subjects=80, n_biomarkers=2, split_fraction=0.0,
                                 noise_std=0.4, points_per_subject=2, rng_seed=17)
        cohort, truth = generate_dataset(config)
        assert not truth.split_flags.any()
        hyper = Hyperparameters(beta=80.0, beta_noise=12.0)
        model = fit(cohort, hyper, FitConfig(max_iterations=200, tolerance=1e-6,
                                             restarts=3, rng_seed=11))
        assert np.all(model.state.split_confidence <= 0.1)

    def test_recovers_split_structure_with_repeat_visits(self):
        config = SyntheticConfig(n_subjects=100, n_biomarkers=2, snr_level="high",
                                 points_per_subject=3, rng_seed=3)
        cohort, truth = generate_dataset(config)
        model = fit(cohort, None, FitConfig(max_iterations=300, tolerance=1e-6,
                                            restarts=5, rng_seed=7))
        conf = model.state.split_confidence
        assert np.all(conf[truth.split_flags] >= 0.9)
        assert np.all(conf[~truth.split_flags] <= 0.1)
        assert membership_accuracy(model.state.pi, truth.subject_labels) >= 0.9

    def test_rejects_tiny_cohorts(self):
        cohort = make_cohort([[SigmoidParams(1, 1, 5)]], [[1.0, 2.0]])
        with pytest.raises(FitError):
            fit(cohort)

    def test_non_finite_objective_raises(self):
        curves = [SigmoidParams(1, 1, 5)]
        cohort = make_cohort([curves], [[1.0], [2.0]])
        bad = subtraj.SubjectSeries("weird", [3.0], [[1e300]])
        cohort = subtraj.CohortData(cohort.subjects + (bad,), cohort.biomarker_names)
        with pytest.raises(FitError):
            fit(cohort, Hyperparameters(1.0, 2.0),
                FitConfig(max_iterations=5, restarts=1, rng_seed=0))

    def test_deterministic_under_seed(self):
        config = SyntheticConfig(n_subjects=30, n_biomarkers=2, rng_seed=9)
        cohort, _ = generate_dataset(config)
        fc = FitConfig(max_iterations=40, tolerance=1e-6, restarts=3, rng_seed=123)
        m1 = fit(cohort, None, fc)
        m2 = fit(cohort, None, fc)
        np.testing.assert_array_equal(m1.objective_trace, m2.objective_trace)
        np.testing.assert_array_equal(m1.state.pi, m2.state.pi)
        assert m1.restart_index == m2.restart_index

    def test_label_swap_initialisations_agree(self):
        config = SyntheticConfig(n_subjects=40, n_biomarkers=2, snr_level="high",
                                 points_per_subject=2, rng_seed=31)
        cohort, _ = generate_dataset(config)
        hyper = Hyperparameters.from_cohort_size(40)
        init = subtraj.initial_state(cohort, np.random.default_rng(5))
        swapped = init.swap_subpopulations()
        fc = FitConfig(max_iterations=250, tolerance=1e-9, restarts=1, rng_seed=0)
        m1 = fit(cohort, hyper, FitConfig(**{**fc.__dict__, "init_overrides": init}))
        m2 = fit(cohort, hyper, FitConfig(**{**fc.__dict__, "init_overrides": swapped}))
        assert m1.final_objective == pytest.approx(m2.final_objective, rel=1e-6)
        np.testing.assert_allclose(m1.state.pi, 1.0 - m2.state.pi, atol=1e-5)


class TestEstimateMembership:
    def test_matches_fitted_memberships(self):
        config = SyntheticConfig(n_subjects=60, n_biomarkers=2, snr_level="high",
                                 points_per_subject=3, rng_seed=13)
        cohort, truth = generate_dataset(config)
        model = fit(cohort, None, FitConfig(max_iterations=200, tolerance=1e-8,
                                            restarts=3, rng_seed=2))
        pi = estimate_membership(cohort, model.state, Hyperparameters.from_cohort_size(60))
        agreement = np.mean((pi >= 0.5) == (model.state.pi >= 0.5))
        assert agreement >= 0.95


class TestConfigTypes:
    def test_fit_config_validation(self):
        with pytest.raises(ValueError):
            FitConfig(max_iterations=0)
        with pytest.raises(ValueError):
            FitConfig(tolerance=0.0)
        with pytest.raises(ValueError):
            FitConfig(restarts=0)

    def test_responsibility_tensor_shape(self):
        with pytest.raises(ValueError):
            subtraj.ResponsibilityTensor(np.zeros((2, 3)), "subject")
