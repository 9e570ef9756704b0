"""Shared fixtures and independent oracles used across the test suite."""

from __future__ import annotations

import numpy as np
import pytest

from subtraj import CohortData, SigmoidParams, SubjectSeries


def grid_argmax(fn, lo: float, hi: float, step: float = 1e-6) -> float:
    """Argmax of ``fn`` on a regular grid, by hierarchical refinement.

    Starts on a coarse grid over [lo, hi] and repeatedly zooms into a
    window of +/- two coarse cells around the running argmax until the
    requested step is reached. Equivalent to scanning the full grid at
    ``step`` for the unimodal objectives it is used on, at a fraction of
    the evaluations.
    """
    current = max(step, (hi - lo) / 400.0)
    window = (lo, hi)
    best = None
    while True:
        grid = np.arange(window[0], window[1] + current / 2, current)
        grid = np.clip(grid, lo, hi)
        values = fn(grid)
        best = float(grid[int(np.argmax(values))])
        if current <= step:
            return best
        current = max(step, current / 10.0)
        window = (max(lo, best - 25 * current), min(hi, best + 25 * current))


def ospa_bruteforce(truth_curves, est_curves, grid) -> float:
    """Independent exhaustive-assignment trajectory-set error.

    Deliberately written with plain nested loops and no shared code with
    the library implementation.
    """
    grid = np.asarray(grid, dtype=float)

    def curve_values(p):
        return p.supremum / (1.0 + np.exp(-p.growth_rate * (grid - p.midpoint)))

    truth_vals = [curve_values(c) for c in truth_curves]
    est_vals = [curve_values(c) for c in est_curves]
    if len(est_vals) <= len(truth_vals):
        small, large = est_vals, truth_vals
    else:
        small, large = truth_vals, est_vals

    def injections(n_small, n_large):
        if n_small == 1:
            return [(j,) for j in range(n_large)]
        result = []
        for j in range(n_large):
            for rest in injections(n_small - 1, n_large):
                if j not in rest:
                    result.append((j,) + rest)
        return result

    best = np.inf
    for phi in injections(len(small), len(large)):
        total = 0.0
        for i, j in enumerate(phi):
            diff = small[i] - large[j]
            total += float(np.mean(diff * diff))
        best = min(best, total)
    return best


def make_cohort(curves, times_per_subject, labels=None, noise=0.0, seed=0,
                shifts=None, names=None) -> CohortData:
    """Small cohort whose subject ``j`` follows ``curves[labels[j]][b]``.

    ``curves`` is a list (per group) of lists (per biomarker) of
    SigmoidParams; with one group every subject follows it.
    """
    rng = np.random.default_rng(seed)
    n_b = len(curves[0])
    if labels is None:
        labels = [0] * len(times_per_subject)
    subjects = []
    for j, times in enumerate(times_per_subject):
        times = np.sort(np.asarray(times, dtype=float))
        values = np.empty((n_b, times.size))
        for b in range(n_b):
            p = curves[labels[j]][b]
            values[b] = p.supremum / (1.0 + np.exp(-p.growth_rate * (times - p.midpoint)))
        if noise:
            values += rng.normal(0.0, noise, size=values.shape)
        subjects.append(SubjectSeries(f"subj{j:03d}", times, values))
    return CohortData(
        subjects=tuple(subjects),
        biomarker_names=tuple(names or (f"bm{i + 1}" for i in range(n_b))),
        time_shifts=shifts,
    )


def assert_cohort_equal(a: CohortData, b: CohortData):
    assert a.biomarker_names == b.biomarker_names
    assert a.subject_ids == b.subject_ids
    assert a.labels == b.labels
    np.testing.assert_array_equal(a.time_shifts, b.time_shifts)
    for sa, sb in zip(a.subjects, b.subjects):
        np.testing.assert_array_equal(sa.times, sb.times)
        np.testing.assert_array_equal(sa.values, sb.values, err_msg=sa.subject_id)


@pytest.fixture
def two_group_curves():
    """One split biomarker (clearly separated pair) and one shared."""
    shared = SigmoidParams(2.5, 0.9, 9.0)
    group1 = [SigmoidParams(3.0, 0.8, 7.0), shared]
    group2 = [SigmoidParams(1.4, 0.9, 12.0), shared]
    return group1, group2
