"""Synthetic cohort generation with known sub-trajectory structure.

Cohorts are built from randomly drawn sigmoid trajectories; a chosen
fraction of biomarkers receives a second sub-trajectory calibrated so the
mean squared gap between the pair hits a target value exactly, which
controls the difficulty of the recovery task. Subjects are split evenly
between the two sub-populations and observed at uniformly random times
with additive Gaussian noise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import CohortData, SigmoidParams, SubjectSeries, sigmoid_eval

SNR_MSE_TARGETS = {"low": 0.1, "normal": 0.5, "high": 1.0}

LABEL_NAMES = ("group_1", "group_2")


class CalibrationError(RuntimeError):
    """Could not produce a curve pair with the requested separation."""


@dataclass(frozen=True)
class SyntheticConfig:
    """Settings of one synthetic cohort draw.

    ``snr_level`` names the target mean squared gap between paired
    sub-trajectories (low = 0.1, normal = 0.5, high = 1.0); higher targets
    separate the sub-populations more clearly. ``split_fraction`` of the
    biomarkers (rounded up) receive a sub-trajectory pair.
    """

    n_subjects: int = 100
    n_biomarkers: int = 5
    snr_level: str = "normal"
    noise_std: float = 0.5
    time_range: tuple[float, float] = (0.0, 20.0)
    points_per_subject: int = 1
    split_fraction: float = 0.5
    rng_seed: int = 0

    def __post_init__(self):
        if self.n_subjects < 2:
            raise ValueError("n_subjects must be at least 2")
        if self.n_biomarkers < 1:
            raise ValueError("n_biomarkers must be at least 1")
        if self.snr_level not in SNR_MSE_TARGETS:
            raise ValueError(f"snr_level must be one of {sorted(SNR_MSE_TARGETS)}")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")
        lo, hi = self.time_range
        if not lo < hi:
            raise ValueError("time_range must be an increasing pair")
        object.__setattr__(self, "time_range", (float(lo), float(hi)))
        if self.points_per_subject < 1:
            raise ValueError("points_per_subject must be at least 1")
        if not 0.0 <= self.split_fraction <= 1.0:
            raise ValueError("split_fraction must lie in [0, 1]")

    @property
    def target_mse(self) -> float:
        return SNR_MSE_TARGETS[self.snr_level]

    @property
    def n_split(self) -> int:
        return math.ceil(self.split_fraction * self.n_biomarkers)


@dataclass(frozen=True, eq=False)
class GroundTruth:
    """Generator-side truth used to score a fitted model.

    ``true_curves[b]`` holds one sigmoid for non-split biomarkers and the
    (sub-population 1, sub-population 2) pair for split ones; a subject
    with label ``g`` is generated from ``true_curves[b][g]`` when the
    biomarker splits and from the single curve otherwise.
    """

    split_flags: np.ndarray
    subject_labels: np.ndarray
    true_curves: tuple[tuple[SigmoidParams, ...], ...]
    true_sigma: np.ndarray
    true_shifts: np.ndarray

    def __post_init__(self):
        flags = np.asarray(self.split_flags, dtype=bool)
        labels = np.asarray(self.subject_labels, dtype=int)
        curves = tuple(tuple(c) for c in self.true_curves)
        sigma = np.asarray(self.true_sigma, dtype=float)
        shifts = np.asarray(self.true_shifts, dtype=float)
        if len(curves) != flags.size or sigma.size != flags.size:
            raise ValueError("per-biomarker fields must have equal lengths")
        for flag, pair in zip(flags, curves):
            if len(pair) != (2 if flag else 1):
                raise ValueError("split biomarkers need two curves, others one")
        if labels.size != shifts.size:
            raise ValueError("per-subject fields must have equal lengths")
        object.__setattr__(self, "split_flags", flags)
        object.__setattr__(self, "subject_labels", labels)
        object.__setattr__(self, "true_curves", curves)
        object.__setattr__(self, "true_sigma", sigma)
        object.__setattr__(self, "true_shifts", shifts)

    def curve_for(self, biomarker: int, label: int) -> SigmoidParams:
        pair = self.true_curves[biomarker]
        return pair[label] if self.split_flags[biomarker] else pair[0]


def sample_trajectory(rng: np.random.Generator,
                      time_range: tuple[float, float] = (0.0, 20.0)) -> SigmoidParams:
    """Random trajectory whose transition lands inside the observation window."""
    lo, hi = time_range
    span = hi - lo
    supremum = _truncated_normal(rng, 3.0, 1.0, 0.5)
    growth = _truncated_normal(rng, 0.8, 0.3, 0.1)
    midpoint = float(rng.uniform(lo + 0.2 * span, hi - 0.2 * span))
    return SigmoidParams(supremum=supremum, growth_rate=growth, midpoint=midpoint)


def _truncated_normal(rng, mean, sd, lower):
    for _ in range(1000):
        v = float(rng.normal(mean, sd))
        if v > lower:
            return v
    raise CalibrationError(f"could not draw a normal value above {lower}")


def curve_pair_mse(first: SigmoidParams, second: SigmoidParams,
                   time_range: tuple[float, float], grid_size: int = 200) -> float:
    """Mean squared gap between two curves on a uniform grid."""
    grid = np.linspace(time_range[0], time_range[1], grid_size)
    return float(np.mean(np.square(sigmoid_eval(first, grid) - sigmoid_eval(second, grid))))


def calibrate_separation(
    base: SigmoidParams,
    target_mse: float,
    time_range: tuple[float, float] = (0.0, 20.0),
    grid_size: int = 200,
    rng: np.random.Generator | None = None,
    max_attempts: int = 20,
) -> SigmoidParams:
    """Second curve whose grid MSE against ``base`` hits ``target_mse``.

    A random perturbation direction is drawn in (log supremum, log growth,
    midpoint) space, which keeps the perturbed curve valid for any
    magnitude; the magnitude is then bisected until the pair MSE lies
    within 1% of the target. Directions that cannot reach the target are
    redrawn a bounded number of times.
    """
    if not target_mse > 0:
        raise ValueError("target_mse must be positive")
    if rng is None:
        rng = np.random.default_rng()
    grid = np.linspace(time_range[0], time_range[1], grid_size)
    base_vals = sigmoid_eval(base, grid)
    log_base = np.array([math.log(base.supremum), math.log(base.growth_rate), base.midpoint])

    def curve_at(direction, magnitude):
        vec = log_base + magnitude * direction
        # Clamp the log-scale entries so huge bracketing magnitudes stay
        # inside exp()'s range; the pair MSE saturates long before this.
        return SigmoidParams(math.exp(min(max(vec[0], -200.0), 200.0)),
                             math.exp(min(max(vec[1], -200.0), 200.0)),
                             vec[2])

    def mse_at(direction, magnitude):
        vals = sigmoid_eval(curve_at(direction, magnitude), grid)
        return float(np.mean(np.square(vals - base_vals)))

    for _ in range(max_attempts):
        direction = rng.normal(size=3)
        norm = float(np.linalg.norm(direction))
        if norm == 0:
            continue
        direction /= norm
        hi = 1.0
        reached = False
        for _ in range(60):
            if mse_at(direction, hi) >= target_mse:
                reached = True
                break
            hi *= 2.0
        if not reached:
            continue
        lo = 0.0
        for _ in range(100):
            mid = 0.5 * (lo + hi)
            mse = mse_at(direction, mid)
            if abs(mse - target_mse) <= 0.01 * target_mse:
                return curve_at(direction, mid)
            if mse < target_mse:
                lo = mid
            else:
                hi = mid
        raise CalibrationError(
            f"bisection did not reach {target_mse} within 100 steps"
        )
    raise CalibrationError(
        f"no perturbation direction reached MSE {target_mse} after {max_attempts} attempts"
    )


def generate_dataset(config: SyntheticConfig) -> tuple[CohortData, GroundTruth]:
    """Draw one synthetic cohort and its generating truth.

    Deterministic for a fixed ``config.rng_seed``. Subjects are labelled
    ``group_1`` / ``group_2`` in (almost) equal numbers; observations are
    the subject's generating curve plus Gaussian noise, at times sampled
    uniformly over the configured window.
    """
    rng = np.random.default_rng(config.rng_seed)
    n, b = config.n_subjects, config.n_biomarkers
    lo, hi = config.time_range

    split_flags = np.zeros(b, dtype=bool)
    if config.n_split:
        split_flags[rng.choice(b, size=config.n_split, replace=False)] = True

    labels = np.zeros(n, dtype=int)
    labels[: n // 2] = 1
    labels = labels[rng.permutation(n)]

    curves: list[tuple[SigmoidParams, ...]] = []
    for flag in split_flags:
        base = sample_trajectory(rng, config.time_range)
        if flag:
            second = calibrate_separation(base, config.target_mse, config.time_range,
                                          rng=rng)
            curves.append((base, second))
        else:
            curves.append((base,))

    truth = GroundTruth(
        split_flags=split_flags,
        subject_labels=labels,
        true_curves=tuple(curves),
        true_sigma=np.full(b, config.noise_std),
        true_shifts=np.zeros(n),
    )

    subjects = []
    for j in range(n):
        times = np.sort(rng.uniform(lo, hi, size=config.points_per_subject))
        values = np.empty((b, config.points_per_subject))
        for bm in range(b):
            curve = truth.curve_for(bm, int(labels[j]))
            values[bm] = sigmoid_eval(curve, times)
        values += rng.normal(0.0, config.noise_std, size=values.shape)
        subjects.append(SubjectSeries(
            subject_id=f"S{j:04d}",
            times=times,
            values=values,
            label=LABEL_NAMES[labels[j]],
        ))

    cohort = CohortData(
        subjects=tuple(subjects),
        biomarker_names=tuple(f"bm{i + 1}" for i in range(b)),
        time_shifts=np.zeros(n),
    )
    return cohort, truth
