"""Scoring of fitted trajectory mixtures against known ground truth.

Covers the trajectory-set error (minimum summed curve-to-curve MSE over
assignments), relative noise error, ROC/AUC for split detection and
subject clustering, and the clinical cross-tabulation of sub-population
assignments.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import permutations

import numpy as np
import pandas as pd
from sklearn.metrics import auc as _trapezoid_auc
from sklearn.metrics import roc_curve as _sk_roc_curve

from .model import SigmoidParams, _curve_matrix

OVERALL_ROW = "overall_share"


@dataclass(frozen=True, eq=False)
class CurveSet:
    """A configuration of sigmoid trajectories sampled on a common grid."""

    curves: tuple[SigmoidParams, ...]
    eval_grid: np.ndarray

    def __post_init__(self):
        curves = tuple(self.curves)
        grid = np.asarray(self.eval_grid, dtype=float)
        if not curves:
            raise ValueError("curve set must contain at least one curve")
        if grid.ndim != 1 or grid.size < 2:
            raise ValueError("eval_grid must hold at least two time points")
        object.__setattr__(self, "curves", curves)
        object.__setattr__(self, "eval_grid", grid)

    def sample(self) -> np.ndarray:
        """Curve values on the grid, shape (len(curves), N)."""
        return _curve_matrix(self.curves, self.eval_grid).T


@dataclass(frozen=True, eq=False)
class RocResult:
    """ROC curve points and the trapezoidal area under them."""

    thresholds: np.ndarray
    tpr: np.ndarray
    fpr: np.ndarray
    auc: float


def ospa(truth: CurveSet, estimate: CurveSet) -> float:
    """Minimum summed per-curve MSE over assignments between the two sets.

    The smaller set is injected into the larger one; every injection is
    enumerated and the sum of per-pair grid MSEs minimised. There is no
    penalty for a cardinality mismatch, so comparing a singleton against
    the matching member of a pair scores zero.
    """
    if truth.eval_grid.shape != estimate.eval_grid.shape or not np.array_equal(
        truth.eval_grid, estimate.eval_grid
    ):
        raise ValueError("curve sets must share the same evaluation grid")
    truth_vals = truth.sample()
    est_vals = estimate.sample()
    if len(estimate.curves) <= len(truth.curves):
        small, large = est_vals, truth_vals
    else:
        small, large = truth_vals, est_vals
    m = small.shape[0]
    best = np.inf
    for assignment in permutations(range(large.shape[0]), m):
        cost = 0.0
        for i, j in enumerate(assignment):
            cost += float(np.mean(np.square(small[i] - large[j])))
        best = min(best, cost)
    return best


def sigma_relative_error(true_sigma, est_sigma) -> np.ndarray:
    """Per-biomarker relative error ``|est - true| / true``."""
    true_sigma = np.asarray(true_sigma, dtype=float)
    est_sigma = np.asarray(est_sigma, dtype=float)
    if true_sigma.shape != est_sigma.shape:
        raise ValueError("true and estimated sigma must have the same length")
    if np.any(true_sigma <= 0):
        raise ValueError("true sigma values must be positive")
    return np.abs(est_sigma - true_sigma) / true_sigma


def roc_auc(scores, labels) -> RocResult:
    """ROC over all score thresholds; AUC is the trapezoidal area.

    Equivalently, the AUC is the probability that a random positive
    outscores a random negative, with ties counted one half.
    """
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels).astype(bool)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be equal-length vectors")
    if labels.all() or not labels.any():
        raise ValueError("labels must contain both classes")
    fpr, tpr, thresholds = _sk_roc_curve(labels.astype(int), scores, drop_intermediate=False)
    return RocResult(thresholds=thresholds, tpr=tpr, fpr=fpr,
                     auc=float(_trapezoid_auc(fpr, tpr)))


def align_membership(pi, labels) -> tuple[np.ndarray, float]:
    """Resolve the sub-population label swap against reference labels.

    The model is symmetric under exchanging the two sub-populations, so
    membership probabilities are compared to binary reference labels under
    both orientations; the one with the higher hard accuracy at threshold
    0.5 wins. Returns the oriented scores (probability of reference class
    1) and that accuracy.
    """
    pi = np.asarray(pi, dtype=float)
    labels = np.asarray(labels).astype(int)
    if pi.shape != labels.shape:
        raise ValueError("pi and labels must have the same length")
    acc_keep = float(np.mean((pi >= 0.5) == (labels == 1)))
    acc_swap = float(np.mean(((1.0 - pi) >= 0.5) == (labels == 1)))
    if acc_swap > acc_keep:
        return 1.0 - pi, acc_swap
    return pi, acc_keep


def membership_accuracy(pi, labels) -> float:
    """Hard assignment accuracy after resolving the label swap."""
    return align_membership(pi, labels)[1]


def subdivision_table(pi, labels, threshold: float = 0.5) -> pd.DataFrame:
    """Row-normalised cross-tabulation of clinical labels by sub-population.

    Subjects with membership probability >= ``threshold`` are assigned to
    sub-population 1. Each label row holds the fraction of that category
    per sub-population (rows sum to 1); the final ``overall_share`` row is
    the share of all subjects per sub-population.
    """
    pi = np.asarray(pi, dtype=float)
    labels = [str(lab) for lab in labels]
    if pi.size != len(labels):
        raise ValueError("pi and labels must have the same length")
    in_pop1 = pi >= threshold
    categories = sorted(set(labels))
    rows = {}
    for cat in categories:
        mask = np.array([lab == cat for lab in labels])
        count = int(mask.sum())
        rows[cat] = (float(np.sum(in_pop1 & mask)) / count,
                     float(np.sum(~in_pop1 & mask)) / count)
    rows[OVERALL_ROW] = (float(np.mean(in_pop1)), float(np.mean(~in_pop1)))
    table = pd.DataFrame.from_dict(rows, orient="index",
                                   columns=["subpopulation_1", "subpopulation_2"])
    table.index.name = "condition"
    return table
