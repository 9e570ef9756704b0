"""File formats: cohort CSV, model JSON, ground-truth JSON, report tables.

The cohort format is a wide CSV with header
``subject_id,time,<biomarker_1>,...,<biomarker_B>[,label]``; an empty cell
is a missing measurement. Models persist as a single JSON document whose
numeric fields use full-precision repr encoding, so save/load round-trips
are bit-identical and a second save reproduces the first file byte for
byte.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .benchmark import BenchmarkReport
from .em import FittedModel
from .metrics import RocResult
from .model import (
    CohortData,
    Hyperparameters,
    ModelState,
    SigmoidParams,
    SubjectSeries,
    sigmoid_eval,
)
from .simulate import GroundTruth, SyntheticConfig

MODEL_FORMAT_VERSION = 1

RESERVED_COLUMNS = ("subject_id", "time")

COMPONENT_NAMES = ("shared", "sub1", "sub2")


class CohortFormatError(ValueError):
    """A cohort CSV violates the expected schema."""


class ModelFormatError(ValueError):
    """A model JSON document is malformed or violates an invariant."""


def _fmt(value: float) -> str:
    return repr(float(value))


# ---------------------------------------------------------------------------
# Cohort CSV
# ---------------------------------------------------------------------------


def save_cohort(data: CohortData, path) -> None:
    """Write a cohort as wide CSV, one row per visit, sorted per subject."""
    path = Path(path)
    has_labels = any(s.label is not None for s in data.subjects)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        header = ["subject_id", "time", *data.biomarker_names]
        if has_labels:
            header.append("label")
        writer.writerow(header)
        for series in data.subjects:
            for k in range(series.n_visits):
                row = [series.subject_id, _fmt(series.times[k])]
                for b in range(data.n_biomarkers):
                    v = series.values[b, k]
                    row.append("" if not np.isfinite(v) else _fmt(v))
                if has_labels:
                    row.append(series.label or "")
                writer.writerow(row)


def load_cohort(
    path,
    *,
    biomarker_columns: list[str] | None = None,
    label_column: str = "label",
    ignore_unknown_columns: bool = False,
) -> CohortData:
    """Parse and validate a wide cohort CSV.

    Rows are grouped by ``subject_id`` (file order preserved) and sorted
    by time within each subject. When ``biomarker_columns`` is given, any
    other non-reserved column is rejected unless
    ``ignore_unknown_columns`` is set; otherwise every non-reserved,
    non-label column is treated as a biomarker. A subject's clinical label
    is the label of its last visit (falling back to the last non-empty
    one).
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CohortFormatError(f"{path}: file is empty") from None
        header = [h.strip() for h in header]
        for required in RESERVED_COLUMNS:
            if required not in header:
                raise CohortFormatError(f"{path}: missing required column {required!r}")
        if len(set(header)) != len(header):
            raise CohortFormatError(f"{path}: duplicate column names in header")

        label_idx = header.index(label_column) if label_column in header else None
        candidate = [
            h for i, h in enumerate(header)
            if h not in RESERVED_COLUMNS and i != label_idx
        ]
        if biomarker_columns is None:
            biomarkers = candidate
        else:
            biomarkers = list(biomarker_columns)
            missing = [b for b in biomarkers if b not in header]
            if missing:
                raise CohortFormatError(f"{path}: biomarker columns not found: {missing}")
            unknown = [h for h in candidate if h not in biomarkers]
            if unknown and not ignore_unknown_columns:
                raise CohortFormatError(
                    f"{path}: unknown columns {unknown}; pass ignore_unknown_columns "
                    "to skip them"
                )
        if not biomarkers:
            raise CohortFormatError(f"{path}: no biomarker columns")

        sid_idx = header.index("subject_id")
        time_idx = header.index("time")
        bm_idx = [header.index(b) for b in biomarkers]

        rows_by_subject: dict[str, list] = {}
        seen_times: set[tuple[str, float]] = set()
        for line_no, row in enumerate(reader, start=2):
            if not row or all(cell.strip() == "" for cell in row):
                continue
            if len(row) != len(header):
                raise CohortFormatError(
                    f"{path}: line {line_no}: expected {len(header)} cells, got {len(row)}"
                )
            sid = row[sid_idx].strip()
            if not sid:
                raise CohortFormatError(f"{path}: line {line_no}: empty subject_id")
            try:
                t = float(row[time_idx])
            except ValueError:
                raise CohortFormatError(
                    f"{path}: line {line_no}: time {row[time_idx]!r} is not a number"
                ) from None
            if not math.isfinite(t):
                raise CohortFormatError(f"{path}: line {line_no}: non-finite time")
            if (sid, t) in seen_times:
                raise CohortFormatError(
                    f"{path}: line {line_no}: duplicate (subject_id, time) = ({sid}, {t})"
                )
            seen_times.add((sid, t))
            values = []
            for b, idx in zip(biomarkers, bm_idx):
                cell = row[idx].strip()
                if cell == "":
                    values.append(math.nan)
                    continue
                try:
                    values.append(float(cell))
                except ValueError:
                    raise CohortFormatError(
                        f"{path}: line {line_no}: value {cell!r} in column {b!r} "
                        "is not a number"
                    ) from None
            label = row[label_idx].strip() if label_idx is not None else ""
            rows_by_subject.setdefault(sid, []).append((t, values, label or None))

    if not rows_by_subject:
        raise CohortFormatError(f"{path}: no data rows")

    subjects = []
    for sid, rows in rows_by_subject.items():
        rows.sort(key=lambda r: r[0])
        times = np.array([r[0] for r in rows])
        values = np.array([r[1] for r in rows]).T
        label = next((r[2] for r in reversed(rows) if r[2] is not None), None)
        try:
            subjects.append(SubjectSeries(sid, times, values, label=label))
        except ValueError as exc:
            raise CohortFormatError(f"{path}: subject {sid!r}: {exc}") from None
    return CohortData(subjects=tuple(subjects), biomarker_names=tuple(biomarkers))


# ---------------------------------------------------------------------------
# Model JSON
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ModelBundle:
    """A fitted model together with the context needed to reuse it."""

    model: FittedModel
    hyper: Hyperparameters
    biomarker_names: tuple[str, ...]
    subject_ids: tuple[str, ...]
    shifts: np.ndarray


def _curve_dict(p: SigmoidParams) -> dict:
    return {"supremum": p.supremum, "growth_rate": p.growth_rate, "midpoint": p.midpoint}


def _curve_from_dict(d: dict) -> SigmoidParams:
    try:
        return SigmoidParams(float(d["supremum"]), float(d["growth_rate"]),
                             float(d["midpoint"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFormatError(f"invalid sigmoid parameters: {exc}") from None


def save_model(model: FittedModel, shifts, path, *,
               hyper: Hyperparameters,
               biomarker_names,
               subject_ids) -> None:
    """Persist a fitted model as canonical JSON (sorted keys, repr floats)."""
    state = model.state
    shifts = np.zeros(state.n_subjects) if shifts is None else np.asarray(shifts, dtype=float)
    if shifts.shape != (state.n_subjects,):
        raise ValueError("shifts must have one entry per subject")
    if len(tuple(biomarker_names)) != state.n_biomarkers:
        raise ValueError("biomarker_names must match the fitted state")
    if len(tuple(subject_ids)) != state.n_subjects:
        raise ValueError("subject_ids must match the fitted state")
    doc = {
        "format_version": MODEL_FORMAT_VERSION,
        "package_version": __version__,
        "hyperparameters": {
            "beta": hyper.beta,
            "beta_noise": hyper.beta_noise,
            "granularity": hyper.granularity,
        },
        "biomarkers": [
            {
                "name": name,
                "shared": _curve_dict(state.shared[b]),
                "sub1": _curve_dict(state.sub1[b]),
                "sub2": _curve_dict(state.sub2[b]),
                "sigma": float(state.sigma[b]),
                "xi": float(state.xi[b]),
                "split_confidence": float(state.split_confidence[b]),
            }
            for b, name in enumerate(biomarker_names)
        ],
        "subjects": [
            {"id": str(sid), "pi": float(state.pi[j]), "shift": float(shifts[j])}
            for j, sid in enumerate(subject_ids)
        ],
        "objective_trace": [float(v) for v in model.objective_trace],
        "fit": {
            "converged": bool(model.converged),
            "iterations": int(model.n_iterations),
            "restart_index": int(model.restart_index),
        },
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_model(path) -> ModelBundle:
    """Load and validate a model JSON document."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"{path}: not valid JSON: {exc}") from None
    version = doc.get("format_version")
    if version != MODEL_FORMAT_VERSION:
        raise ModelFormatError(
            f"{path}: unsupported format_version {version!r} "
            f"(expected {MODEL_FORMAT_VERSION})"
        )
    try:
        hyper = Hyperparameters(
            beta=float(doc["hyperparameters"]["beta"]),
            beta_noise=float(doc["hyperparameters"]["beta_noise"]),
            granularity=str(doc["hyperparameters"]["granularity"]),
        )
        biomarkers = doc["biomarkers"]
        subjects = doc["subjects"]
        names = tuple(str(b["name"]) for b in biomarkers)
        state = ModelState(
            shared=tuple(_curve_from_dict(b["shared"]) for b in biomarkers),
            sub1=tuple(_curve_from_dict(b["sub1"]) for b in biomarkers),
            sub2=tuple(_curve_from_dict(b["sub2"]) for b in biomarkers),
            sigma=np.array([float(b["sigma"]) for b in biomarkers]),
            xi=np.array([float(b["xi"]) for b in biomarkers]),
            pi=np.array([float(s["pi"]) for s in subjects]),
        )
        subject_ids = tuple(str(s["id"]) for s in subjects)
        shifts = np.array([float(s["shift"]) for s in subjects])
        model = FittedModel(
            state=state,
            objective_trace=np.asarray(doc["objective_trace"], dtype=float),
            converged=bool(doc["fit"]["converged"]),
            restart_index=int(doc["fit"]["restart_index"]),
        )
    except (KeyError, TypeError) as exc:
        raise ModelFormatError(f"{path}: missing or malformed field: {exc}") from None
    except ValueError as exc:
        raise ModelFormatError(f"{path}: invariant violated: {exc}") from None
    return ModelBundle(model=model, hyper=hyper, biomarker_names=names,
                       subject_ids=subject_ids, shifts=shifts)


# ---------------------------------------------------------------------------
# Ground truth JSON
# ---------------------------------------------------------------------------


def save_ground_truth(truth: GroundTruth, config: SyntheticConfig, path) -> None:
    doc = {
        "config": dataclasses.asdict(config),
        "split_flags": [bool(f) for f in truth.split_flags],
        "subject_labels": [int(v) for v in truth.subject_labels],
        "true_curves": [[_curve_dict(c) for c in pair] for pair in truth.true_curves],
        "true_sigma": [float(v) for v in truth.true_sigma],
        "true_shifts": [float(v) for v in truth.true_shifts],
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_ground_truth(path) -> tuple[GroundTruth, SyntheticConfig]:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
        config_doc = dict(doc["config"])
        config_doc["time_range"] = tuple(config_doc["time_range"])
        config = SyntheticConfig(**config_doc)
        truth = GroundTruth(
            split_flags=np.array(doc["split_flags"], dtype=bool),
            subject_labels=np.array(doc["subject_labels"], dtype=int),
            true_curves=tuple(
                tuple(_curve_from_dict(c) for c in pair) for pair in doc["true_curves"]
            ),
            true_sigma=np.array(doc["true_sigma"], dtype=float),
            true_shifts=np.array(doc["true_shifts"], dtype=float),
        )
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"{path}: not valid JSON: {exc}") from None
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFormatError(f"{path}: malformed ground truth: {exc}") from None
    return truth, config


# ---------------------------------------------------------------------------
# Plot-ready tables
# ---------------------------------------------------------------------------


def write_trajectory_table(path, biomarker_names, state: ModelState, grid) -> None:
    """Long-format CSV of fitted curves sampled on ``grid``.

    Columns: biomarker, component (shared/sub1/sub2), time, value.
    """
    grid = np.asarray(grid, dtype=float)
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["biomarker", "component", "time", "value"])
        for b, name in enumerate(biomarker_names):
            for comp_name, curves in zip(COMPONENT_NAMES,
                                         (state.shared, state.sub1, state.sub2)):
                values = sigmoid_eval(curves[b], grid)
                for t, v in zip(grid, values):
                    writer.writerow([name, comp_name, _fmt(t), _fmt(v)])


def write_truth_trajectory_table(path, biomarker_names, truth: GroundTruth, grid) -> None:
    """Long-format CSV of generating curves sampled on ``grid``."""
    grid = np.asarray(grid, dtype=float)
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["biomarker", "component", "time", "value"])
        for b, name in enumerate(biomarker_names):
            for i, curve in enumerate(truth.true_curves[b]):
                comp = f"true_{i + 1}" if truth.split_flags[b] else "true"
                values = sigmoid_eval(curve, grid)
                for t, v in zip(grid, values):
                    writer.writerow([name, comp, _fmt(t), _fmt(v)])


def write_roc_table(path, roc: RocResult, curve_name: str = "roc") -> None:
    """Plot-ready ROC points: curve, threshold, fpr, tpr."""
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["curve", "threshold", "fpr", "tpr"])
        for thr, fpr, tpr in zip(roc.thresholds, roc.fpr, roc.tpr):
            writer.writerow([curve_name, _fmt(thr), _fmt(fpr), _fmt(tpr)])


def write_metric_rows(path, rows: list[dict]) -> None:
    """Generic long-format metric CSV writer (stable column order)."""
    if not rows:
        Path(path).write_text("")
        return
    fields = list(rows[0].keys())
    with Path(path).open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (_fmt(v) if isinstance(v, float) else v)
                             for k, v in row.items()})


def write_benchmark_report(report: BenchmarkReport, out_dir) -> None:
    """Emit the benchmark artefacts: long CSV, summary JSON, ROC points."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_metric_rows(out_dir / "benchmark.csv", report.metric_rows())

    summary = {
        "repetitions": report.repetitions,
        "cells": [dataclasses.asdict(cell) for cell in report.cells],
    }
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")

    roc_rows = []
    for (n_b, snr), curves in sorted(report.roc_curves.items()):
        for which, roc in curves.items():
            for thr, fpr, tpr in zip(roc.thresholds, roc.fpr, roc.tpr):
                roc_rows.append({
                    "n_biomarkers": n_b, "snr_level": snr, "curve": which,
                    "threshold": float(thr), "fpr": float(fpr), "tpr": float(tpr),
                })
    write_metric_rows(out_dir / "roc_points.csv", roc_rows)
