"""Command line interface.

Subcommands cover the full pipeline: ``simulate`` writes a synthetic
cohort with its ground truth, ``fit`` estimates the mixture from a cohort
CSV, ``evaluate`` scores a saved model against a truth file, ``benchmark``
runs the repeated-dataset sweep, and ``tabulate`` cross-tabulates
sub-population assignments against clinical labels.

Exit codes: 0 success, 1 usage error, 2 data or model error. Every
command is deterministic for a fixed ``--seed``.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__, benchmark as bench, io as sio
from .em import FitConfig, FitError, fit
from .metrics import roc_auc, subdivision_table
from .model import Hyperparameters
from .simulate import CalibrationError, SyntheticConfig, generate_dataset
from .timeshift import alternate_fit

CURVE_GRID_SIZE = 100

_DATA_ERRORS = (
    sio.CohortFormatError,
    sio.ModelFormatError,
    CalibrationError,
    FitError,
    ValueError,
    OSError,
    json.JSONDecodeError,
    KeyError,
)


class _Parser(argparse.ArgumentParser):
    """Argument parser that exits with status 1 on usage errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="subtraj",
                     description="Sub-trajectory discovery in longitudinal biomarker cohorts")
    parser.add_argument("--version", action="version", version=f"subtraj {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p_sim = sub.add_parser("simulate", help="generate a synthetic cohort with ground truth")
    p_sim.add_argument("--config", type=Path, default=None,
                       help="JSON file of generator settings (flags override)")
    p_sim.add_argument("--out", type=Path, required=True, help="output directory")
    p_sim.add_argument("--seed", type=int, default=None, help="override the RNG seed")
    p_sim.set_defaults(func=cmd_simulate)

    p_fit = sub.add_parser("fit", help="fit the trajectory mixture to a cohort CSV")
    p_fit.add_argument("--data", type=Path, required=True, help="cohort CSV")
    p_fit.add_argument("--out", type=Path, required=True, help="model JSON output path")
    p_fit.add_argument("--beta", type=float, default=None,
                       help="split penalty strength (default: 15%% of subjects)")
    p_fit.add_argument("--beta-noise", type=float, default=None,
                       help="noise prior strength (default: 15%% of subjects)")
    p_fit.add_argument("--restarts", type=int, default=3)
    p_fit.add_argument("--seed", type=int, default=0)
    p_fit.add_argument("--granularity", choices=("subject", "observation"),
                       default="subject")
    p_fit.add_argument("--max-iterations", type=int, default=500)
    p_fit.add_argument("--tolerance", type=float, default=1e-6)
    p_fit.add_argument("--estimate-shifts", action="store_true",
                       help="alternate fitting with per-subject time-shift estimation")
    p_fit.add_argument("--shift-window", type=float, default=10.0,
                       help="search shifts in [-window, +window]")
    p_fit.add_argument("--shift-step", type=float, default=0.1)
    p_fit.add_argument("--rounds", type=int, default=3,
                       help="fit/shift alternation rounds")
    p_fit.add_argument("--threads", type=int, default=None,
                       help="parallel workers for restarts")
    p_fit.set_defaults(func=cmd_fit)

    p_eval = sub.add_parser("evaluate", help="score a saved model against ground truth")
    p_eval.add_argument("--model", type=Path, required=True)
    p_eval.add_argument("--truth", type=Path, required=True)
    p_eval.add_argument("--out", type=Path, required=True, help="report directory")
    p_eval.set_defaults(func=cmd_evaluate)

    p_bench = sub.add_parser("benchmark", help="repeated-dataset benchmark sweep")
    p_bench.add_argument("--grid", type=Path, default=None,
                         help="JSON grid config (default: 3x3 canonical grid)")
    p_bench.add_argument("--reps", type=int, default=20)
    p_bench.add_argument("--out", type=Path, required=True)
    p_bench.add_argument("--seed", type=int, default=None, help="override the base seed")
    p_bench.add_argument("--threads", type=int, default=None)
    p_bench.set_defaults(func=cmd_benchmark)

    p_tab = sub.add_parser("tabulate",
                           help="cross-tabulate sub-populations against labels")
    p_tab.add_argument("--model", type=Path, required=True)
    p_tab.add_argument("--data", type=Path, required=True, help="cohort CSV with labels")
    p_tab.add_argument("--out", type=Path, required=True, help="output CSV")
    p_tab.add_argument("--threshold", type=float, default=0.5)
    p_tab.add_argument("--label-column", default="label")
    p_tab.set_defaults(func=cmd_tabulate)

    return parser


def _load_synthetic_config(path: Path | None, seed: int | None) -> SyntheticConfig:
    if path is None:
        config = SyntheticConfig()
    else:
        doc = json.loads(path.read_text())
        if "time_range" in doc:
            doc["time_range"] = tuple(doc["time_range"])
        config = SyntheticConfig(**doc)
    if seed is not None:
        config = replace(config, rng_seed=seed)
    return config


def cmd_simulate(args) -> int:
    config = _load_synthetic_config(args.config, args.seed)
    cohort, truth = generate_dataset(config)
    args.out.mkdir(parents=True, exist_ok=True)
    sio.save_cohort(cohort, args.out / "cohort.csv")
    sio.save_ground_truth(truth, config, args.out / "truth.json")
    grid = np.linspace(config.time_range[0], config.time_range[1], CURVE_GRID_SIZE)
    sio.write_truth_trajectory_table(args.out / "true_curves.csv",
                                     cohort.biomarker_names, truth, grid)
    print(f"wrote cohort of {cohort.n_subjects} subjects x "
          f"{cohort.n_biomarkers} biomarkers to {args.out}")
    return 0


def cmd_fit(args) -> int:
    data = sio.load_cohort(args.data)
    default = Hyperparameters.from_cohort_size(data.n_subjects, args.granularity)
    hyper = Hyperparameters(
        beta=default.beta if args.beta is None else args.beta,
        beta_noise=default.beta_noise if args.beta_noise is None else args.beta_noise,
        granularity=args.granularity,
    )
    config = FitConfig(max_iterations=args.max_iterations, tolerance=args.tolerance,
                       restarts=args.restarts, rng_seed=args.seed)
    if args.estimate_shifts:
        model, estimate = alternate_fit(
            data, hyper, config, outer_rounds=args.rounds,
            bounds=(-args.shift_window, args.shift_window),
            grid_step=args.shift_step, n_jobs=args.threads,
        )
        shifts = estimate.shifts
    else:
        model = fit(data, hyper, config, n_jobs=args.threads)
        shifts = np.asarray(data.time_shifts)

    args.out.parent.mkdir(parents=True, exist_ok=True)
    sio.save_model(model, shifts, args.out, hyper=hyper,
                   biomarker_names=data.biomarker_names,
                   subject_ids=data.subject_ids)
    lo, hi = data.with_shifts(shifts).time_span()
    grid = np.linspace(lo, hi, CURVE_GRID_SIZE)
    curves_path = args.out.with_suffix(".curves.csv")
    sio.write_trajectory_table(curves_path, data.biomarker_names, model.state, grid)

    conf = ", ".join(
        f"{name}={c:.3f}" for name, c in zip(data.biomarker_names,
                                             model.state.split_confidence)
    )
    print(f"fit converged={model.converged} iterations={model.n_iterations} "
          f"objective={model.final_objective:.6f}")
    print(f"split confidence: {conf}")
    print(f"model written to {args.out}, curves to {curves_path}")
    return 0


def cmd_evaluate(args) -> int:
    bundle = sio.load_model(args.model)
    truth, config = sio.load_ground_truth(args.truth)
    state = bundle.model.state
    if truth.split_flags.size != state.n_biomarkers:
        raise sio.ModelFormatError(
            f"truth has {truth.split_flags.size} biomarkers, model has {state.n_biomarkers}"
        )
    if truth.subject_labels.size != state.n_subjects:
        raise sio.ModelFormatError(
            f"truth has {truth.subject_labels.size} subjects, model has {state.n_subjects}"
        )
    scores = bench.score_fit(truth, state, config.time_range)

    args.out.mkdir(parents=True, exist_ok=True)
    rows = []
    for b, name in enumerate(bundle.biomarker_names):
        rows.append({"metric": "ospa", "biomarker": name,
                     "value": float(scores["ospa"][b])})
        rows.append({"metric": "sigma_rel_err", "biomarker": name,
                     "value": float(scores["sigma_rel_err"][b])})
        rows.append({"metric": "split_confidence", "biomarker": name,
                     "value": float(state.split_confidence[b])})
    rows.append({"metric": "membership_accuracy", "biomarker": "",
                 "value": scores["membership_accuracy"]})
    sio.write_metric_rows(args.out / "metrics.csv", rows)

    summary = {
        "ospa_mean": scores["ospa_mean"],
        "sigma_rel_err_median": scores["sigma_rel_err_median"],
        "membership_accuracy": scores["membership_accuracy"],
    }
    if truth.split_flags.any() and not truth.split_flags.all():
        roc_xi = roc_auc(scores["xi_scores"], scores["xi_labels"])
        sio.write_roc_table(args.out / "roc_split.csv", roc_xi, "split_confidence")
        summary["auc_split"] = roc_xi.auc
    roc_pi = roc_auc(scores["pi_scores"], scores["pi_labels"])
    sio.write_roc_table(args.out / "roc_membership.csv", roc_pi, "membership")
    summary["auc_membership"] = roc_pi.auc

    grid = np.linspace(config.time_range[0], config.time_range[1], CURVE_GRID_SIZE)
    sio.write_trajectory_table(args.out / "fitted_curves.csv",
                               bundle.biomarker_names, state, grid)
    sio.write_truth_trajectory_table(args.out / "true_curves.csv",
                                     bundle.biomarker_names, truth, grid)
    (args.out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def _load_grid_config(path: Path | None, seed: int | None):
    base = SyntheticConfig()
    fit_config = FitConfig(max_iterations=200, tolerance=1e-5, restarts=3)
    hyper = None
    counts, levels = bench.DEFAULT_BIOMARKER_GRID, bench.DEFAULT_SNR_GRID
    if path is not None:
        doc = json.loads(path.read_text())
        counts = tuple(doc.pop("biomarker_counts", counts))
        levels = tuple(doc.pop("snr_levels", levels))
        fit_doc = doc.pop("fit", None)
        hyper_doc = doc.pop("hyper", None)
        if "time_range" in doc:
            doc["time_range"] = tuple(doc["time_range"])
        base = SyntheticConfig(**{**dataclasses.asdict(base), **doc})
        if fit_doc:
            fit_config = FitConfig(**{**dataclasses.asdict(fit_config), **fit_doc})
        if hyper_doc:
            hyper = Hyperparameters(**hyper_doc)
    if seed is not None:
        base = replace(base, rng_seed=seed)
    return bench.default_grid(base, counts, levels), hyper, fit_config


def cmd_benchmark(args) -> int:
    grid, hyper, fit_config = _load_grid_config(args.grid, args.seed)
    report = bench.run_benchmark(grid, repetitions=args.reps, hyper=hyper,
                                 fit_config=fit_config, n_jobs=args.threads)
    sio.write_benchmark_report(report, args.out)
    for cell in report.cells:
        flag = " FLAGGED" if cell.flagged else ""
        print(f"B={cell.n_biomarkers:>2} snr={cell.snr_level:<6} "
              f"median_ospa={cell.median_ospa:.4f} "
              f"median_sigma_err={cell.median_sigma_rel_err:.4f} "
              f"auc_split={cell.auc_xi:.3f} auc_membership={cell.auc_pi:.3f}"
              f" failed={cell.n_failed}{flag}")
    print(f"report written to {args.out}")
    return 0


def cmd_tabulate(args) -> int:
    bundle = sio.load_model(args.model)
    data = sio.load_cohort(args.data, label_column=args.label_column)
    if data.subject_ids != bundle.subject_ids:
        raise sio.ModelFormatError(
            "model and cohort subject ids differ; the model must have been "
            "fitted on this cohort"
        )
    labels = data.labels
    if any(label is None for label in labels):
        raise sio.CohortFormatError(
            f"cohort {args.data} has subjects without a {args.label_column!r} value"
        )
    table = subdivision_table(bundle.model.state.pi, labels, threshold=args.threshold)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    table.to_csv(args.out, float_format="%.6f")
    print(table.to_string(float_format=lambda v: f"{v:.3f}"))
    print(f"table written to {args.out}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except _DATA_ERRORS as exc:
        print(f"subtraj: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
