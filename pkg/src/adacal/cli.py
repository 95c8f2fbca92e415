"""Command-line interface.

Subcommands:

    fit-vanilla   grid-search a constant temperature on a CALD dataset
    fit-adats     train the sample-adaptive temperature model
    evaluate      metric table for a dataset under zero or more models
    report        full diagnostic bundle for one adaptive model
    sweep         evaluate models across a manifest of datasets, to CSV
    selfcheck     numerically verify every hand-written gradient

Exit codes: 0 success, 1 usage or argument errors, 2 unreadable or invalid
input files, 3 numerical failures (selfcheck failures, diverged training).
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from . import adats, analysis, metrics, tempscale
from .dataset import read_dataset
from .errors import (AdacalError, CaldFormatError, DatasetValidationError,
                     ManifestError, ModelFormatError, TrainingDivergedError)

_METRIC_NAMES = ("accuracy", "ece", "ada_ece", "nll", "brier",
                 "aurra_confidence", "aurra_entropy", "aurra_dempster_shafer")


def _metric_row(dataset, temps, bins: int) -> dict:
    return {
        "accuracy": metrics.accuracy(dataset),
        "ece": metrics.ece(dataset, temps, bins),
        "ada_ece": metrics.ada_ece(dataset, temps, bins),
        "nll": metrics.nll(dataset, temps),
        "brier": metrics.brier(dataset, temps),
        "aurra_confidence": metrics.aurra(dataset, temps, "confidence"),
        "aurra_entropy": metrics.aurra(dataset, temps, "entropy"),
        "aurra_dempster_shafer": metrics.aurra(dataset, temps, "dempster_shafer"),
    }


def _load_any_model(path):
    """Returns ("vanilla", scaler) or ("adats", model) based on the file's
    kind field."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            kind = json.load(fh).get("kind")
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"{path}: not valid JSON: {exc}") from exc
    except AttributeError as exc:
        raise ModelFormatError(f"{path}: not a model file") from exc
    if kind == "vanilla":
        return kind, tempscale.load_scaler(path)
    if kind == "adats":
        return kind, adats.load_model(path)
    raise ModelFormatError(f"{path}: unknown model kind {kind!r}")


def _model_temps(kind, model, dataset):
    if kind == "vanilla":
        return model.temperature
    temps, _ = adats.calibrate(model, dataset)
    return temps


def _parse_grid(text: str) -> tempscale.GridSpec:
    parts = text.split(":")
    if len(parts) != 3:
        raise ValueError(f"grid must look like LO:HI:STEP, got {text!r}")
    try:
        lo, hi, step = (float(p) for p in parts)
    except ValueError:
        raise ValueError(f"grid must be three numbers LO:HI:STEP, got {text!r}")
    return tempscale.GridSpec(lo=lo, hi=hi, step=step)


def _write_json(path, payload) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_csv(path, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        csv.writer(fh).writerows(rows)


# --score takes the short spelling; the metrics module uses the full one
_SCORE_FLAGS = {"confidence": "confidence", "entropy": "entropy",
                "ds": "dempster_shafer"}


# ---------------------------------------------------------------------------
# subcommand implementations

def cmd_fit_vanilla(args) -> int:
    dataset = read_dataset(args.data)
    grid = _parse_grid(args.grid) if args.grid else tempscale.GridSpec()
    scaler = tempscale.fit_vanilla(dataset, objective=args.objective,
                                   grid=grid, bins=args.bins,
                                   metadata={"seed": args.seed,
                                             "data": os.fspath(args.data)})
    tempscale.save_scaler(scaler, args.out)
    print(f"fitted constant temperature {scaler.temperature:.6f} "
          f"({scaler.fit_objective} {scaler.achieved_objective:.6f}) "
          f"-> {args.out}")
    return 0


def cmd_fit_adats(args) -> int:
    dataset = read_dataset(args.data)
    cfg = adats.TrainConfig(
        epochs=args.epochs, lr=args.lr, batch_size=args.batch_size,
        seed=args.seed, d_z=args.latent_dim, temp_floor=args.temp_floor,
        elbo_weight=args.elbo_weight, ce_weight=args.ce_weight,
        freeze_vae=args.freeze_vae,
        route_ce_through_vae=not args.no_route_ce)
    model, report = adats.train(dataset, cfg)
    adats.save_model(model, args.out)
    temps, _ = adats.calibrate(model, dataset)
    print(f"trained adaptive scaler for {cfg.epochs} epochs: "
          f"ece {report.final_ece_raw:.6f} -> {report.final_ece_calibrated:.6f}, "
          f"temperature mean {float(np.mean(temps)):.6f} "
          f"std {float(np.std(temps)):.6f} -> {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    dataset = read_dataset(args.data)
    methods = [("uncalibrated", None, 1.0)]
    seen = {}
    for path in args.model or []:
        kind, model = _load_any_model(path)
        name = os.path.splitext(os.path.basename(path))[0]
        seen[name] = seen.get(name, 0) + 1
        if seen[name] > 1:
            name = f"{name}#{seen[name]}"
        methods.append((name, kind, _model_temps(kind, model, dataset)))

    rows = [(name, kind, _metric_row(dataset, temps, args.bins))
            for name, kind, temps in methods]

    name_width = max(len(r[0]) for r in rows) + 2
    widths = [max(len(m), 8) for m in _METRIC_NAMES]
    print("method".ljust(name_width)
          + "  ".join(m.rjust(w) for m, w in zip(_METRIC_NAMES, widths)))
    for name, _, values in rows:
        print(name.ljust(name_width)
              + "  ".join(f"{values[m]:.6f}".rjust(w)
                          for m, w in zip(_METRIC_NAMES, widths)))

    if args.out:
        _write_json(args.out, {
            "data": os.fspath(args.data),
            "bins": args.bins,
            "methods": [{"name": name, "kind": kind or "none",
                         "metrics": values}
                        for name, kind, values in rows],
        })
    return 0


def cmd_report(args) -> int:
    dataset = read_dataset(args.data)
    kind, model = _load_any_model(args.model)
    if kind != "adats":
        raise ModelFormatError(
            "report needs an adaptive model; fit one with fit-adats")
    os.makedirs(args.out, exist_ok=True)
    temps, _ = adats.calibrate(model, dataset)
    bins = args.bins

    files = []

    def _emit(name, payload):
        _write_json(os.path.join(args.out, name), payload)
        files.append(name)

    def _emit_csv(name, rows):
        _write_csv(os.path.join(args.out, name), rows)
        files.append(name)

    score = _SCORE_FLAGS[args.score]
    for label, t in (("raw", 1.0), ("calibrated", temps)):
        diagram = metrics.reliability(dataset, t, bins)
        _emit(f"reliability_{label}.json", diagram.to_json_dict())
        _emit_csv(f"reliability_{label}.csv", diagram.csv_rows())
        contrib = metrics.contribution_histogram(dataset, t, bins)
        _emit(f"contribution_{label}.json", contrib.to_json_dict())
        _emit_csv(f"contribution_{label}.csv", contrib.csv_rows())
        curve = metrics.rejection_curve(dataset, t, score)
        _emit(f"rejection_{label}.json", curve.to_json_dict())
        _emit_csv(f"rejection_{label}.csv", curve.csv_rows())

    hist = analysis.temperature_histogram(model, dataset, args.partition)
    _emit("temperature_histogram.json", hist.to_json_dict())
    rows = [["group", "temperature"]]
    for group, values in hist.groups.items():
        rows.extend([group, repr(float(v))] for v in values)
    _emit_csv("temperature_histogram.csv", rows)

    trace = analysis.class_mean_interpolation(model, dataset,
                                              args.class_i, args.class_j,
                                              steps=args.steps)
    _emit("interpolation.json", trace.to_json_dict())
    _emit_csv("interpolation.csv",
              [["alpha", "temperature"]]
              + [[repr(float(a)), repr(float(t))]
                 for a, t in zip(trace.alphas, trace.temperatures)])

    analysis.export_latents(model, dataset, os.path.join(args.out, "latents.csv"),
                            bins=bins)
    files.append("latents.csv")

    summary = {
        "data": os.fspath(args.data),
        "model": os.fspath(args.model),
        "bins": bins,
        "n_samples": dataset.n,
        "metrics_raw": _metric_row(dataset, 1.0, bins),
        "metrics_calibrated": _metric_row(dataset, temps, bins),
        "temperature": {"mean": float(np.mean(temps)),
                        "std": float(np.std(temps)),
                        "min": float(np.min(temps)),
                        "max": float(np.max(temps))},
        "files": sorted(files),
    }
    _write_json(os.path.join(args.out, "report.json"), summary)
    print(f"wrote report ({len(files) + 1} files) -> {args.out}")
    return 0


def _load_manifest(path):
    """Parse a sweep manifest: corrupted-dataset entries plus the clean
    baseline file. Returns (entries, baseline_path)."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ManifestError(f"manifest is not valid JSON: {exc}") from exc
    if not isinstance(payload, dict):
        raise ManifestError("manifest must be a JSON object")
    entries = payload.get("entries")
    if not isinstance(entries, list) or not entries:
        raise ManifestError("manifest needs a non-empty 'entries' list")
    for i, entry in enumerate(entries):
        if (not isinstance(entry, dict)
                or not {"path", "corruption_name", "severity"} <= set(entry)):
            raise ManifestError(f"manifest entry {i} needs 'path', "
                                "'corruption_name' and 'severity' fields")
        name = entry["corruption_name"]
        if not isinstance(name, str) or not name:
            raise ManifestError(f"manifest entry {i}: corruption_name must be "
                                "a non-empty string")
        severity = entry["severity"]
        if not isinstance(severity, int) or not 1 <= severity <= 5:
            raise ManifestError(f"manifest entry {i}: severity must be an "
                                f"integer in 1..5, got {severity!r}")
    baseline = payload.get("baseline")
    if not isinstance(baseline, str) or not baseline:
        raise ManifestError("manifest needs a 'baseline' path (the clean "
                            "test file)")
    return entries, baseline


def cmd_sweep(args) -> int:
    entries, baseline_path = _load_manifest(args.manifest)
    models = []
    for path in args.model or []:
        kind, model = _load_any_model(path)
        models.append((os.path.splitext(os.path.basename(path))[0], kind, model))

    def _per_method(dataset):
        out = [("uncalibrated", _metric_row(dataset, 1.0, args.bins))]
        for name, kind, model in models:
            temps = _model_temps(kind, model, dataset)
            out.append((name, _metric_row(dataset, temps, args.bins)))
        return out

    rows = []
    meta_entries = []
    for entry in entries:
        dataset = read_dataset(entry["path"])
        for method_name, values in _per_method(dataset):
            for metric_name in _METRIC_NAMES:
                rows.append((entry["corruption_name"], entry["severity"],
                             method_name, metric_name, values[metric_name]))
        meta_entries.append({
            "corruption_name": entry["corruption_name"],
            "severity": entry["severity"], "path": entry["path"],
            "n": dataset.n, "k": dataset.k,
        })

    # the clean baseline goes to the meta file, keeping the CSV strictly
    # entries x methods x metrics
    clean = read_dataset(baseline_path)
    baseline_metrics = {name: values for name, values in _per_method(clean)}

    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["corruption", "severity", "method", "metric", "value"])
        for corruption, severity, method_name, metric_name, value in rows:
            writer.writerow([corruption, str(severity), method_name,
                             metric_name, repr(value)])
    _write_json(f"{args.out}.meta.json", {
        "bins": args.bins,
        "models": [name for name, _, _ in models],
        "entries": meta_entries,
        "baseline": {"path": baseline_path, "n": clean.n, "k": clean.k,
                     "metrics": baseline_metrics},
    })
    print(f"wrote {len(rows)} rows -> {args.out}")
    return 0


def cmd_selfcheck(args) -> int:
    report = analysis.run_selfcheck(seed=args.seed, instances=args.instances,
                                    latent_instances=args.latent_instances)
    for result in report.results:
        status = "PASS" if result.passed else "FAIL"
        print(f"{status} {result.name}: max error {result.max_error:.3e} "
              f"(tolerance {result.tolerance:.1e}, "
              f"{result.instances} instances)")
    if args.out:
        _write_json(args.out, report.to_json_dict())
    if report.passed:
        print("all gradient checks passed")
        return 0
    print("gradient checks FAILED", file=sys.stderr)
    return 3


# ---------------------------------------------------------------------------
# parser

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="adacal",
        description="Post-hoc confidence calibration by constant and "
                    "sample-adaptive temperature scaling.",
        exit_on_error=False)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit-vanilla", exit_on_error=False,
                       help="grid-search a constant temperature")
    p.add_argument("--data", required=True, help="CALD dataset to fit on")
    p.add_argument("--out", required=True, help="output scaler JSON path")
    p.add_argument("--objective", choices=tempscale.OBJECTIVES, default="ece")
    p.add_argument("--bins", type=int, default=metrics.DEFAULT_BINS)
    p.add_argument("--grid", default=None, metavar="LO:HI:STEP")
    p.add_argument("--seed", type=int, default=0,
                   help="recorded in metadata; the fit itself is deterministic")
    p.set_defaults(func=cmd_fit_vanilla)

    p = sub.add_parser("fit-adats", exit_on_error=False,
                       help="train the sample-adaptive temperature model")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output model JSON path")
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--latent-dim", type=int, default=16)
    p.add_argument("--temp-floor", type=float, default=0.05)
    p.add_argument("--elbo-weight", type=float, default=1.0)
    p.add_argument("--ce-weight", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--freeze-vae", action="store_true",
                   help="ablation: identical priors, zeroed encoder/decoder, "
                        "train the temperature head only")
    p.add_argument("--no-route-ce", action="store_true",
                   help="ablation: stop the label-likelihood gradient at the "
                        "temperature head's input")
    p.set_defaults(func=cmd_fit_adats)

    p = sub.add_parser("evaluate", exit_on_error=False,
                       help="print a metric table for a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--model", action="append", default=[],
                   help="model JSON (repeatable; vanilla or adats)")
    p.add_argument("--bins", type=int, default=metrics.DEFAULT_BINS)
    p.add_argument("--out", default=None, help="also write the table as JSON")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", exit_on_error=False,
                       help="write the diagnostic bundle for an adaptive model")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True, help="adats model JSON")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--bins", type=int, default=metrics.DEFAULT_BINS)
    p.add_argument("--partition", choices=("class", "correctness"),
                   default="correctness",
                   help="grouping for the temperature histogram")
    p.add_argument("--score", choices=sorted(_SCORE_FLAGS), default="confidence",
                   help="ordering score for the rejection-curve artifacts")
    p.add_argument("--class-i", type=int, default=0)
    p.add_argument("--class-j", type=int, default=1)
    p.add_argument("--steps", type=int, default=21,
                   help="interpolation grid size")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("sweep", exit_on_error=False,
                       help="evaluate models across a corruption manifest")
    p.add_argument("--manifest", required=True,
                   help="JSON: {entries: [{path, corruption_name, severity}], "
                        "baseline: clean-file path}")
    p.add_argument("--model", action="append", default=[],
                   help="model JSON applied to every entry (repeatable)")
    p.add_argument("--out", required=True, help="output CSV path")
    p.add_argument("--bins", type=int, default=metrics.DEFAULT_BINS)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("selfcheck", exit_on_error=False,
                       help="verify every hand-written gradient numerically")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--instances", type=int, default=1000,
                   help="random instances per closed-form check")
    p.add_argument("--latent-instances", type=int, default=50,
                   help="random model configurations per latent-model check")
    p.add_argument("--out", default=None, help="also write the report as JSON")
    p.set_defaults(func=cmd_selfcheck)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except argparse.ArgumentError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:
        # argparse still exits directly for --help and a few parse paths
        return 0 if not exc.code else 1
    try:
        return args.func(args)
    except (CaldFormatError, DatasetValidationError, ManifestError,
            ModelFormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TrainingDivergedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (ValueError, AdacalError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def console_main() -> None:
    raise SystemExit(main(sys.argv[1:]))
