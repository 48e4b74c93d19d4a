"""Command-line interface: ``dynmf <subcommand> ...``."""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import time
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .analysis import latent_correlations, pca_2d, write_correlations, write_projection
from .anomaly import align_events, flag, load_events, read_scores, score, write_alignment, write_scores
from .baseline import cp_als_fit, cp_node_scores
from .cube import IngestConfig, load_csv, load_cube, save_cube
from .model import load_model, save_model
from .synth import evaluate_detector, generate, load_spec, read_truth, write_metrics, write_truth
from .trainer import FitConfig, fit

log = logging.getLogger("dynmf")

MANIFEST_NAME = "run_manifest.json"
# manifest keys that legitimately differ between identical runs
VOLATILE_KEYS = ("created_at", "timing")


def _digest(path: Path) -> str:
    h = hashlib.sha256()
    if path.is_dir():
        for f in sorted(p for p in path.rglob("*") if p.is_file() and p.name != MANIFEST_NAME):
            h.update(str(f.relative_to(path)).encode())
            h.update(b"\0")
            h.update(f.read_bytes())
    else:
        h.update(path.read_bytes())
    return h.hexdigest()


def write_run_manifest(output, subcommand: str, config: dict, inputs: dict, results=None, timing=None) -> Path:
    """Record how an output was produced, next to (or inside) the output."""
    output = Path(output)
    target = output / MANIFEST_NAME if output.is_dir() else output.with_name(output.name + ".manifest.json")
    manifest = {
        "subcommand": subcommand,
        "version": __version__,
        "config": config,
        "inputs": {name: {"path": str(p), "sha256": _digest(Path(p))} for name, p in inputs.items()},
        "results": results or {},
        "created_at": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "timing": timing or {},
    }
    with open(target, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return target


def _config_of(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "verbose")}


# -- subcommands --------------------------------------------------------------

def cmd_ingest(args):
    config = IngestConfig(
        format=args.format,
        missing_policy=args.missing,
        normalization="zscore" if args.normalize else "none",
    )
    cube = load_csv(args.input, config)
    save_cube(cube, args.output, storage=args.storage)
    write_run_manifest(args.output, "ingest", _config_of(args), {"input": args.input},
                       {"N": cube.N, "M": cube.M, "T": cube.T, "masked_cells": int((~cube.observed).sum())})


def _fit_config(args, k) -> FitConfig:
    return FitConfig(
        K=k,
        max_iter=args.iters,
        seed=args.seed,
        init_std=args.init_std,
        alpha=args.alpha,
        beta1=args.beta1,
        beta2=args.beta2,
        eps=args.eps,
        l2_lambda=args.l2,
        minibatch_slices=args.minibatch,
        trace_every=args.trace_every,
        reproducible_reduction=args.reproducible,
        threads=args.threads,
        early_stop=args.early_stop,
    )


def _write_trace(report, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("iteration", "objective"))
        for it, obj in report.objective_trace:
            writer.writerow((it, repr(float(obj))))


def cmd_fit(args):
    cube = load_cube(args.cube)
    model, report = fit(cube, _fit_config(args, args.k))
    save_model(model, args.output)
    if args.trace:
        _write_trace(report, args.trace)
    results = {
        "final_objective": report.final_objective,
        "final_avg_abs_error": report.final_avg_abs_error,
        "n_iter": report.n_iter,
    }
    write_run_manifest(args.output, "fit", _config_of(args), {"cube": args.cube}, results,
                       {"wall_time": report.wall_time})


def cmd_sweep(args):
    try:
        ks = [int(k) for k in args.ks.split(",") if k.strip()]
    except ValueError:
        raise ValueError(f"--ks must be a comma-separated list of integers, got {args.ks!r}") from None
    if not ks:
        raise ValueError("--ks is empty")
    cube = load_cube(args.cube)
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows, timing = [], {}
    for i, k in enumerate(ks):
        _, report = fit(cube, _fit_config(args, k))
        _write_trace(report, out / f"trace_{i}_k{k}.csv")
        rows.append((k, repr(report.final_objective), repr(report.final_avg_abs_error)))
        timing[f"{i}_k{k}"] = report.wall_time
    with open(out / "summary.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("k", "final_objective", "final_avg_abs_error"))
        writer.writerows(rows)
    write_run_manifest(out, "sweep", _config_of(args), {"cube": args.cube}, {"ks": ks}, timing)


def cmd_score(args):
    cube = load_cube(args.cube)
    model = load_model(args.model)
    series = score(model, cube)
    if args.flag:
        series = flag(series, args.flag)
    write_scores(series, args.output)
    write_run_manifest(args.output, "score", _config_of(args), {"cube": args.cube, "model": args.model},
                       {"threshold": series.threshold})


def cmd_flag(args):
    series = flag(read_scores(args.scores), args.method)
    write_scores(series, args.output)
    write_run_manifest(args.output, "flag", _config_of(args), {"scores": args.scores},
                       {"threshold": series.threshold, "n_flagged": int(series.flags.sum())})


def cmd_align(args):
    series = read_scores(args.scores)
    events = load_events(args.events)
    report = align_events(series, events, args.window_seconds)
    summary = args.summary or str(Path(args.output).with_suffix("")) + "_summary.csv"
    write_alignment(report, args.output, summary)
    for event in report.unresolved:
        log.warning("event on unknown node %s at %d", event.node_id, event.timestamp)
    write_run_manifest(args.output, "align", _config_of(args), {"scores": args.scores, "events": args.events},
                       {"unresolved": len(report.unresolved), "summary": summary})


def cmd_project(args):
    model = load_model(args.model)
    if args.target == "metrics":
        proj = pca_2d(model.V, model.metric_ids)
    else:
        proj = pca_2d(model.U_bar, model.node_ids)
    write_projection(proj, args.output)
    write_run_manifest(args.output, "project", _config_of(args), {"model": args.model},
                       {"explained_variance": proj.explained_variance.tolist()})


def cmd_correlate(args):
    corr = latent_correlations(load_model(args.model))
    write_correlations(corr, args.output)
    write_run_manifest(args.output, "correlate", _config_of(args), {"model": args.model},
                       {"zero_variance": corr.zero_variance})


def cmd_baseline(args):
    cube = load_cube(args.cube)
    start = time.perf_counter()
    cp = cp_als_fit(cube, rank=args.rank, iters=args.iters, seed=args.seed)
    series = cp_node_scores(cp, cube)
    if args.flag:
        series = flag(series, args.flag)
    write_scores(series, args.output)
    write_run_manifest(args.output, "baseline", _config_of(args), {"cube": args.cube},
                       {"final_error": cp.errors[-1], "fallbacks": cp.fallbacks, "threshold": series.threshold},
                       {"wall_time": time.perf_counter() - start})


def cmd_synth(args):
    spec = load_spec(args.spec)
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    cube, planted, truth = generate(spec)
    save_cube(cube, args.output, storage=args.storage)
    if args.truth:
        write_truth(truth, args.truth)
    if args.model:
        save_model(planted, args.model)
    write_run_manifest(args.output, "synth", {**_config_of(args), "resolved_spec": spec.to_dict()},
                       {"spec": args.spec}, {"n_positive": truth.n_positive})


def cmd_eval(args):
    series = read_scores(args.scores)
    truth = read_truth(args.truth, like=series)
    report = evaluate_detector(series, truth, args.flag or ())
    write_metrics(report, args.output)
    write_run_manifest(args.output, "eval", _config_of(args), {"scores": args.scores, "truth": args.truth},
                       {"auc": report.auc})


# -- parser -------------------------------------------------------------------

def _add_fit_options(p):
    p.add_argument("--cube", required=True, help="cube directory")
    p.add_argument("--iters", type=int, default=20000)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--init-std", type=float, default=0.1)
    p.add_argument("--alpha", type=float, default=0.001)
    p.add_argument("--beta1", type=float, default=0.9)
    p.add_argument("--beta2", type=float, default=0.999)
    p.add_argument("--eps", type=float, default=1e-8)
    p.add_argument("--l2", type=float, default=0.0)
    p.add_argument("--minibatch", type=int, default=None, metavar="S", help="timestep slices per step")
    p.add_argument("--trace-every", type=int, default=100)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--reproducible", action=argparse.BooleanOptionalAction, default=True,
                   help="fixed-order reductions (default: on)")
    p.add_argument("--early-stop", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dynmf", description=__doc__)
    parser.add_argument("--version", action="version", version=f"dynmf {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("ingest", help="CSV -> cube directory")
    p.add_argument("--input", required=True)
    p.add_argument("--format", choices=("long", "wide"), default="long")
    p.add_argument("--missing", choices=("reject", "impute-zero"), default="reject")
    p.add_argument("--normalize", action="store_true", help="z-score each metric")
    p.add_argument("--storage", choices=("csv", "binary"), default="csv")
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("fit", help="fit the factor model")
    _add_fit_options(p)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--output", required=True, help="model directory")
    p.add_argument("--trace", help="trace CSV (iteration,objective)")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("sweep", help="fit several latent dimensions")
    _add_fit_options(p)
    p.add_argument("--ks", default="3,5,10")
    p.add_argument("--output-dir", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("score", help="per-node anomaly scores")
    p.add_argument("--cube", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--flag", metavar="METHOD", help="quantile:<q> or zscore:<k>")
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("flag", help="threshold a scores CSV")
    p.add_argument("--scores", required=True)
    p.add_argument("--method", required=True, help="quantile:<q> or zscore:<k>")
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_flag)

    p = sub.add_parser("align", help="align scores with log events")
    p.add_argument("--scores", required=True)
    p.add_argument("--events", required=True)
    p.add_argument("--window-seconds", type=float, default=600.0)
    p.add_argument("--output", required=True)
    p.add_argument("--summary", help="per-error-type summary CSV")
    p.set_defaults(func=cmd_align)

    p = sub.add_parser("project", help="2-D PCA of metric or static node factors")
    p.add_argument("--model", required=True)
    p.add_argument("--target", choices=("metrics", "nodes-static"), default="metrics")
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_project)

    p = sub.add_parser("correlate", help="correlations between latent dimensions")
    p.add_argument("--model", required=True)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_correlate)

    p = sub.add_parser("baseline", help="CP-ALS tensor baseline scores")
    p.add_argument("--cube", required=True)
    p.add_argument("--rank", type=int, default=10)
    p.add_argument("--iters", type=int, default=200)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--flag", metavar="METHOD")
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("synth", help="generate a synthetic cube")
    p.add_argument("--spec", required=True, help="JSON spec file")
    p.add_argument("--output", required=True, help="cube directory")
    p.add_argument("--truth", help="ground-truth CSV")
    p.add_argument("--model", help="directory for the planted model")
    p.add_argument("--seed", type=int, default=None, help="overrides the spec's seed")
    p.add_argument("--storage", choices=("csv", "binary"), default="csv")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("eval", help="score a detector against ground truth")
    p.add_argument("--scores", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--flag", action="append", metavar="METHOD", help="repeatable")
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 on usage errors
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        args.func(args)
    except (OSError, ValueError, RuntimeError, KeyError) as exc:
        print(json.dumps({"error": type(exc).__name__, "command": args.command, "message": str(exc)}),
              file=sys.stderr)
        return 1
    return 0


def run():
    sys.exit(main())
