"""``arcreg`` command line: synthetic data, registration, sweeps and ARC curves.

Exit codes: 0 on success (one JSON summary line on stdout), 1 on invalid
input (one diagnostic line on stderr), 2 on runtime failure (diagnostic plus
the path of a trace file written under ``--out``).
"""
from __future__ import annotations

import argparse
import json
import math
import os
import sys
import time
import traceback
from pathlib import Path

from . import __version__
from .arc import (
    ArcCurve, ArcRecord, Axes, SweepError, aggregate, compare, continuation_sweep, load_manifest,
    pair_metrics, records_csv, resolve_jobs, sweep,
)
from .grid import GridError, VectorFieldGrid
from .io import read_json, write_grid, write_json
from .optimizer import RegistrationConfig, RegistrationDiverged, register
from .plot import PlotOptions, render_svg
from .synth import PhantomError, make_dataset
from .transforms import ModelKind

DEFAULT_LAMBDAS = "0.0,0.001,0.005,0.1,0.2,0.5,1.0"
TRACE_FILE = "error_trace.txt"


class UsageError(ValueError):
    """Invalid command-line input (exit code 1)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# -- flag value types --------------------------------------------------------

def _real(text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not math.isfinite(value):
        raise argparse.ArgumentTypeError(f"not a finite number: {text!r}")
    return value


def _positive_real(text: str) -> float:
    value = _real(text)
    if value <= 0:
        raise argparse.ArgumentTypeError(f"must be > 0, got {text}")
    return value


def _positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {text}")
    return value


def _seed(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if not 0 <= value < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be a 64-bit unsigned integer")
    return value


def _dims(text: str) -> tuple[int, int, int]:
    parts = text.lower().replace(",", "x").split("x")
    try:
        values = [int(p) for p in parts]
    except ValueError:
        raise argparse.ArgumentTypeError(f"dims must be N or NxNxN, got {text!r}") from None
    if len(values) == 1:
        values *= 3
    if len(values) != 3 or min(values) < 8:
        raise argparse.ArgumentTypeError(f"dims must be N or NxNxN with N >= 8, got {text!r}")
    return tuple(values)


def _real_list(text: str) -> list[float]:
    try:
        values = [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {text!r}") from None
    if not values or not all(math.isfinite(v) for v in values):
        raise argparse.ArgumentTypeError(f"need at least one finite number: {text!r}")
    return values


# -- parser ------------------------------------------------------------------

def _add_config_flags(p: argparse.ArgumentParser, with_lambda: bool) -> None:
    d = RegistrationConfig()
    p.add_argument("--model", required=True, choices=[k.value for k in ModelKind],
                   help="transformation model")
    if with_lambda:
        # validated by RegistrationConfig so the message matches the library's
        p.add_argument("--lambda", dest="lam", type=_real, default=d.lam,
                       help=f"regularization weight, >= 0 (default {d.lam})")
    p.add_argument("--dissim", choices=["ncc", "mse"], default=d.dissim.value,
                   help=f"dissimilarity (default {d.dissim.value})")
    p.add_argument("--iterations", type=_positive_int, default=d.iterations_per_level,
                   help=f"Adam iterations per pyramid level (default {d.iterations_per_level})")
    p.add_argument("--lr", type=_positive_real, default=d.learning_rate,
                   help=f"Adam learning rate in voxels/step (default {d.learning_rate})")
    p.add_argument("--levels", type=_positive_int, default=d.levels,
                   help=f"pyramid levels (default {d.levels})")
    p.add_argument("--svf-steps", type=_positive_int, default=d.svf_steps,
                   help=f"scaling-and-squaring steps (default {d.svf_steps})")
    p.add_argument("--ctrl-spacing", type=_positive_real, default=d.ffd_ctrl_spacing,
                   help=f"FFD control point spacing in voxels (default {d.ffd_ctrl_spacing})")
    p.add_argument("--tol", type=_real, default=d.convergence_tol,
                   help=f"relative energy change for convergence (default {d.convergence_tol})")
    p.add_argument("--seed", type=_seed, default=d.seed, help=f"recorded seed (default {d.seed})")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="arcreg", description="Deformable registration and alignment-regularity curves.")
    parser.add_argument("--version", action="version", version=f"arcreg {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic phantom dataset",
                       description="Write N phantom pairs with known deformations and a manifest.json.")
    p.add_argument("--pairs", type=_positive_int, required=True, help="number of pairs")
    p.add_argument("--dims", type=_dims, default=(48, 48, 48), help="N or NxNxN voxels (default 48)")
    p.add_argument("--seed", type=_seed, default=0, help="seed of the first pair (default 0)")
    p.add_argument("--labels", type=_positive_int, default=4, help="shapes per phantom (default 4)")
    p.add_argument("--amplitude", type=_positive_real, default=4.0,
                   help="max velocity magnitude in voxels (default 4)")
    p.add_argument("--smoothness", type=_positive_real, default=6.0,
                   help="velocity smoothing sigma in voxels (default 6)")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("register", help="register one pair of a dataset",
                       description="Register one manifest pair; writes the transform, run record and metrics.")
    p.add_argument("--manifest", required=True, help="dataset manifest.json")
    p.add_argument("--pair", required=True, help="pair_id within the manifest")
    _add_config_flags(p, with_lambda=True)
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("sweep", help="register every pair over a lambda set",
                       description="Cold-start sweep over --lambdas, or a warm-start continuation with --warm.")
    p.add_argument("--manifest", required=True, help="dataset manifest.json")
    _add_config_flags(p, with_lambda=False)
    p.add_argument("--lambdas", type=_real_list, default=None,
                   help=f"comma-separated lambdas (default {DEFAULT_LAMBDAS}); anchors with --warm")
    p.add_argument("--warm", action="store_true", help="continuation sweep with warm starts")
    p.add_argument("--min", dest="lambda_min", type=_real, default=0.0, help="continuation lambda min (default 0)")
    p.add_argument("--max", dest="lambda_max", type=_real, default=1.0, help="continuation lambda max (default 1)")
    p.add_argument("--points", type=_positive_int, default=33, help="continuation grid size (default 33)")
    p.add_argument("--method", default=None, help="method label (default MODEL-DISSIM)")
    p.add_argument("--jobs", type=_positive_int, default=None,
                   help="worker processes (default $ARC_REG_JOBS, else CPU count)")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("arc-build", help="aggregate sweep records into a curve",
                       description="Aggregate ArcRecord JSON files into an ARC curve.")
    p.add_argument("--records", required=True, help="sweep output directory or its records/ directory")
    p.add_argument("--align", choices=["dice", "tre"], default="dice", help="alignment metric (default dice)")
    p.add_argument("--regul", choices=["folding", "stdlogj"], default="folding",
                   help="regularity metric (default folding)")
    p.add_argument("--label", default=None, help="method label (default from records)")
    p.add_argument("--out", required=True, help="output curve JSON file")

    p = sub.add_parser("arc-compare", help="rank curves at regularity thresholds",
                       description="Rank curves by interpolated alignment at each regularity threshold.")
    p.add_argument("--curves", nargs="+", required=True, help="curve JSON files")
    p.add_argument("--thresholds", type=_real_list, required=True, help="comma-separated regularity levels")
    p.add_argument("--out", required=True, help="output CSV table")

    p = sub.add_parser("arc-plot", help="render curves as SVG",
                       description="Render one or more curves with std ellipses as a standalone SVG.")
    p.add_argument("--curves", nargs="+", required=True, help="curve JSON files")
    p.add_argument("--refline", type=_real, default=None,
                   help="dashed reference line at this regularity (default 0.3 for folding)")
    p.add_argument("--no-refline", action="store_true", help="omit the reference line")
    p.add_argument("--logx", action="store_true", help="log10 regularity axis")
    p.add_argument("--title", default=None, help="plot title")
    p.add_argument("--width", type=_positive_int, default=640, help="width in px (default 640)")
    p.add_argument("--height", type=_positive_int, default=480, help="height in px (default 480)")
    p.add_argument("--out", required=True, help="output SVG file")
    return parser


# -- commands ----------------------------------------------------------------

def _config(args, lam: float = 0.0) -> RegistrationConfig:
    return RegistrationConfig(
        model_kind=args.model, lam=lam, dissim=args.dissim, iterations_per_level=args.iterations,
        learning_rate=args.lr, levels=args.levels, svf_steps=args.svf_steps,
        ffd_ctrl_spacing=args.ctrl_spacing, seed=args.seed, convergence_tol=args.tol,
    )


def _write_text(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8", newline="\n")
    return path


def cmd_synth(args) -> dict:
    out = Path(args.out)
    manifest = make_dataset(args.pairs, args.dims, args.seed, out, n_labels=args.labels,
                            amplitude=args.amplitude, smoothness=args.smoothness)
    return {"manifest": str(manifest), "n_pairs": args.pairs, "dims": list(args.dims), "seed": args.seed}


def _find_pair(manifest, pair_id):
    pairs = load_manifest(manifest)
    for pair in pairs:
        if pair.pair_id == pair_id:
            return pair
    raise UsageError(f"pair {pair_id!r} not in {manifest}")


def cmd_register(args) -> dict:
    config = _config(args, args.lam)
    pair = _find_pair(args.manifest, args.pair)
    out = Path(args.out)
    result = register(pair.moving, pair.fixed, config)
    params = result.params
    if params.kind is ModelKind.FFD:
        ctrl = params.control
        write_grid(out / "params.grid", VectorFieldGrid(ctrl.coeffs))
        sidecar = {"kind": params.kind.value, "svf_steps": params.svf_steps, "ctrl_dims": list(ctrl.ctrl_dims),
                   "ctrl_spacing": list(ctrl.ctrl_spacing), "image_dims": list(ctrl.image_dims)}
    else:
        write_grid(out / "params.grid", params.field)
        sidecar = {"kind": params.kind.value, "svf_steps": params.svf_steps, "ctrl_dims": None,
                   "ctrl_spacing": None, "image_dims": list(params.image_dims)}
    write_json(out / "params.json", sidecar)
    write_grid(out / "displacement.grid", result.realized)
    write_json(out / "run.json", {"pair_id": pair.pair_id, **result.run_record()})
    metrics = pair_metrics(pair, result.realized)
    write_json(out / "metrics.json", metrics.to_dict())
    _write_text(out / "metrics.csv", metrics.to_csv())
    # timing varies run to run, so it lives apart from the deterministic outputs
    write_json(out / "timing.json", {"wall_time_ms": result.wall_time_ms})
    return {"pair_id": pair.pair_id, "out": str(out), "iterations_run": result.iterations_run,
            "converged": result.converged, "dice_mean": metrics.dice_mean,
            "tre_mean_mm": metrics.tre_mean_mm, "folding_ratio_pct": metrics.folding_ratio_pct,
            "config": config.to_dict()}


def cmd_sweep(args) -> dict:
    config = _config(args)
    dataset = load_manifest(args.manifest)
    jobs = resolve_jobs(args.jobs)
    if args.warm:
        anchors = args.lambdas or []
        records = continuation_sweep(dataset, args.lambda_min, args.lambda_max, args.points, config,
                                     anchors=anchors, jobs=jobs, method=args.method)
        settings = {"mode": "continuation", "lambda_min": args.lambda_min, "lambda_max": args.lambda_max,
                    "points": args.points, "anchors": anchors}
    else:
        lambdas = args.lambdas or [float(x) for x in DEFAULT_LAMBDAS.split(",")]
        records = sweep(dataset, lambdas, config, jobs=jobs, method=args.method)
        settings = {"mode": "cold", "lambdas": lambdas}
    out = Path(args.out)
    # lambda varies per cell; the shared config is echoed without it
    echo = {k: v for k, v in config.to_dict().items() if k != "lambda"}
    lam_index = {lam: i for i, lam in enumerate(sorted({r.lam for r in records}))}
    for rec in records:
        stem = f"{rec.pair_id}__lam{lam_index[rec.lam]:03d}"
        run_ref = None
        if rec.run is not None:
            run_ref = f"runs/{stem}.json"
            write_json(out / run_ref, {"pair_id": rec.pair_id, "lambda": rec.lam, **rec.run})
        write_json(out / "records" / f"{stem}.json", rec.to_dict(run_ref))
    _write_text(out / "records.csv", records_csv(records))
    # relative to --out, so identical inputs give identical bytes wherever the tree lives
    manifest_ref = os.path.relpath(Path(args.manifest).resolve(), out.resolve())
    write_json(out / "sweep.json", {"config": echo, "manifest": manifest_ref, **settings,
                                    "n_records": len(records), "n_failed": sum(r.failed for r in records)})
    write_json(out / "timing.json", {
        "jobs": jobs,
        "cells": [{"pair_id": r.pair_id, "lambda": r.lam, "warm_start": r.warm_start,
                   "wall_time_ms": r.wall_time_ms} for r in records],
    })
    return {"out": str(out), "n_records": len(records), "n_failed": sum(r.failed for r in records),
            "mode": settings["mode"], "config": echo}


def _record_files(path: Path) -> list[Path]:
    if (path / "records").is_dir():
        path = path / "records"
    files = sorted(path.glob("*.json"))
    if not files:
        raise UsageError(f"no record files in {path}")
    return files


def cmd_arc_build(args) -> dict:
    files = _record_files(Path(args.records))
    records = [ArcRecord.from_dict(read_json(f)) for f in files]
    curve = aggregate(records, Axes(args.align, args.regul), args.label)
    write_json(Path(args.out), curve.to_dict())
    return {"out": args.out, "method_label": curve.method_label, "n_points": len(curve.points),
            "n_records": len(records)}


def _load_curves(paths) -> list[ArcCurve]:
    return [ArcCurve.from_dict(read_json(p)) for p in paths]


def cmd_arc_compare(args) -> dict:
    result = compare(_load_curves(args.curves), args.thresholds)
    _write_text(Path(args.out), result.to_csv())
    return {"out": args.out, "thresholds": list(result.thresholds),
            "best": {repr(t): result.rankings[t][0].method for t in result.thresholds},
            "dominates": dict(sorted(result.dominates.items()))}


def cmd_arc_plot(args) -> dict:
    curves = _load_curves(args.curves)
    opts = PlotOptions(width=args.width, height=args.height, threshold=args.refline,
                       show_threshold=not args.no_refline, log_x=args.logx, title=args.title)
    _write_text(Path(args.out), render_svg(curves, None, opts))
    return {"out": args.out, "n_curves": len(curves)}


COMMANDS = {
    "synth": cmd_synth, "register": cmd_register, "sweep": cmd_sweep,
    "arc-build": cmd_arc_build, "arc-compare": cmd_arc_compare, "arc-plot": cmd_arc_plot,
}
# outputs that are a directory rather than a file
_DIR_OUTPUTS = {"synth", "register", "sweep"}


def _trace_dir(args) -> Path:
    out = Path(args.out)
    return out if args.command in _DIR_OUTPUTS else out.parent


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    start = time.perf_counter()
    try:
        summary = COMMANDS[args.command](args)
    except (UsageError, ValueError, GridError, FileNotFoundError, KeyError, PhantomError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}".splitlines()[0], file=sys.stderr)
        return 1
    except (RegistrationDiverged, SweepError, OSError, RuntimeError, ArithmeticError) as exc:
        trace = _trace_dir(args) / TRACE_FILE
        try:
            _write_text(trace, traceback.format_exc())
            where = str(trace)
        except OSError:
            where = "unavailable"
        print(f"error: {type(exc).__name__}: {exc}".splitlines()[0] + f" (trace: {where})", file=sys.stderr)
        return 2
    summary = {"command": args.command, "status": "ok", **summary}
    summary["elapsed_ms"] = round((time.perf_counter() - start) * 1000.0, 1)
    print(json.dumps(summary, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
