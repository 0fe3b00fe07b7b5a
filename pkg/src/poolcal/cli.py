"""Batch command-line interface: calibrate, fit, and simulate.

Every command is a pure function of its input files, flags, and seed; the
primary outputs (calibration JSON, fit JSON, simulation report) reproduce
byte-for-byte on re-runs.  A run manifest with input hashes, the effective
seed, and a timestamp is written next to each output.

Exit codes: 0 success, 2 input/validation problems, 3 calibration failure,
4 non-convergence (the result file is still written).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from datetime import datetime, timezone
from importlib import resources

from . import __version__
from .calibration import fit_calibration
from .data import CategoryScheme, load_dataset
from .errors import CalibrationError, PoolcalError, ValidationError
from .inference import fit_pooled, linear_calibration_fit, naive_fit
from .simulation import SIM_METHODS, ScenarioConfig, run_simulation

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_CALIBRATION = 3
EXIT_NONCONVERGENCE = 4

FIT_METHODS = ("full", "internalized", "naive", "linear")


def _sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _write_json(path, payload) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(payload, handle, indent=2)
        handle.write("\n")


def _write_manifest(out_path, command, inputs, outputs, seed=None) -> None:
    manifest = {
        "command": command,
        "tool_version": __version__,
        "timestamp": datetime.now(timezone.utc).isoformat(),
        "inputs": {str(p): _sha256(p) for p in inputs},
        "outputs": [str(p) for p in outputs],
        "seed": seed,
    }
    _write_json(f"{out_path}.manifest.json", manifest)


def _resolve_config_path(name: str) -> str:
    if os.path.exists(name):
        return name
    bundled = resources.files("poolcal").joinpath("presets", name)
    if bundled.is_file():
        return str(bundled)
    raise ValidationError(f"config {name!r} not found (not a file or bundled preset)")


def _parse_cuts(text: str) -> tuple[float, ...]:
    try:
        cuts = tuple(float(v) for v in text.split(","))
    except ValueError:
        raise ValidationError(f"--cuts must be comma-separated numbers, got {text!r}")
    return cuts


def cmd_calibrate(args) -> int:
    dataset = load_dataset(args.data, category_count=args.categories)
    payload = {}
    for sid in dataset.study_ids:
        block = fit_calibration(dataset, sid)  # CalibrationError exits 3
        payload[sid] = {
            "a": [float(v) for v in block.intercepts],
            "b": [float(v) for v in block.slopes],
            "n": block.n_calibration,
        }
    _write_json(args.out, payload)
    _write_manifest(args.out, "calibrate", [args.data], [args.out])
    print(f"wrote calibration for {len(payload)} studies to {args.out}")
    return EXIT_OK


def cmd_fit(args) -> int:
    if (args.cuts is None) == (args.categories is None):
        raise ValidationError("exactly one of --cuts or --categories is required")
    if args.cuts is not None:
        scheme = CategoryScheme.from_cut_points(_parse_cuts(args.cuts))
    else:
        scheme = CategoryScheme.direct(args.categories)
    if args.method in ("naive", "linear") and scheme.cut_points is None:
        raise ValidationError(f"--method {args.method} requires --cuts")

    dataset = load_dataset(args.data, category_count=scheme.category_count)
    if args.method == "full":
        fit = fit_pooled(dataset, scheme, "full")
    elif args.method == "internalized":
        fit = fit_pooled(dataset, scheme, "internalized")
    elif args.method == "naive":
        fit = naive_fit(dataset, scheme)
    else:
        fit = linear_calibration_fit(dataset, scheme)

    _write_json(args.out, fit.to_json_dict())
    _write_manifest(args.out, "fit", [args.data], [args.out])
    print(fit.rr_table())
    if not fit.converged:
        print("warning: fit did not converge", file=sys.stderr)
        return EXIT_NONCONVERGENCE
    return EXIT_OK


def cmd_simulate(args) -> int:
    config_path = _resolve_config_path(args.config)
    config = ScenarioConfig.from_json(config_path)
    env_seed = os.environ.get("POOLCAL_SEED")
    if env_seed is not None:
        try:
            config = config.with_overrides(seed=int(env_seed))
        except ValueError:
            raise ValidationError(f"POOLCAL_SEED must be an integer, got {env_seed!r}")
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    report = run_simulation(
        config, methods, replicates=args.replicates, n_jobs=args.threads
    )
    _write_json(args.out, report.to_json_dict())
    table = report.to_text_table()
    with open(f"{args.out}.txt", "w", encoding="utf-8") as handle:
        handle.write(table + "\n")
    _write_manifest(
        args.out, "simulate", [config_path], [args.out, f"{args.out}.txt"],
        seed=config.seed,
    )
    print(table)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="poolcal",
        description=(
            "Pooled categorical-biomarker analysis for matched case-control "
            "studies with study-specific calibration"
        ),
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    cal = sub.add_parser("calibrate", help="fit per-study calibration models")
    cal.add_argument("--data", required=True, help="input CSV")
    cal.add_argument("--out", required=True, help="output calibration JSON")
    cal.add_argument("--categories", type=int, default=None,
                     help="number of categories (default: inferred from x_cat)")
    cal.set_defaults(func=cmd_calibrate)

    fit = sub.add_parser("fit", help="estimate the biomarker-disease association")
    fit.add_argument("--data", required=True, help="input CSV")
    fit.add_argument("--method", required=True, choices=FIT_METHODS)
    fit.add_argument("--cuts", default=None,
                     help="comma-separated cut points (cut-point mode)")
    fit.add_argument("--categories", type=int, default=None,
                     help="number of categories (direct mode)")
    fit.add_argument("--out", required=True, help="output fit JSON")
    fit.set_defaults(func=cmd_fit)

    sim = sub.add_parser("simulate", help="run a replicate study from a config")
    sim.add_argument("--config", required=True,
                     help="config JSON path or bundled preset name")
    sim.add_argument("--replicates", type=int, default=None,
                     help="override the config replicate count")
    sim.add_argument("--methods", default="full,internalized",
                     help=f"comma list from: {','.join(SIM_METHODS)}")
    sim.add_argument("--threads", type=int, default=1)
    sim.add_argument("--out", required=True, help="output report JSON")
    sim.set_defaults(func=cmd_simulate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except CalibrationError as exc:
        print(f"calibration error: {exc}", file=sys.stderr)
        return EXIT_CALIBRATION
    except PoolcalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
