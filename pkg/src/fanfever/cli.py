"""Command-line interface.

Subcommands compose via documented disk formats: ``simulate`` and
``ingest`` produce wide panel CSVs, ``impute`` a directory of completed
CSVs, ``fit`` a JSON file of per-imputation fits, ``pool`` and ``assess``
the report files, and ``run`` the whole chain. Exit status is nonzero on
any stage failure, including non-convergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .estimation import FitOptions, FitResult, fit_model
from .fitstats import average_residuals, standardized_residuals
from .imputation import filter_fans, mice_impute
from .model import ModelDefinition, TimeGrid, Variant
from .pipeline import (
    PipelineError,
    RunConfig,
    _estimates_payload,
    ingest,
    read_imputation_set,
    read_panel_csv,
    run_pipeline,
    write_imputation_set,
    write_panel_csv,
    write_residuals_csv,
)
from .pooling import pool_estimates, pool_fit_statistics
from .simulate import (
    DEFAULT_PARAMS,
    MissingnessSpec,
    SimulationConfig,
    empirical_moments,
    simulate_panel,
)


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=str, default=None, help="run config JSON")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--m", type=int, default=None, help="number of imputations")
    parser.add_argument("--method", choices=["normal", "pmm"], default=None)
    parser.add_argument(
        "--variant", choices=["full", "baseline", "both"], default=None
    )
    parser.add_argument("--out", type=str, default=None, help="output directory")


def _load_config(args: argparse.Namespace, require_input: bool = True) -> RunConfig:
    if args.config:
        cfg = RunConfig.from_json_file(args.config)
    else:
        if require_input:
            raise SystemExit("--config is required for this subcommand")
        cfg = RunConfig(input_path="", input_format="wide")
    overrides = {}
    for field_name, arg_name in (
        ("seed", "seed"),
        ("m", "m"),
        ("method", "method"),
        ("variant", "variant"),
        ("out_dir", "out"),
    ):
        value = getattr(args, arg_name, None)
        if value is not None:
            overrides[field_name] = value
    if overrides:
        d = cfg.to_dict()
        d.update(overrides)
        cfg = RunConfig.from_dict(d)
    return cfg


def _cmd_simulate(args) -> int:
    missing = (
        MissingnessSpec(fraction=args.missing_fraction)
        if args.missing_fraction > 0
        else None
    )
    cfg = SimulationConfig(
        params=DEFAULT_PARAMS,
        n_fans=args.n,
        seed=args.seed if args.seed is not None else 0,
        missingness=missing,
    )
    panel = simulate_panel(cfg)
    if args.format == "raw":
        from .pipeline import write_raw_csv

        write_raw_csv(
            panel, args.out_csv,
            kickoff=args.kickoff, second_half_start=args.second_half_start,
        )
    else:
        write_panel_csv(panel, args.out_csv)
    print(f"wrote {panel.n_fans} fans to {args.out_csv}")
    return 0


def _cmd_ingest(args) -> int:
    cfg = _load_config(args)
    result = ingest(args.raw, cfg)
    write_panel_csv(result.panel, args.out_csv)
    if result.row_errors:
        report_path = Path(args.out_csv).with_suffix(".errors.json")
        with open(report_path, "w", encoding="utf-8") as fh:
            json.dump(
                [{"row": r, "reason": why} for r, why in result.row_errors],
                fh,
                sort_keys=True,
                indent=2,
            )
        print(f"{len(result.row_errors)} bad rows reported in {report_path}")
    print(
        f"ingested {result.panel.n_fans} fans "
        f"({result.n_rows_outside_window} records outside window, "
        f"{result.n_fans_incomplete_hr} fans dropped for incomplete heart rate)"
    )
    return 0


def _cmd_impute(args) -> int:
    grid = TimeGrid()
    panel = filter_fans(read_panel_csv(args.panel, grid))
    imp = mice_impute(
        panel,
        m=args.m if args.m is not None else 10,
        method=args.method or "pmm",
        iters=args.iters,
        seed=args.seed if args.seed is not None else 0,
    )
    out = args.out or "imputations"
    write_imputation_set(imp, out)
    print(f"wrote {imp.m} completed datasets to {out}")
    return 0


def _variant_definitions(which: str, grid: TimeGrid) -> dict[str, ModelDefinition]:
    defs = {}
    if which in ("full", "both"):
        defs["full"] = ModelDefinition(grid, Variant.TIME_DEPENDENT)
    if which in ("baseline", "both"):
        defs["baseline"] = ModelDefinition(grid, Variant.TIME_INVARIANT)
    return defs


def _cmd_fit(args) -> int:
    imp = read_imputation_set(args.imputations)
    grid = imp.datasets[0].grid
    samples = [empirical_moments(d) for d in imp.datasets]
    which = args.variant or "both"
    opts = FitOptions(seed=args.seed if args.seed is not None else 0)
    payload: dict = {
        "n": samples[0].n,
        "m": imp.m,
        "grid": grid.to_dict(),
        "fits": {},
    }
    exit_code = 0
    for label, definition in _variant_definitions(which, grid).items():
        fits = []
        for j, s in enumerate(samples):
            fit = fit_model(definition, s, opts=opts)
            if not fit.converged:
                print(
                    f"fit[{label}] imputation {j + 1}: NOT CONVERGED", file=sys.stderr
                )
                exit_code = 1
            fits.append(fit.to_dict())
        payload["fits"][label] = fits
    out = args.out or "fits.json"
    with open(out, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
    print(f"wrote fits to {out}")
    return exit_code


def _read_fits(path: str) -> dict[str, list[FitResult]]:
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    grid = TimeGrid.from_dict(payload["grid"])
    out = {}
    for label, dicts in payload["fits"].items():
        variant = (
            Variant.TIME_DEPENDENT if label == "full" else Variant.TIME_INVARIANT
        )
        definition = ModelDefinition(grid, variant)
        out[label] = [FitResult.from_dict(d, definition) for d in dicts]
    return out


def _cmd_pool(args) -> int:
    fits = _read_fits(args.fits)
    payload = {}
    for label, fit_list in fits.items():
        pooled = pool_estimates(fit_list)
        payload[label] = _estimates_payload(pooled)
    out = args.out or "estimates.json"
    with open(out, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
    print(f"wrote pooled estimates to {out}")
    return 0


def _cmd_assess(args) -> int:
    fits = _read_fits(args.fits)
    if "baseline" not in fits:
        raise SystemExit("assess requires baseline fits (fit with --variant both)")
    imp = read_imputation_set(args.imputations)
    samples = [empirical_moments(d) for d in imp.datasets]
    method = args.pooling_method
    reports = {}
    for label, fit_list in fits.items():
        reports[label] = pool_fit_statistics(
            fit_list, fits["baseline"], samples, method=method
        ).to_dict()
    out_dir = Path(args.out or ".")
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "fit.json", "w", encoding="utf-8") as fh:
        json.dump(reports, fh, sort_keys=True, indent=2)
    if "full" in fits:
        res = average_residuals(
            [standardized_residuals(f, s) for f, s in zip(fits["full"], samples)]
        )
        write_residuals_csv(res, out_dir / "residuals.csv")
    print(f"wrote fit report(s) to {out_dir}")
    return 0


def _cmd_run(args) -> int:
    cfg = _load_config(args)
    try:
        result = run_pipeline(cfg)
    except PipelineError as exc:
        print(f"pipeline failed: {exc}", file=sys.stderr)
        return 1
    print(f"pipeline complete; reports in {result.out_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fanfever",
        description="Latent arousal dynamics for wearable fan panels",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="draw a synthetic fan panel")
    p.add_argument("--n", type=int, default=137)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--missing-fraction", type=float, default=0.0)
    p.add_argument("--format", choices=["wide", "raw"], default="wide")
    p.add_argument("--kickoff", type=str, default="2025-05-24T20:00:00")
    p.add_argument(
        "--second-half-start", type=str, default="2025-05-24T21:03:00"
    )
    p.add_argument("--out-csv", type=str, required=True)
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("ingest", help="bin raw wearable records to the match grid")
    p.add_argument("--raw", type=str, required=True)
    p.add_argument("--out-csv", type=str, required=True)
    _add_common(p)
    p.set_defaults(func=_cmd_ingest)

    p = sub.add_parser("impute", help="chained-equations multiple imputation")
    p.add_argument("--panel", type=str, required=True)
    p.add_argument("--iters", type=int, default=5)
    _add_common(p)
    p.set_defaults(func=_cmd_impute)

    p = sub.add_parser("fit", help="fit model variants to each imputed dataset")
    p.add_argument("--imputations", type=str, required=True)
    _add_common(p)
    p.set_defaults(func=_cmd_fit)

    p = sub.add_parser("pool", help="pool per-imputation estimates")
    p.add_argument("--fits", type=str, required=True)
    _add_common(p)
    p.set_defaults(func=_cmd_pool)

    p = sub.add_parser("assess", help="pooled fit statistics and residuals")
    p.add_argument("--fits", type=str, required=True)
    p.add_argument("--imputations", type=str, required=True)
    p.add_argument("--pooling-method", choices=["d4", "d2"], default="d4")
    _add_common(p)
    p.set_defaults(func=_cmd_assess)

    p = sub.add_parser("run", help="full pipeline from a config file")
    _add_common(p)
    p.set_defaults(func=_cmd_run)

    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
