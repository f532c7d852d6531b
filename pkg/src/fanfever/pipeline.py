"""End-to-end orchestration: ingest, impute, fit, pool, assess, report.

Every stage reads and writes documented disk formats so stages compose via
files as well as in memory:

* raw CSV: ``fan_id,timestamp,heart_rate,stress,steps,calories,
  motion_intensity`` (header required, UTF-8, comma-delimited; stress may
  be empty);
* wide panel CSV: one row per fan with ``HR_1..HR_T``, ``SL_1..SL_T`` and
  the activity channels ``steps_*``, ``calories_*``, ``motion_*``;
* ``estimates.json`` (pooled parameter table), ``fit.json`` (fit-measure
  table for both model variants), ``residuals.csv`` (labeled 2T x 2T
  standardized residual grid), ``manifest.json`` (seeds, versions, config
  hash).

A fixed seed makes every report byte-identical across runs.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__
from .estimation import FitOptions, FitResult, fit_model
from .fitstats import (
    FitReport,
    ResidualMatrix,
    average_residuals,
    standardized_residuals,
)
from .imputation import AUX_NAMES, ImputationSet, PanelDataset, filter_fans, mice_impute
from .model import (
    PARAM_GROUPS,
    ModelDefinition,
    TimeGrid,
    Variant,
)
from .pooling import PooledResult, pool_estimates, pool_fit_statistics
from .simulate import empirical_moments

__all__ = [
    "RunConfig",
    "IngestResult",
    "PipelineError",
    "PipelineResult",
    "ingest",
    "run_pipeline",
    "write_panel_csv",
    "read_panel_csv",
    "write_imputation_set",
    "read_imputation_set",
    "standardized_curves",
]

logger = logging.getLogger("fanfever")


class PipelineError(RuntimeError):
    """A pipeline stage failed; the message carries the stage label."""


@dataclass(frozen=True)
class RunConfig:
    """Configuration of a full pipeline run."""

    input_path: str
    input_format: str = "wide"  # "wide" | "raw"
    out_dir: str = "fanfever_out"
    seed: int = 0
    m: int = 10
    method: str = "pmm"
    iters: int = 5
    variant: str = "both"  # "full" | "baseline" | "both"
    pooling_method: str = "d4"
    kickoff: str | None = None
    second_half_start: str | None = None
    max_iter: int = 1000
    restarts: int = 5
    grid: TimeGrid = field(default_factory=TimeGrid)

    def __post_init__(self) -> None:
        if self.input_format not in ("wide", "raw"):
            raise ValueError(f"unknown input format {self.input_format!r}")
        if self.variant not in ("full", "baseline", "both"):
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.m < 1:
            raise ValueError("m must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grid"] = self.grid.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        if "grid" in d:
            d["grid"] = TimeGrid.from_dict(d["grid"])
        return cls(**d)

    @classmethod
    def from_json_file(cls, path: str | Path) -> "RunConfig":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def config_hash(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()


# ---------------------------------------------------------------------------
# wide panel CSV

def _wide_columns(grid: TimeGrid) -> list[str]:
    t = range(1, grid.n_points + 1)
    cols = [f"HR_{i}" for i in t] + [f"SL_{i}" for i in t]
    for aux in AUX_NAMES:
        cols += [f"{aux}_{i}" for i in t]
    return cols


def write_panel_csv(panel: PanelDataset, path: str | Path) -> None:
    data = {"fan_id": panel.fan_ids}
    t = range(1, panel.grid.n_points + 1)
    for i in t:
        data[f"HR_{i}"] = panel.hr[:, i - 1]
    for i in t:
        data[f"SL_{i}"] = panel.sl[:, i - 1]
    for aux in AUX_NAMES:
        arr = panel.aux(aux)
        for i in t:
            data[f"{aux}_{i}"] = arr[:, i - 1]
    pd.DataFrame(data).to_csv(path, index=False)


def read_panel_csv(path: str | Path, grid: TimeGrid = TimeGrid()) -> PanelDataset:
    # round_trip parsing: persisted intermediates must reproduce bit-exactly
    df = pd.read_csv(path, float_precision="round_trip")
    missing_cols = [c for c in _wide_columns(grid) if c not in df.columns]
    if missing_cols:
        raise ValueError(f"wide panel CSV lacks columns: {missing_cols[:5]} ...")
    t = range(1, grid.n_points + 1)

    def block(prefix: str) -> np.ndarray:
        return df[[f"{prefix}_{i}" for i in t]].to_numpy(dtype=float)

    return PanelDataset(
        fan_ids=[str(v) for v in df["fan_id"]],
        hr=block("HR"),
        sl=block("SL"),
        steps=block("steps"),
        calories=block("calories"),
        motion=block("motion"),
        grid=grid,
    )


def write_raw_csv(
    panel: PanelDataset,
    path: str | Path,
    kickoff: str,
    second_half_start: str,
) -> None:
    """Serialize a panel in the raw-record schema (one reading per bin).

    Lets the full ingestion pipeline run on synthetic data: timestamps are
    placed at the first minute of each bin relative to the anchors.
    """
    kick = pd.Timestamp(kickoff)
    half2 = pd.Timestamp(second_half_start)
    grid = panel.grid
    n_first = grid.halftime_start - 1
    rows = []
    for i, fan in enumerate(panel.fan_ids):
        for t in range(grid.n_points):
            if t < n_first:
                ts = kick + pd.Timedelta(minutes=grid.interval_minutes * t + 1)
            else:
                ts = half2 + pd.Timedelta(
                    minutes=grid.interval_minutes * (t - n_first) + 1
                )
            stress = panel.sl[i, t]
            rows.append(
                (
                    fan,
                    ts.isoformat(),
                    panel.hr[i, t],
                    "" if np.isnan(stress) else stress,
                    panel.steps[i, t],
                    panel.calories[i, t],
                    panel.motion[i, t],
                )
            )
    pd.DataFrame(rows, columns=list(_RAW_COLUMNS)).to_csv(path, index=False)


# ---------------------------------------------------------------------------
# raw-record ingestion

@dataclass(frozen=True)
class IngestResult:
    panel: PanelDataset
    row_errors: list[tuple[int, str]]
    n_rows_outside_window: int
    n_fans_incomplete_hr: int


_RAW_COLUMNS = (
    "fan_id",
    "timestamp",
    "heart_rate",
    "stress",
    "steps",
    "calories",
    "motion_intensity",
)


def ingest(path: str | Path, cfg: RunConfig) -> IngestResult:
    """Bin raw wearable records to the match grid and filter fans.

    Records are assigned to 3-minute bins by clock: the first half covers
    bins 1..halftime_start-1 from the kickoff anchor, the second half the
    remaining bins from the second-half anchor. Heart rates are averaged
    within bins; stress and activity channels likewise over their
    non-missing readings. Boundary bins may be partially filled; they
    average whatever readings exist. Fans missing any heart-rate bin are
    dropped (heart rate must be complete after preprocessing), then the
    stress-missingness retention rules apply.
    """
    if cfg.kickoff is None or cfg.second_half_start is None:
        raise PipelineError(
            "ingest: kickoff and second_half_start anchors are required"
        )
    grid = cfg.grid
    kickoff = pd.Timestamp(cfg.kickoff)
    half2 = pd.Timestamp(cfg.second_half_start)

    df = pd.read_csv(path, float_precision="round_trip")
    missing_cols = [c for c in _RAW_COLUMNS if c not in df.columns]
    if missing_cols:
        raise PipelineError(f"ingest: raw CSV lacks columns {missing_cols}")

    ts = pd.to_datetime(df["timestamp"], errors="coerce", format="ISO8601")
    hr = pd.to_numeric(df["heart_rate"], errors="coerce")
    row_errors: list[tuple[int, str]] = []
    bad_ts = ts.isna()
    bad_hr = hr.isna() | (hr <= 0)
    for i in np.flatnonzero(bad_ts.to_numpy()):
        row_errors.append((int(i) + 2, "unparseable timestamp"))  # 1-based + header
    for i in np.flatnonzero((~bad_ts & bad_hr).to_numpy()):
        row_errors.append((int(i) + 2, "missing or nonpositive heart rate"))
    ok = (~bad_ts & ~bad_hr).to_numpy()

    n_first = grid.halftime_start - 1
    n_second = grid.n_points - n_first
    width = pd.Timedelta(minutes=grid.interval_minutes)

    minutes1 = (ts - kickoff) / width
    minutes2 = (ts - half2) / width
    bin1 = np.floor(minutes1).astype("float64")
    bin2 = np.floor(minutes2).astype("float64")
    t_index = np.full(len(df), -1)
    in_first = ok & (bin1 >= 0) & (bin1 < n_first)
    in_second = ok & (bin2 >= 0) & (bin2 < n_second)
    t_index[in_first] = bin1[in_first].astype(int)
    t_index[in_second] = n_first + bin2[in_second].astype(int)
    outside = int((ok & (t_index < 0)).sum())

    keep = t_index >= 0
    sub = pd.DataFrame(
        {
            "fan_id": df["fan_id"].astype(str)[keep],
            "t": t_index[keep],
            "hr": hr[keep],
            "stress": pd.to_numeric(df["stress"], errors="coerce")[keep],
            "steps": pd.to_numeric(df["steps"], errors="coerce")[keep],
            "calories": pd.to_numeric(df["calories"], errors="coerce")[keep],
            "motion": pd.to_numeric(df["motion_intensity"], errors="coerce")[keep],
        }
    )
    if sub.empty:
        raise PipelineError("ingest: no records fall inside the match window")

    fans = sorted(sub["fan_id"].unique())
    fan_pos = {f: i for i, f in enumerate(fans)}
    T = grid.n_points
    sums = {k: np.zeros((len(fans), T)) for k in ("hr", "stress", "steps", "calories", "motion")}
    counts = {k: np.zeros((len(fans), T)) for k in sums}
    rows = sub["fan_id"].map(fan_pos).to_numpy()
    cols = sub["t"].to_numpy()
    for key in sums:
        vals = sub[key].to_numpy(dtype=float)
        good = ~np.isnan(vals)
        np.add.at(sums[key], (rows[good], cols[good]), vals[good])
        np.add.at(counts[key], (rows[good], cols[good]), 1.0)

    def averaged(key: str) -> np.ndarray:
        with np.errstate(invalid="ignore"):
            return np.where(counts[key] > 0, sums[key] / counts[key], np.nan)

    hr_mat = averaged("hr")
    complete_hr = ~np.isnan(hr_mat).any(axis=1)
    n_dropped_hr = int((~complete_hr).sum())
    idx = np.flatnonzero(complete_hr)
    if idx.size == 0:
        raise PipelineError("ingest: no fan has complete heart-rate coverage")

    aux_mats = {}
    for key in ("steps", "calories", "motion"):
        m = averaged(key)[idx]
        aux_mats[key] = np.nan_to_num(m, nan=0.0)
    panel = PanelDataset(
        fan_ids=[fans[i] for i in idx],
        hr=hr_mat[idx],
        sl=averaged("stress")[idx],
        steps=aux_mats["steps"],
        calories=aux_mats["calories"],
        motion=aux_mats["motion"],
        grid=grid,
    )
    panel = filter_fans(panel)
    return IngestResult(
        panel=panel,
        row_errors=row_errors,
        n_rows_outside_window=outside,
        n_fans_incomplete_hr=n_dropped_hr,
    )


# ---------------------------------------------------------------------------
# imputation-set persistence

def write_imputation_set(imp: ImputationSet, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for j, d in enumerate(imp.datasets, start=1):
        write_panel_csv(d, out / f"imp_{j:02d}.csv")
    manifest = {
        "m": imp.m,
        "seed": imp.seed,
        "method": imp.method,
        "iterations": imp.iterations,
        "grid": imp.datasets[0].grid.to_dict(),
        "column_order": _wide_columns(imp.datasets[0].grid),
    }
    with open(out / "imputation_manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)


def read_imputation_set(out_dir: str | Path) -> ImputationSet:
    out = Path(out_dir)
    with open(out / "imputation_manifest.json", "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    grid = TimeGrid.from_dict(manifest["grid"])
    datasets = [
        read_panel_csv(out / f"imp_{j:02d}.csv", grid)
        for j in range(1, manifest["m"] + 1)
    ]
    return ImputationSet(
        datasets=datasets,
        seed=manifest["seed"],
        method=manifest["method"],
        iterations=manifest["iterations"],
    )


# ---------------------------------------------------------------------------
# report writers

def _estimates_payload(pooled: PooledResult, alpha: float = 0.05) -> dict:
    k = len(pooled.parameters)
    # both variants fix the marker loading to 1
    rows = [{"group": "icm", "name": "lambda_HR", "estimate": 1.0, "fixed": True}]
    for name, par in pooled.parameters.items():
        rows.append(
            {
                "group": PARAM_GROUPS.get(name, "factor"),
                "name": name,
                "estimate": par.estimate,
                "se": par.se,
                "p": par.p,
                "df": par.df,
                "significant": bool(par.significant_at(alpha)),
                "significant_bonferroni": bool(
                    par.significant_bonferroni(alpha, k=k)
                ),
            }
        )
    return {
        "variant": pooled.variant,
        "m": pooled.m,
        "n": pooled.n,
        "alpha": alpha,
        "bonferroni_threshold": alpha / k,
        "parameters": rows,
        "warnings": list(pooled.warnings),
    }


def write_residuals_csv(res: ResidualMatrix, path: str | Path) -> None:
    df = pd.DataFrame(res.values, index=list(res.labels), columns=list(res.labels))
    df.to_csv(path, index_label="variable")


def standardized_curves(panel: PanelDataset, window: int = 5) -> pd.DataFrame:
    """Per-variable z-scored group means with a moving-average smoother.

    Plot-emission helper for quick visual checks of the two indicator
    pathways; not part of the model.
    """
    out = {"t": panel.grid.time_points}
    for name, mat in (("hr", panel.hr), ("sl", panel.sl)):
        series = np.nanmean(mat, axis=0)
        z = (series - np.nanmean(series)) / max(float(np.nanstd(series)), 1e-12)
        kernel = np.ones(window) / window
        pad = window // 2
        padded = np.pad(z, pad, mode="edge")
        out[name] = np.convolve(padded, kernel, mode="valid")[: panel.grid.n_points]
    return pd.DataFrame(out)


# ---------------------------------------------------------------------------
# full pipeline

@dataclass(frozen=True)
class PipelineResult:
    pooled: dict[str, PooledResult]
    fit_reports: dict[str, FitReport]
    residuals: ResidualMatrix | None
    out_dir: Path


def _fit_stage(definition, samples, cfg, label):
    opts = FitOptions(max_iter=cfg.max_iter, restarts=cfg.restarts, seed=cfg.seed)
    fits = []
    for j, s in enumerate(samples):
        fit = fit_model(definition, s, opts=opts)
        if not fit.converged:
            raise PipelineError(
                f"fit[{label}]: imputation {j + 1} did not converge: "
                + "; ".join(fit.warnings)
            )
        fits.append(fit)
        logger.info("fit[%s] imputation %d: F=%.4f", label, j + 1, fit.f_ml)
    return fits


def run_pipeline(cfg: RunConfig) -> PipelineResult:
    """Execute ingest/impute/fit/pool/assess and write all reports."""
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    if cfg.input_format == "raw":
        ing = ingest(cfg.input_path, cfg)
        panel = ing.panel
        if ing.row_errors:
            with open(out / "ingest_errors.json", "w", encoding="utf-8") as fh:
                json.dump(
                    [{"row": r, "reason": why} for r, why in ing.row_errors],
                    fh,
                    sort_keys=True,
                    indent=2,
                )
    else:
        panel = filter_fans(read_panel_csv(cfg.input_path, cfg.grid))

    if not panel.sl_missing.any():
        imp = ImputationSet(
            datasets=[panel] * max(cfg.m, 1),
            seed=cfg.seed,
            method=cfg.method,
            iterations=cfg.iters,
        )
    elif cfg.m == 1:
        # single-imputation run: draw one chain, pooling passes through
        logger.warning("m=1: pooling degenerates to a pass-through")
        two = mice_impute(
            panel, m=2, method=cfg.method, iters=cfg.iters, seed=cfg.seed
        )
        imp = ImputationSet(
            datasets=two.datasets[:1],
            seed=cfg.seed,
            method=cfg.method,
            iterations=cfg.iters,
        )
    else:
        imp = mice_impute(
            panel, m=cfg.m, method=cfg.method, iters=cfg.iters, seed=cfg.seed
        )
    write_imputation_set(imp, out / "imputations")
    samples = [empirical_moments(d) for d in imp.datasets]

    variants = {
        "full": ModelDefinition(cfg.grid, Variant.TIME_DEPENDENT),
        "baseline": ModelDefinition(cfg.grid, Variant.TIME_INVARIANT),
    }
    # the baseline is the CFI null, so full-variant runs still fit it
    wanted = ["full", "baseline"] if cfg.variant in ("full", "both") else ["baseline"]

    fits: dict[str, list[FitResult]] = {}
    for label in wanted:
        fits[label] = _fit_stage(variants[label], samples, cfg, label)

    pooled: dict[str, PooledResult] = {}
    for label in (w for w in wanted if cfg.variant in (w, "both")):
        pooled[label] = pool_estimates(fits[label])

    reports: dict[str, FitReport] = {}
    base_fits = fits["baseline"]
    for label in wanted:
        if cfg.variant not in (label, "both"):
            continue
        reports[label] = pool_fit_statistics(
            fits[label], base_fits, samples, method=cfg.pooling_method
        )

    residuals = None
    if "full" in fits:
        residuals = average_residuals(
            [standardized_residuals(f, s) for f, s in zip(fits["full"], samples)]
        )
        write_residuals_csv(residuals, out / "residuals.csv")

    with open(out / "estimates.json", "w", encoding="utf-8") as fh:
        json.dump(
            {label: _estimates_payload(p) for label, p in pooled.items()},
            fh,
            sort_keys=True,
            indent=2,
        )
    with open(out / "fit.json", "w", encoding="utf-8") as fh:
        json.dump(
            {label: r.to_dict() for label, r in reports.items()},
            fh,
            sort_keys=True,
            indent=2,
        )
    standardized_curves(panel).to_csv(out / "curves.csv", index=False)

    manifest = {
        "config": cfg.to_dict(),
        "config_hash": cfg.config_hash(),
        "package_version": __version__,
        "numpy_version": np.__version__,
        "pandas_version": pd.__version__,
        "n_fans": panel.n_fans,
        "m": imp.m,
        "column_order": _wide_columns(cfg.grid),
    }
    with open(out / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)

    return PipelineResult(
        pooled=pooled, fit_reports=reports, residuals=residuals, out_dir=out
    )
