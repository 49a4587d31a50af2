"""Curve exports from run directories: per-seed and mean CSVs, optional PNGs.

A "series" is one run directory. Given a parent directory, every child that
holds an ``eval.jsonl`` is one seed. Mean curves are taken on a shared time
grid spanning the range all series cover, each series linearly interpolated.
"""
from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .telemetry import read_jsonl

log = logging.getLogger(__name__)

GRID_POINTS = 200
RATE_FIELDS = ("sampling_frame_rate", "update_frequency", "update_frame_rate")


@dataclass
class PlotReport:
    series: int = 0
    malformed: int = 0
    files: list = field(default_factory=list)
    warnings: list = field(default_factory=list)


def find_series(path: str | os.PathLike) -> list[Path]:
    path = Path(path)
    if (path / "eval.jsonl").exists():
        return [path]
    return sorted(p for p in path.iterdir() if (p / "eval.jsonl").exists()) if path.is_dir() else []


def load_curve(path: Path, log_name: str, y: str, skip_untrained: bool = True) -> tuple[np.ndarray, np.ndarray, int]:
    rows, bad = read_jsonl(path / log_name)
    pts = []
    for r in rows:
        if skip_untrained and r.get("untrained"):
            continue
        t, v = r.get("time", r.get("window_end")), r.get(y)
        if isinstance(t, (int, float)) and isinstance(v, (int, float)) and np.isfinite(t) and np.isfinite(v):
            pts.append((float(t), float(v)))
        else:
            bad += 1
    pts.sort()
    arr = np.array(pts, dtype=np.float64).reshape(-1, 2)
    return arr[:, 0], arr[:, 1], bad


def mean_curve(curves: list[tuple[np.ndarray, np.ndarray]], points: int = GRID_POINTS):
    """(grid, per-series values on the grid, mean). Empty grid if the series share no time range."""
    curves = [(t, v) for t, v in curves if len(t)]
    if not curves:
        return np.array([]), np.zeros((0, 0)), np.array([])
    lo = max(t[0] for t, _ in curves)
    hi = min(t[-1] for t, _ in curves)
    if hi < lo:
        return np.array([]), np.zeros((len(curves), 0)), np.array([])
    grid = np.linspace(lo, hi, points) if hi > lo else np.array([lo])
    vals = np.stack([np.interp(grid, t, v) for t, v in curves])
    return grid, vals, vals.mean(axis=0)


def _write_csv(path: Path, header_note: str, columns: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# {header_note}\n")
        w = csv.writer(fh)
        w.writerow(columns)
        for row in rows:
            w.writerow([repr(float(x)) for x in row])


def _export(report: PlotReport, out: Path, stem: str, names: list[str], curves, label: str) -> None:
    grid, vals, mean = mean_curve(curves)
    n = len([c for c in curves if len(c[0])])
    if not len(grid):
        msg = f"{stem}: no data points" if n == 0 else f"{stem}: series share no time range"
        log.warning(msg)
        report.warnings.append(msg)
    kept = [nm for nm, c in zip(names, curves) if len(c[0])]
    path = out / f"{stem}_mean.csv"
    _write_csv(path, f"series={n} ({', '.join(kept)}); mean of linearly interpolated {label}",
               ["time", *kept, "mean"], (np.column_stack([grid, vals.T, mean]) if len(grid) else []))
    report.files.append(str(path))
    for nm, (t, v) in zip(names, curves):
        p = out / f"{stem}_{nm}.csv"
        _write_csv(p, f"series=1 ({nm}); raw {label}", ["time", label], zip(t, v))
        report.files.append(str(p))
    _render(report, out / f"{stem}.png", kept, [c for c in curves if len(c[0])], grid, mean, label)


def _render(report: PlotReport, path: Path, names, curves, grid, mean, label: str) -> None:
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        return
    fig, ax = plt.subplots(figsize=(6, 4))
    for nm, (t, v) in zip(names, curves):
        ax.plot(t, v, lw=0.8, alpha=0.4, label=nm)
    if len(grid):
        ax.plot(grid, mean, lw=2.0, color="k", label=f"mean of {len(curves)}")
    ax.set_xlabel("wall-clock time (s)")
    ax.set_ylabel(label)
    if names:
        ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    report.files.append(str(path))


def plot(run_path: str | os.PathLike, out_dir: str | os.PathLike | None = None) -> PlotReport:
    """Export return and throughput curves for one run or a directory of seeds."""
    series = find_series(run_path)
    out = Path(out_dir) if out_dir is not None else Path(run_path) / "plots"
    out.mkdir(parents=True, exist_ok=True)
    report = PlotReport(series=len(series))
    if not series:
        msg = f"no eval.jsonl under {run_path}"
        log.warning(msg)
        report.warnings.append(msg)
    names = [p.name for p in series]
    curves = []
    for p in series:
        t, v, bad = load_curve(p, "eval.jsonl", "mean")
        report.malformed += bad
        curves.append((t, v))
    _export(report, out, "return", names, curves, "mean eval return")
    for fld in RATE_FIELDS:
        curves = []
        for p in series:
            t, v, bad = load_curve(p, "stats.jsonl", fld, skip_untrained=False)
            if fld == RATE_FIELDS[0]:
                report.malformed += bad
            curves.append((t, v))
        _export(report, out, fld, names, curves, fld)
    if report.malformed:
        log.warning("skipped %d malformed log lines", report.malformed)
    return report
