"""Ablation scenarios and throughput-only bench runs.

Every scenario is a small matrix of configs that differ in one knob and share
seeds. Each cell is a full orchestrated run; the report compares the mean
``ThroughputStats`` of its active windows and the eval outcome.
"""
from __future__ import annotations

import csv
import json
import logging
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

from .config import ConfigError, RunConfig, resolve
from .orchestrator import SUMMARY_FIELDS, RunManifest, launch

log = logging.getLogger(__name__)

SCENARIOS = ("shm-vs-queue", "bs-sweep", "sp-sweep", "single-vs-dual-updater", "cpu-restrict")
BS_SWEEP = (128, 8192, 32768)
SP_SWEEP = (2, 16)
CPU_SHARE = 0.25


@dataclass
class AblationReport:
    scenario: str
    rows: list = field(default_factory=list)
    checks: dict = field(default_factory=dict)
    out_dir: str = ""

    def table(self) -> str:
        cols = ["label", "exit", *SUMMARY_FIELDS, "best_eval"]
        lines = ["  ".join(f"{c[:14]:>14}" for c in cols)]
        for r in self.rows:
            cells = []
            for c in cols:
                v = r.get(c)
                cells.append(f"{v:>14.4g}" if isinstance(v, float) else f"{str(v)[:14]:>14}")
            lines.append("  ".join(cells))
        for name, (ok, detail) in self.checks.items():
            lines.append(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
        return "\n".join(lines)


def scenario_matrix(scenario: str, base: RunConfig, values=None) -> list[tuple[str, dict]]:
    """(label, overrides) for each cell of a scenario; ``values`` replaces a sweep's default points."""
    if scenario == "shm-vs-queue":
        return [("shm", {"channel": "shm"}), ("queue", {"channel": "queue"})]
    if scenario == "bs-sweep":
        return [(f"bs{b}", {"batch_size": b}) for b in (values or BS_SWEEP)]
    if scenario == "sp-sweep":
        return [(f"sp{s}", {"sp": s, "sp_cap": max(base.sp_cap, s)}) for s in (values or SP_SWEEP)]
    if scenario == "single-vs-dual-updater":
        return [("single", {"dual_updater": False}), ("dual", {"dual_updater": True})]
    if scenario == "cpu-restrict":
        # OS-level pinning is not portable; restriction is emulated by giving
        # samplers a quarter of the worker slots
        restricted = max(1, round(base.sp * CPU_SHARE))
        return [("full", {"sp": base.sp}), ("restricted", {"sp": restricted})]
    raise ConfigError(f"unknown scenario {scenario!r}; choose from {', '.join(SCENARIOS)}")


SCENARIO_DEFAULTS = {
    "shm-vs-queue": {"env": "synthetic-load", "bench": True},
    "bs-sweep": {"bench": True},
    "sp-sweep": {"bench": True},
    "single-vs-dual-updater": {},
    "cpu-restrict": {"bench": True},
}


def _check(scenario: str, rows: dict) -> dict:
    def s(label, f):
        v = rows[label].get(f)
        return v if v is not None else float("nan")

    out = {}
    if scenario == "shm-vs-queue":
        ratio = s("shm", "transfer_frequency") / max(s("queue", "transfer_frequency"), 1e-12)
        out["transfer frequency shm/queue >= 10"] = (ratio >= 10, f"{ratio:.3g}")
        q, m = s("queue", "receive_time_share"), s("shm", "receive_time_share")
        out["queue receive share >= 0.10"] = (q >= 0.10, f"{q:.3g}")
        out["shm receive share <= 0.02"] = (m <= 0.02, f"{m:.3g}")
    elif scenario == "bs-sweep":
        bs = sorted(int(k[2:]) for k in rows)
        f = [s(f"bs{b}", "update_frequency") for b in bs]
        out["frequency strictly decreasing in B"] = (all(a > b for a, b in zip(f, f[1:])),
                                                     ", ".join(f"{x:.3g}" for x in f))
        fr = [s(f"bs{b}", "update_frame_rate") for b in bs]
        out["frame rate unimodal or plateauing in B"] = (is_unimodal(fr), ", ".join(f"{x:.3g}" for x in fr))
        if "bs8192" in rows and "bs128" in rows:
            r = s("bs8192", "update_frame_rate") / max(s("bs128", "update_frame_rate"), 1e-12)
            out["frame rate 8192/128 > 1"] = (r > 1, f"{r:.3g}")
    elif scenario == "sp-sweep":
        r = s("sp16", "sampling_frame_rate") / max(s("sp2", "sampling_frame_rate"), 1e-12)
        out["sampling rate SP16/SP2"] = (r > 1, f"{r:.3g}")
    elif scenario == "cpu-restrict":
        dr = s("restricted", "sampling_frame_rate") / max(s("full", "sampling_frame_rate"), 1e-12)
        du = s("restricted", "update_frequency") / max(s("full", "update_frequency"), 1e-12)
        out["sampling rate drops"] = (dr < 1, f"ratio {dr:.3g}")
        out["update frequency roughly holds (>= 0.8x)"] = (du >= 0.8, f"ratio {du:.3g}")
    elif scenario == "single-vs-dual-updater":
        a, b = s("single", "update_frequency"), s("dual", "update_frequency")
        out["both learners ran"] = (a > 0 and b > 0, f"{a:.3g} Hz vs {b:.3g} Hz")
    return out


def is_unimodal(ys, tol: float = 0.05) -> bool:
    """Rises then falls (either part may be empty); dips within ``tol`` count as a plateau."""
    i = 0
    while i + 1 < len(ys) and ys[i + 1] >= ys[i] * (1 - tol):
        i += 1
    while i + 1 < len(ys) and ys[i + 1] <= ys[i] * (1 + tol):
        i += 1
    return i == len(ys) - 1


def run_cell(cfg: RunConfig) -> RunManifest:
    return launch(cfg, install_signals=False) if not cfg.lockstep else launch(cfg)


def ablate(scenario: str, base: RunConfig | None = None, out_dir: str | os.PathLike | None = None,
           overrides: dict | None = None, runner=run_cell, values=None) -> AblationReport:
    """Run a scenario matrix and write ``comparison.csv`` / ``comparison.json``."""
    if scenario not in SCENARIOS:
        raise ConfigError(f"unknown scenario {scenario!r}; choose from {', '.join(SCENARIOS)}")
    if base is None:
        base = resolve(flags={**SCENARIO_DEFAULTS[scenario], **(overrides or {})})
    if base.time_budget <= 0:
        base = replace(base, time_budget=60.0)
    out = Path(out_dir if out_dir is not None else base.run_dir)
    out.mkdir(parents=True, exist_ok=True)
    report = AblationReport(scenario, out_dir=str(out))
    by_label = {}
    for label, kw in scenario_matrix(scenario, base, values):
        cfg = replace(base, run_dir=str(out / label), autotune=False, **kw).validate()
        log.info("ablation %s: cell %s", scenario, label)
        m = runner(cfg)
        row = {"label": label, "exit": m.exit_code, **{f: m.summary.get(f) for f in SUMMARY_FIELDS},
               "windows": m.summary.get("windows"), "final_eval": m.final_eval, "best_eval": m.best_eval,
               "run_dir": cfg.run_dir}
        report.rows.append(row)
        by_label[label] = row
    report.checks = _check(scenario, by_label)
    with open(out / "comparison.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(report.rows[0]))
        w.writeheader()
        w.writerows(report.rows)
    (out / "comparison.json").write_text(json.dumps(
        {"scenario": scenario, "rows": report.rows,
         "checks": {k: {"pass": bool(ok), "detail": d} for k, (ok, d) in report.checks.items()}},
        indent=2, allow_nan=True))
    return report


def bench(base: RunConfig) -> RunManifest:
    """Throughput only: no evaluator, tracer or weight publishing."""
    cfg = replace(base, bench=True)
    if cfg.time_budget <= 0:
        cfg = replace(cfg, time_budget=60.0)
    return run_cell(cfg.validate())
