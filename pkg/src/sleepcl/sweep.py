"""Sweep scheduling over (p, REM, seed) cells, seed aggregation and the text report."""

from __future__ import annotations

import csv
import json
import logging
import traceback
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .config import ExperimentConfig, dump_config, from_dict
from .metrics import (
    bootstrap_ci,
    derived_metrics,
    forgetting_curve,
    max_accuracy_per_task,
    read_metrics_csv,
)
from .trainer import cell_name, prepare_stream, run_experiment

log = logging.getLogger(__name__)

SUMMARY_HEADER = ["p", "rem_enabled", "task", "iteration", "metric", "n", "mean", "ci_low", "ci_high"]
CELL_FILES = ("metrics.csv", "derived.csv", "hist.csv", "params.bin", "log.txt")


class ReportError(FileNotFoundError):
    pass


@dataclass
class Cell:
    p: float
    rem: bool
    seed: int
    status: str = "pending"  # pending | complete | failed

    @property
    def name(self) -> str:
        return cell_name(self.p, self.rem, self.seed)


@dataclass
class SweepPlan:
    root: Path
    fingerprint: str
    cells: list = field(default_factory=list)

    @classmethod
    def from_config(cls, cfg: ExperimentConfig) -> "SweepPlan":
        fp = cfg.fingerprint()
        root = Path(cfg.output.dir) / fp
        cells = [Cell(p, rem, seed) for p in cfg.sweep.p for rem in cfg.sweep.rem for seed in cfg.sweep.seeds]
        plan = cls(root, fp, cells)
        plan.refresh()
        return plan

    def cell_dir(self, cell: Cell) -> Path:
        return self.root / cell.name

    def is_complete(self, cell: Cell) -> bool:
        marker = self.cell_dir(cell) / "cell.json"
        if not marker.exists():
            return False
        try:
            info = json.loads(marker.read_text())
        except ValueError:
            return False
        return info.get("status") == "complete" and info.get("fingerprint") == self.fingerprint

    def refresh(self) -> None:
        for c in self.cells:
            if self.is_complete(c):
                c.status = "complete"
            elif c.status == "complete":
                c.status = "pending"


def _run_one(cfg_dict: dict, p: float, rem: bool, seed: int, out_dir: str) -> tuple[str, Optional[str]]:
    cfg = from_dict(cfg_dict)
    try:
        run_experiment(cfg, p, rem, seed, out_dir)
        return "complete", None
    except Exception:
        err = traceback.format_exc()
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "error.txt").write_text(err)
        return "failed", err


def run_sweep(cfg: ExperimentConfig, jobs: Optional[int] = None, force: bool = False,
              max_cells: Optional[int] = None) -> Path:
    """Execute every pending cell, then aggregate completed cells into ``summary/``.

    ``max_cells`` caps how many cells this invocation trains (the rest stay
    pending), which is how an interrupted sweep is simulated.
    """
    if not cfg.data.path or not Path(cfg.data.path).exists():
        raise FileNotFoundError(f"dataset root {cfg.data.path} does not exist")
    plan = SweepPlan.from_config(cfg)
    plan.root.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, plan.root / "config.yaml")
    todo = [c for c in plan.cells if force or c.status != "complete"]
    if max_cells is not None:
        todo = todo[:max_cells]
    jobs = jobs or cfg.sweep.jobs
    if todo:
        log.info("sweep %s: %d of %d cells to run", plan.fingerprint, len(todo), len(plan.cells))
    if jobs > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futs = {pool.submit(_run_one, cfg.to_dict(), c.p, c.rem, c.seed, str(plan.cell_dir(c))): c for c in todo}
            for fut, c in futs.items():
                c.status, err = fut.result()
                if err:
                    log.error("cell %s failed:\n%s", c.name, err)
    elif todo:
        stream, extractor = prepare_stream(cfg)
        for c in todo:
            try:
                run_experiment(cfg, c.p, c.rem, c.seed, plan.cell_dir(c), stream, extractor)
                c.status = "complete"
            except Exception:
                c.status = "failed"
                err = traceback.format_exc()
                plan.cell_dir(c).mkdir(parents=True, exist_ok=True)
                (plan.cell_dir(c) / "error.txt").write_text(err)
                log.error("cell %s failed:\n%s", c.name, err)
    plan.refresh()
    aggregate(plan, cfg)
    return plan.root


def _load_cells(plan: SweepPlan) -> dict:
    out = {}
    for c in plan.cells:
        if c.status == "complete":
            out[(c.p, c.rem, c.seed)] = read_metrics_csv(plan.cell_dir(c) / "metrics.csv", plan.fingerprint)
    return out


def aggregate(plan: SweepPlan, cfg: ExperimentConfig, resamples: int = 2000) -> Path:
    """Across-seed means with bootstrap CIs, keyed by (p, rem, task, iteration, metric)."""
    sdir = plan.root / "summary"
    sdir.mkdir(exist_ok=True)
    cells = _load_cells(plan)
    values: dict[tuple, list] = defaultdict(list)
    for (p, rem, seed), records in sorted(cells.items()):
        for r in records:
            for name, v in derived_metrics(r).items():
                values[(p, rem, r.task, r.iteration, name)].append(v)
            for c, a in enumerate(r.accuracies, start=1):
                values[(p, rem, r.task, r.iteration, f"acc_{c}")].append(a)
    with open(sdir / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_HEADER)
        for key in sorted(values, key=lambda k: (k[0], not k[1], k[2], k[3], k[4])):
            v = values[key]
            p, rem, task, it, metric = key
            if len(v) >= 2:
                lo, hi = bootstrap_ci(v, 0.95, resamples, seed=0)
                lo, hi = repr(lo), repr(hi)
            else:
                lo = hi = ""
            w.writerow([repr(float(p)), int(rem), task, it, metric, len(v), repr(float(np.mean(v))), lo, hi])
    manifest = {
        "fingerprint": plan.fingerprint,
        "expected": [c.name for c in plan.cells],
        "complete": sorted(c.name for c in plan.cells if c.status == "complete"),
        "failed": sorted(c.name for c in plan.cells if c.status == "failed"),
        "missing": sorted(c.name for c in plan.cells if c.status == "pending"),
    }
    (sdir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return sdir


# -- report --------------------------------------------------------------------------------
@dataclass
class ReportData:
    cells: list
    missing: list
    max_accuracy: dict  # (rem, p) -> {task: mean over seeds of max mu_N}
    composition: dict  # (rem, p) -> [mean a_T^C / T for C = 1..T]
    forgetting: dict  # (rem, p) -> {m: (end value, min value, recovery)} for class set 1


def _cell_dirs(root: Path) -> list[tuple[float, bool, int, Path]]:
    out = []
    for d in sorted(root.iterdir()):
        info = d / "cell.json"
        if d.is_dir() and info.exists():
            meta = json.loads(info.read_text())
            out.append((float(meta["p"]), bool(meta["rem_enabled"]), int(meta["seed"]), d))
    return out


def build_report(results_dir) -> ReportData:
    root = Path(results_dir)
    expected = [root / "summary" / "summary.csv", root / "summary" / "manifest.json"]
    absent = [str(p) for p in expected if not p.exists()]
    if absent:
        raise ReportError("missing summary files: " + ", ".join(absent))
    manifest = json.loads(expected[1].read_text())
    cells = _cell_dirs(root)
    per_setting: dict[tuple, list] = defaultdict(list)
    for p, rem, seed, d in cells:
        per_setting[(rem, p)].append(read_metrics_csv(d / "metrics.csv"))

    max_acc, comp, forg = {}, {}, {}
    for key, runs in sorted(per_setting.items()):
        maxes = defaultdict(list)
        for recs in runs:
            for task, (mu, _) in max_accuracy_per_task(recs).items():
                maxes[task].append(mu)
        max_acc[key] = {t: float(np.mean(v)) for t, v in sorted(maxes.items())}

        finals = []
        for recs in runs:
            last = max(recs, key=lambda r: (r.task, r.iteration))
            finals.append([a / last.task for a in last.accuracies])
        comp[key] = list(np.mean(finals, axis=0))

        table = defaultdict(list)
        for recs in runs:
            for m, curve in forgetting_curve(recs, 1).items():
                if curve:
                    vals = [v for _, v in curve]
                    table[m].append((vals[-1], min(vals), vals[-1] - min(vals)))
        forg[key] = {m: tuple(float(x) for x in np.mean(v, axis=0)) for m, v in sorted(table.items())}
    return ReportData([d.name for *_, d in cells], manifest.get("missing", []) + manifest.get("failed", []),
                      max_acc, comp, forg)


def _label(key) -> str:
    rem, p = key
    return f"{'REM' if rem else 'no REM'}, p={p:g}"


def render_report(data: ReportData) -> str:
    lines = ["# Sweep report", "", f"## Cells ({len(data.cells)} complete)", ""]
    lines += [f"- {c}" for c in data.cells]
    if data.missing:
        lines += ["", "Absent or failed cells: " + ", ".join(data.missing)]

    tasks = sorted({t for v in data.max_accuracy.values() for t in v})
    lines += ["", "## Maximum average accuracy per task", "",
              "| setting | " + " | ".join(f"task {t}" for t in tasks) + " |",
              "|---|" + "---|" * len(tasks)]
    for key, row in data.max_accuracy.items():
        lines.append(f"| {_label(key)} | " + " | ".join(f"{row.get(t, float('nan')):.3f}" for t in tasks) + " |")

    width = max((len(v) for v in data.composition.values()), default=0)
    lines += ["", "## Final-task accuracy composition (a_T^C / T)", "",
              "| setting | " + " | ".join(f"C={c}" for c in range(1, width + 1)) + " | total |",
              "|---|" + "---|" * (width + 1)]
    for key, row in data.composition.items():
        lines.append(f"| {_label(key)} | " + " | ".join(f"{v:.3f}" for v in row) + f" | {sum(row):.3f} |")

    ms = sorted({m for v in data.forgetting.values() for m in v})
    lines += ["", "## Forgetting and recovery of the first class set", "",
              "Each entry: accuracy at end of task 1+m / minimum during that task / recovery (end - min).", "",
              "| setting | " + " | ".join(f"m={m}" for m in ms) + " |",
              "|---|" + "---|" * len(ms)]
    for key, row in data.forgetting.items():
        cells = [("{:.2f} / {:.2f} / {:+.2f}".format(*row[m]) if m in row else "-") for m in ms]
        lines.append(f"| {_label(key)} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def report(results_dir) -> str:
    text = render_report(build_report(results_dir))
    (Path(results_dir) / "report.md").write_text(text)
    return text
