"""Accuracy aggregates, task-balance KL, forgetting curves, weight histograms, bootstrap CIs.

All functions here are pure. CSV sinks at the bottom define the on-disk
metric formats.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

METRICS_HEADER = ["seed", "p", "rem_enabled", "task", "iteration", "class_set", "accuracy"]
DERIVED_HEADER = ["seed", "p", "rem_enabled", "task", "iteration", "metric", "value"]
HIST_HEADER = ["task", "iteration", "layer", "bin_low", "bin_high", "count"]


@dataclass(frozen=True)
class MetricsRecord:
    """Accuracies a_N^C(i) for C = 1..N at iteration ``iteration`` of task ``task``."""

    task: int
    iteration: int
    accuracies: tuple
    seed: int = 0
    fingerprint: str = ""

    def __post_init__(self):
        if self.task < 1:
            raise ValueError(f"task index must be >= 1, got {self.task}")
        if len(self.accuracies) != self.task:
            raise ValueError(f"task {self.task} record needs {self.task} accuracies, got {len(self.accuracies)}")
        if any(not (0.0 <= a <= 1.0) for a in self.accuracies):
            raise ValueError(f"accuracies outside [0, 1]: {self.accuracies}")
        if self.iteration < 0:
            raise ValueError("iteration must be non-negative")


def avg_accuracy(rec: MetricsRecord) -> float:
    return sum(rec.accuracies) / rec.task


def prev_and_current(rec: MetricsRecord) -> tuple[Optional[float], float]:
    """(mean accuracy on earlier tasks' classes or None for task 1, current-task accuracy)."""
    cur = rec.accuracies[-1]
    if rec.task == 1:
        return None, cur
    return sum(rec.accuracies[:-1]) / (rec.task - 1), cur


def task_balance_kl(rec: MetricsRecord) -> float:
    """KL divergence between the normalised per-task accuracies and uniform.

    Natural log, 0*log(0) = 0. Returns NaN when every accuracy is zero.
    """
    mu = avg_accuracy(rec)
    if mu <= 0.0:
        return math.nan
    if all(a == rec.accuracies[0] for a in rec.accuracies):
        return 0.0  # exact, where a / mu could round away from 1
    n = rec.task
    total = 0.0
    for a in rec.accuracies:
        if a > 0.0:
            total += a / (n * mu) * math.log(a / mu)
    return max(total, 0.0)


def derived_metrics(rec: MetricsRecord) -> dict[str, float]:
    """mu / mu_prev / mu_current / kl for one record, omitting undefined values."""
    prev, cur = prev_and_current(rec)
    out = {"mu": avg_accuracy(rec)}
    if prev is not None:
        out["mu_prev"] = prev
    out["mu_current"] = cur
    kl = task_balance_kl(rec)
    if not math.isnan(kl):
        out["kl"] = kl
    return out


def forgetting_curve(records: Iterable[MetricsRecord], class_set: int) -> dict[int, Optional[list]]:
    """Accuracy on class set C re-indexed by tasks since introduction.

    Maps m -> [(iteration, a_{C+m}^C(i)), ...]; a task with no stored
    records maps to None so gaps stay visible.
    """
    by_task: dict[int, list] = {}
    for r in records:
        if r.task >= class_set:
            by_task.setdefault(r.task, []).append((r.iteration, r.accuracies[class_set - 1]))
    if not by_task:
        return {}
    last = max(by_task)
    return {m: (sorted(by_task[class_set + m]) if class_set + m in by_task else None)
            for m in range(0, last - class_set + 1)}


def max_accuracy_per_task(records: Iterable[MetricsRecord]) -> dict[int, tuple[float, int]]:
    """Per task: (max over iterations of mu_N(i), first iteration attaining it)."""
    best: dict[int, tuple[float, int]] = {}
    for r in sorted(records, key=lambda r: (r.task, r.iteration)):
        mu = avg_accuracy(r)
        if r.task not in best or mu > best[r.task][0]:
            best[r.task] = (mu, r.iteration)
    return best


@dataclass
class WeightHistogram:
    layer: str
    task: int
    iteration: int
    edges: np.ndarray = field(repr=False)
    counts: np.ndarray = field(repr=False)

    def mass_below(self, threshold: float) -> int:
        """Count in bins lying entirely below ``threshold``."""
        if len(self.counts) == 0:
            return 0
        return int(self.counts[self.edges[1:] <= threshold].sum())


def weight_histogram(weights, layer: str, bins: int = 64, task: int = 0, iteration: int = 0) -> WeightHistogram:
    """Histogram of strictly positive weights on uniform bins over (0, max]."""
    w = np.asarray(getattr(weights, "data", weights), dtype=np.float64).ravel()
    pos = w[w > 0]
    if pos.size == 0:
        return WeightHistogram(layer, task, iteration, np.empty(0), np.empty(0, dtype=np.int64))
    counts, edges = np.histogram(pos, bins=bins, range=(0.0, float(pos.max())))
    return WeightHistogram(layer, task, iteration, edges, counts.astype(np.int64))


def bootstrap_ci(samples: Sequence[float], level: float = 0.95, resamples: int = 10000,
                 seed: int = 0) -> tuple[float, float]:
    """Percentile bootstrap interval for the mean."""
    x = np.asarray(samples, dtype=np.float64)
    if x.size < 2:
        raise ValueError("bootstrap_ci needs at least 2 samples")
    if not 0.0 < level < 1.0:
        raise ValueError("level must be in (0, 1)")
    if np.all(x == x[0]):
        return float(x[0]), float(x[0])
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, x.size, size=(resamples, x.size))
    means = x[idx].mean(axis=1)
    alpha = (1.0 - level) / 2.0
    lo, hi = np.quantile(means, [alpha, 1.0 - alpha])
    return float(lo), float(hi)


# -- CSV sinks ----------------------------------------------------------------------------------
def _fmt(x: float) -> str:
    return repr(float(x))


def write_metrics_csv(path, records: Sequence[MetricsRecord], p: float, rem: bool) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for r in records:
            for c, a in enumerate(r.accuracies, start=1):
                w.writerow([r.seed, _fmt(p), int(rem), r.task, r.iteration, c, _fmt(a)])


def write_derived_csv(path, records: Sequence[MetricsRecord], p: float, rem: bool) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DERIVED_HEADER)
        for r in records:
            for name, v in derived_metrics(r).items():
                w.writerow([r.seed, _fmt(p), int(rem), r.task, r.iteration, name, _fmt(v)])


def write_hist_csv(path, hists: Sequence[WeightHistogram]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HIST_HEADER)
        for h in hists:
            for lo, hi, c in zip(h.edges[:-1], h.edges[1:], h.counts):
                w.writerow([h.task, h.iteration, h.layer, _fmt(lo), _fmt(hi), int(c)])


def read_metrics_csv(path, fingerprint: str = "") -> list[MetricsRecord]:
    rows: dict[tuple, dict[int, float]] = {}
    seeds: dict[tuple, int] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != METRICS_HEADER:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        for row in reader:
            key = (int(row["task"]), int(row["iteration"]))
            rows.setdefault(key, {})[int(row["class_set"])] = float(row["accuracy"])
            seeds[key] = int(row["seed"])
    out = []
    for (task, it), accs in sorted(rows.items()):
        out.append(MetricsRecord(task, it, tuple(accs[c] for c in range(1, task + 1)),
                                 seed=seeds[(task, it)], fingerprint=fingerprint))
    return out


def read_hist_csv(path) -> list[WeightHistogram]:
    groups: dict[tuple, list] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            key = (int(row["task"]), int(row["iteration"]), row["layer"])
            groups.setdefault(key, []).append((float(row["bin_low"]), float(row["bin_high"]), int(row["count"])))
    out = []
    for (task, it, layer), bins in groups.items():
        edges = np.array([b[0] for b in bins] + [bins[-1][1]])
        out.append(WeightHistogram(layer, task, it, edges, np.array([b[2] for b in bins], dtype=np.int64)))
    return out
