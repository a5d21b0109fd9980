"""Scaling metrics and the benchmark report."""

from __future__ import annotations

import csv
import statistics
from dataclasses import dataclass, field

from .errors import RejectedInput


def _positive(**kw):
    for name, v in kw.items():
        if not v > 0:
            raise RejectedInput(f"{name} must be positive, got {v}")


def weak_efficiency(t1, tn):
    """W_e = T_1 / T_N at fixed work per worker."""
    _positive(t1=t1, tN=tn)
    return t1 / tn


def speedup(t1, tn):
    _positive(t1=t1, tN=tn)
    return t1 / tn


def strong_efficiency(s, n_workers):
    """S_e = s / N_P at fixed total work."""
    _positive(s=s, N_P=n_workers)
    return s / n_workers


def throughput(points, seconds):
    if points < 0:
        raise RejectedInput("point count must be >= 0")
    _positive(seconds=seconds)
    return points / seconds


@dataclass
class ScalingRecord:
    workers: int
    times: list
    points: int
    method: str = "xpinn"
    transport: str = "in-process"
    compute: list = field(default_factory=list)
    comm: list = field(default_factory=list)

    def __post_init__(self):
        if self.workers < 1:
            raise RejectedInput("worker count must be >= 1")
        if not self.times or any(not t > 0 for t in self.times):
            raise RejectedInput("wall times must be positive")

    @property
    def median(self):
        return statistics.median(self.times)

    @property
    def stdev(self):
        return statistics.stdev(self.times) if len(self.times) > 1 else 0.0


REPORT_COLUMNS = ("mode", "workers", "median_s", "stdev_s", "speedup", "efficiency",
                  "throughput_pts_per_s", "compute_s", "comm_s", "method", "transport")


def scaling_table(records, mode):
    """Rows with W_e (weak) or s and S_e (strong) relative to the smallest worker count."""
    if mode not in ("weak", "strong"):
        raise RejectedInput("mode must be weak or strong")
    recs = sorted(records, key=lambda r: r.workers)
    base = recs[0]
    rows = []
    for r in recs:
        if mode == "weak":
            s = None
            eff = weak_efficiency(base.median, r.median)
        else:
            s = speedup(base.median, r.median) * base.workers
            eff = strong_efficiency(s, r.workers)
        rows.append({"mode": mode, "workers": r.workers, "median_s": r.median, "stdev_s": r.stdev,
                     "speedup": s, "efficiency": eff,
                     "throughput_pts_per_s": throughput(r.points, r.median),
                     "compute_s": statistics.median(r.compute) if r.compute else None,
                     "comm_s": statistics.median(r.comm) if r.comm else None,
                     "method": r.method, "transport": r.transport})
    return rows


def write_report(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS)
        w.writeheader()
        for row in rows:
            w.writerow({k: ("" if row[k] is None else row[k]) for k in REPORT_COLUMNS})
    return path
