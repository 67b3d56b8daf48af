"""Horizon-scaling and sample-scaling studies built from independent training cells.

Every cell is a full deterministic training run keyed by (method, horizon or
budget, seed); cells run in any order or process and are reassembled in input
order.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .config import ExperimentConfig
from .metrics import StudyRow, failure_floor, fit_loglog_slope
from .trainer import Trainer


@dataclass(frozen=True)
class CellResult:
    method: str
    x: int  # horizon or budget
    seed: int
    resolution_rate: float
    reverse_kl: float
    samples_used: int


def _run_cell(args) -> CellResult:
    config, method, x, seed = args
    result = Trainer(config, seed).run()
    f = result.final
    return CellResult(method, x, seed, f.greedy_resolution_rate, f.reverse_kl, result.state.samples_used)


def run_cells(jobs: Sequence[tuple], workers: int = 1) -> list[CellResult]:
    if workers <= 1 or len(jobs) < 2:
        return [_run_cell(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_cell, jobs, chunksize=1))


def cell_config(base: ExperimentConfig, method: str, T_max: int | None = None, budget: int | None = None) -> ExperimentConfig:
    over: dict = {"method": {"kind": method}, "optimizer": {"sample_budget": budget}, "eval": {"every_iteration": False}}
    if T_max is not None:
        over["env"] = {"T_max": T_max}
    return base.with_overrides(**over)


@dataclass(frozen=True)
class HorizonSummary:
    method: str
    horizon: int
    mean_failure: float
    std_failure: float
    median_reverse_kl: float


@dataclass
class HorizonStudy:
    rows: list[StudyRow]
    summary: list[HorizonSummary]
    slopes: dict[str, float]
    floor: float

    def failures(self, method: str) -> dict[int, list[float]]:
        out: dict[int, list[float]] = {}
        for r in self.rows:
            if r.method == method:
                out.setdefault(r.horizon_or_budget, []).append(r.failure_rate)
        return out

    def get(self, method: str, horizon: int) -> HorizonSummary:
        return next(s for s in self.summary if s.method == method and s.horizon == horizon)


def horizon_scaling_study(
    base: ExperimentConfig,
    methods: Sequence[str],
    horizons: Sequence[int],
    seeds: Sequence[int],
    budget: int,
    workers: int = 1,
) -> HorizonStudy:
    """Final greedy failure rate per (method, T, seed) at a matched sample budget."""
    jobs = [
        (cell_config(base, m, T, budget), m, T, s)
        for m in methods
        for T in horizons
        for s in seeds
    ]
    cells = run_cells(jobs, workers)
    floor = failure_floor(base.eval.heldout_instances)
    summary = []
    slopes: dict[str, float] = {}
    for m in methods:
        means = []
        for T in horizons:
            fails = np.array([1.0 - c.resolution_rate for c in cells if c.method == m and c.x == T])
            kls = [c.reverse_kl for c in cells if c.method == m and c.x == T]
            summary.append(HorizonSummary(m, T, float(fails.mean()), float(fails.std()), float(np.median(kls))))
            means.append(fails.mean())
        slopes[m] = fit_loglog_slope(horizons, means, floor) if len(horizons) > 1 else math.nan
    rows = [
        StudyRow("horizon", c.method, c.x, c.seed, 1.0 - c.resolution_rate, c.resolution_rate, c.reverse_kl, slopes[c.method])
        for c in cells
    ]
    return HorizonStudy(rows, summary, slopes, floor)


def sample_scaling_curve(
    base: ExperimentConfig,
    method: str,
    budgets: Sequence[int],
    seeds: Sequence[int],
    workers: int = 1,
) -> list[StudyRow]:
    """Resolution rate after training with collection truncated at each budget."""
    if any(b2 <= b1 for b1, b2 in zip(budgets, budgets[1:])):
        raise ValueError("budgets must be strictly increasing")
    jobs = [(cell_config(base, method, None, b), method, b, s) for b in budgets for s in seeds]
    return [
        StudyRow("scaling", c.method, c.x, c.seed, 1.0 - c.resolution_rate, c.resolution_rate, c.reverse_kl)
        for c in run_cells(jobs, workers)
    ]


def median_curve(rows: Sequence[StudyRow]) -> dict[int, float]:
    """Median resolution rate over seeds, per budget."""
    by: dict[int, list[float]] = {}
    for r in rows:
        by.setdefault(r.horizon_or_budget, []).append(r.resolution_rate)
    return {b: float(np.median(v)) for b, v in sorted(by.items())}
