"""Speculation-based iteration estimation.

To predict how many iterations an algorithm needs to reach a tolerance, run it
briefly on a small sample at a coarse speculation tolerance, record the
(iteration, delta) pairs, fit iterations-vs-tolerance to T(eps) = a / eps by
least squares, and extrapolate to the requested tolerance. The closed form is

    a = sum(i / eps_i) / sum(1 / eps_i**2)

with the residual reported as the root-mean-square of (i - a / eps_i).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from . import executor, plans
from .dataset import Dataset, Partition, RawRecord
from .errors import EstimationUnavailableError


@dataclass(frozen=True)
class SpeculationConfig:
    """Coarser-than-final tolerance, a wall budget, and the sample size.

    The iteration cap is a determinism aid: with a generous budget, the run
    shape depends only on the seed.
    """

    tolerance: float = 0.05
    budget_seconds: float = 60.0
    sample_size: int = 1000
    max_iterations: Optional[int] = None

    def __post_init__(self):
        if self.tolerance <= 0:
            raise ValueError("speculation tolerance must be positive")
        if self.sample_size < 2:
            raise ValueError("speculation sample size must be at least 2")


@dataclass(frozen=True)
class ErrorSequence:
    """(iteration, delta) pairs with strictly increasing iterations and
    finite positive deltas."""

    points: tuple

    def __post_init__(self):
        last = 0
        for it, eps in self.points:
            if it <= last:
                raise ValueError("iterations must be strictly increasing")
            if not math.isfinite(eps) or eps <= 0:
                raise ValueError("deltas must be finite and positive")
            last = it

    def __len__(self):
        return len(self.points)

    def __iter__(self):
        return iter(self.points)


@dataclass(frozen=True)
class FitResult:
    coefficient: float
    residual: float
    points_used: int
    low_confidence: bool = False


@dataclass
class SpeculationResult:
    sequence: ErrorSequence
    train_result: executor.TrainResult
    wall_seconds: float


def draw_speculation_sample(dataset: Dataset, size: int, seed: int) -> Dataset:
    """Uniform sample of units without replacement, spanning partitions,
    rebuilt as a one-partition dataset."""
    n = dataset.stats.num_units
    size = min(size, n)
    rng = np.random.default_rng((seed, 0xD5))
    chosen = np.sort(rng.choice(n, size=size, replace=False))
    records = [RawRecord(dataset.record_text(int(i)), 0, j)
               for j, i in enumerate(chosen)]
    size_bytes = sum(len(r.text) for r in records)
    partition = Partition(records, size_bytes)
    stats = replace(dataset.stats, num_units=size, size_bytes=size_bytes)
    return Dataset([partition], dataset.format, stats, dataset.partition_bytes,
                   columns=dataset.columns)


def speculate(plan: plans.GDPlan, dataset: Dataset, cfg: SpeculationConfig,
              hyper: plans.HyperParams, seed: int, gradient=None,
              columns=None, sample: Optional[Dataset] = None) -> SpeculationResult:
    """Run the plan's algorithm on a sample until the speculation tolerance or
    the budget is hit, recording the delta of every completed iteration.

    Sampled algorithms draw their per-iteration batches from the sample, never
    from the full dataset; full-batch descent sweeps the whole sample.
    """
    if cfg.budget_seconds <= 0:
        raise EstimationUnavailableError("speculation budget is zero")
    if sample is None:
        sample = draw_speculation_sample(dataset, cfg.sample_size, seed)
    if gradient is None:
        raise ValueError("speculate needs a gradient function")
    spec_hyper = replace(hyper, tolerance=cfg.tolerance,
                         max_iter=cfg.max_iterations or hyper.max_iter)
    pipeline = plans.assemble(plan, gradient, spec_hyper, columns)
    result = executor.execute(pipeline, sample, seed=seed,
                              time_budget=cfg.budget_seconds)
    if result.iterations_run == 0:
        raise EstimationUnavailableError(
            f"no completed iterations for {plan} within the budget")
    points = tuple((it, eps) for it, eps in result.error_sequence
                   if math.isfinite(eps) and eps > 0)
    return SpeculationResult(ErrorSequence(points), result,
                             result.total_seconds)


def fit(sequence: ErrorSequence) -> FitResult:
    """Least-squares fit of T(eps) = a / eps over the recorded points."""
    points = list(sequence)
    if len(points) < 2:
        raise ValueError("fit needs at least 2 points")
    its = np.array([p[0] for p in points], dtype=float)
    eps = np.array([p[1] for p in points], dtype=float)
    inv = 1.0 / eps
    a = float((its * inv).sum() / (inv * inv).sum())
    residual = float(np.sqrt(np.mean((its - a * inv) ** 2)))
    low = len(np.unique(eps)) == 1 or residual > 0.5 * float(np.mean(its))
    return FitResult(a, residual, len(points), low)


def estimate_iterations(fit_result: FitResult, tolerance: float,
                        max_iter: int) -> int:
    """ceil(a / eps_d), clamped to [1, max_iter]."""
    if tolerance <= 0:
        raise ValueError("tolerance must be positive")
    raw = math.ceil(fit_result.coefficient / tolerance)
    return max(1, min(raw, max_iter))


def single_point_estimate(sequence: ErrorSequence) -> FitResult:
    """Fallback when speculation produced exactly one usable point: the exact
    interpolation a = i * eps, flagged low-confidence."""
    (it, eps), = list(sequence)
    return FitResult(it * eps, 0.0, 1, True)
