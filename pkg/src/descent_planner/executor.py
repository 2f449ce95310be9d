"""Run an assembled pipeline to convergence.

The executor owns the iteration loop: sample, (lazy) transform, compute,
aggregate, update, converge, loop decision. Per-phase wall times and unit
counts are recorded for cost-model calibration. Everything that consumes
randomness derives its generator from (seed, iteration), so a rerun with the
same seed reproduces the exact iterate sequence.
"""

from __future__ import annotations

import io
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import operators, plans, sampling
from .dataset import LIBSVM_SPARSE, Dataset
from .errors import DivergenceError, EmptySampleError
from .operators import Context, DataUnit, pairwise_sum_rows

PHASES = ("transform", "sample", "compute", "update", "converge")


class PhaseTimer:
    def __init__(self):
        self.seconds = {p: 0.0 for p in PHASES}
        self.units = {p: 0 for p in PHASES}

    def add(self, phase, seconds, units=0):
        self.seconds[phase] += seconds
        self.units[phase] += units


class RecordParser:
    """Batch record parsing, consistent with the per-unit transform operator."""

    def __init__(self, fmt, num_features, columns=None):
        self.fmt = fmt
        self.num_features = num_features
        self.columns = columns

    def parse_unit(self, record) -> DataUnit:
        ctx = Context(format=self.fmt, columns=self.columns,
                      num_features=self.num_features)
        return operators.transform(record, ctx)

    def parse_batch(self, texts):
        """Returns (X, y) with X dense (len(texts), d)."""
        if self.fmt == LIBSVM_SPARSE:
            return self._parse_libsvm_batch(texts)
        return self._parse_dense_batch(texts)

    def _parse_dense_batch(self, texts):
        try:
            arr = np.loadtxt(io.BytesIO(b"\n".join(texts)), delimiter=",",
                             ndmin=2, dtype=float)
        except ValueError:
            # fall back to the per-record path so the error carries a position
            for i, text in enumerate(texts):
                operators._parse_dense(text, self.columns)
            raise
        cols = self.columns
        if cols is None:
            return np.ascontiguousarray(arr[:, 1:]), arr[:, 0].copy()
        X = np.ascontiguousarray(arr[:, cols.feature_start - 1:cols.feature_end])
        return X, arr[:, cols.label_column - 1].copy()

    def _parse_libsvm_batch(self, texts):
        n, d = len(texts), self.num_features
        X = np.zeros((n, d))
        y = np.empty(n)
        for i, text in enumerate(texts):
            unit = operators._parse_libsvm(text, d)
            y[i] = unit.label
            X[i, unit.indices] = unit.values
        return X, y


@dataclass
class TransformedData:
    """All units parsed up front: one global matrix plus partition bounds."""

    X: np.ndarray
    y: np.ndarray
    bounds: np.ndarray  # partition start offsets, len = partitions + 1

    @property
    def partition_ranges(self):
        return [(int(self.bounds[i]), int(self.bounds[i + 1]))
                for i in range(len(self.bounds) - 1)]


def transform_all(dataset: Dataset, parser: RecordParser,
                  timer: Optional[PhaseTimer] = None) -> TransformedData:
    blocks = []
    t0 = time.perf_counter()
    for part in dataset.partitions:
        blocks.append(parser.parse_batch([r.text for r in part.records]))
    X = np.concatenate([b[0] for b in blocks]) if len(blocks) > 1 else blocks[0][0]
    y = np.concatenate([b[1] for b in blocks]) if len(blocks) > 1 else blocks[0][1]
    if timer is not None:
        timer.add("transform", time.perf_counter() - t0, len(y))
    bounds = np.concatenate([[0], np.cumsum(dataset.partition_counts)])
    return TransformedData(X, y, bounds)


def texts_for_indices(dataset: Dataset, idx: np.ndarray):
    starts = dataset._starts
    pids = np.searchsorted(starts, idx, side="right") - 1
    offs = idx - starts[pids]
    parts = dataset.partitions
    return [parts[p].records[o].text for p, o in zip(pids, offs)]


@dataclass
class TrainResult:
    weights: np.ndarray
    iterations_run: int
    error_sequence: list
    wall_times: dict
    stop_reason: str
    diagnostic: Optional[str] = None
    phase_units: dict = field(default_factory=dict)
    weight_trace: Optional[list] = None
    plan_string: str = ""
    total_seconds: float = 0.0
    seed: int = 0

    @property
    def final_delta(self) -> Optional[float]:
        return self.error_sequence[-1][1] if self.error_sequence else None

    def to_metrics(self) -> dict:
        return {
            "plan": self.plan_string,
            "iterations": self.iterations_run,
            "stop_reason": self.stop_reason,
            "phase_seconds": dict(self.wall_times),
            "phase_units": dict(self.phase_units),
            "total_seconds": self.total_seconds,
        }


def _full_gradient_sum(grad_fn, w, data: TransformedData, pool=None):
    """Sum of contributions over all units: per-partition pairwise reductions
    combined across partitions in index order, so the result is identical for
    any worker count."""
    ranges = data.partition_ranges

    def partial(rng):
        lo, hi = rng
        return pairwise_sum_rows(
            grad_fn.batch_contributions(w, data.X[lo:hi], data.y[lo:hi]),
            copy=False)

    if pool is not None and len(ranges) > 1:
        partials = list(pool.map(partial, ranges))
    else:
        partials = [partial(r) for r in ranges]
    if len(partials) == 1:
        return partials[0]
    return pairwise_sum_rows(np.stack(partials))


def execute(pipeline: plans.Pipeline, dataset: Dataset, seed: int = 0,
            time_budget: Optional[float] = None, threads: int = 1,
            trace_weights: bool = False) -> TrainResult:
    """Run the pipeline until the loop operator stops it.

    Deterministic in ``seed`` for every sampler; a time budget is only checked
    at iteration boundaries so mid-iteration state never leaks out.
    ``trace_weights`` keeps a copy of the weight vector from every iteration.
    """
    started = time.perf_counter()
    timer = PhaseTimer()
    plan = pipeline.plan
    alg = plan.algorithm
    hyper = pipeline.hyper
    stats = dataset.stats
    n = stats.num_units
    parser = RecordParser(dataset.format, stats.num_features, pipeline.columns)

    ctx = Context(
        num_features=stats.num_features,
        step_beta=hyper.step_beta,
        regularizer_lambda=hyper.regularizer_lambda,
        convergence=hyper.convergence,
        gradient=pipeline.gradient,
        format=dataset.format,
        columns=pipeline.columns,
    )

    eager = plan.transform_mode == plans.EAGER
    data = transform_all(dataset, parser, timer) if eager else None

    t0 = time.perf_counter()
    operators.stage(None, ctx)
    if isinstance(alg, plans.SVRG):
        ctx["m"] = alg.update_frequency
        ctx["weightsBar"] = ctx["weights"].copy()
        ctx["mu"] = np.zeros(stats.num_features)
    if isinstance(alg, plans.LineSearchGD) and alg.faithful:
        ctx["step_iteration"] = 1
        ctx["isStepSizeIter"] = True
    timer.add("compute", time.perf_counter() - t0)

    batch_size = plans.algorithm_batch_size(alg, n)
    sampler = None
    if plan.sampling_strategy is not None:
        sampler = sampling.make_sampler(plan.sampling_strategy, dataset, seed,
                                        batch_size)

    pool = ThreadPoolExecutor(threads) if threads > 1 else None
    error_sequence = []
    trace = [] if trace_weights else None
    stop_reason = "max-iter"
    diagnostic = None
    try:
        for i in range(1, hyper.max_iter + 1):
            # -- sample
            idx = None
            if sampler is not None and not (
                    isinstance(alg, plans.SVRG) and i % ctx.get("m", 2) == 1):
                t0 = time.perf_counter()
                try:
                    idx = sampler.sample_indices(batch_size, i)
                except EmptySampleError:
                    idx = sampler.sample_indices(batch_size, i, attempt=1)
                timer.add("sample", time.perf_counter() - t0, len(idx))

            # -- fetch the batch (lazy plans pay the transform here)
            batch = None
            if idx is not None:
                if eager:
                    batch = (data.X[idx], data.y[idx])
                else:
                    t0 = time.perf_counter()
                    batch = parser.parse_batch(texts_for_indices(dataset, idx))
                    timer.add("transform", time.perf_counter() - t0, len(idx))

            # -- compute / update
            try:
                if isinstance(alg, plans.SVRG):
                    t0 = time.perf_counter()
                    full = (data.X, data.y) if i % ctx["m"] == 1 else None
                    new_w = plans.svrg_step(i, batch, ctx, full_batch=full,
                                            gradient=pipeline.gradient)
                    units = n if full is not None else 1
                    timer.add("compute", time.perf_counter() - t0, units)
                elif isinstance(alg, plans.LineSearchGD):
                    t0 = time.perf_counter()
                    new_w, info = plans.linesearch_step(
                        ctx, data.X, data.y, alg, gradient=pipeline.gradient)
                    timer.add("compute", time.perf_counter() - t0,
                              n * (info.shrinks + 2))
                elif isinstance(alg, plans.BatchGD):
                    t0 = time.perf_counter()
                    agg = _full_gradient_sum(pipeline.gradient, ctx["weights"],
                                             data, pool)
                    timer.add("compute", time.perf_counter() - t0, n)
                    t0 = time.perf_counter()
                    new_w = operators.update(agg, n, ctx)
                    timer.add("update", time.perf_counter() - t0, n)
                else:
                    t0 = time.perf_counter()
                    contribs = pipeline.gradient.batch_contributions(
                        ctx["weights"], batch[0], batch[1])
                    timer.add("compute", time.perf_counter() - t0, len(batch[1]))
                    t0 = time.perf_counter()
                    agg = pairwise_sum_rows(contribs, copy=False)
                    new_w = operators.update(agg, len(batch[1]), ctx)
                    timer.add("update", time.perf_counter() - t0, len(batch[1]))
            except DivergenceError as exc:
                stop_reason = "diverged"
                diagnostic = str(exc)
                break

            # -- converge / loop
            t0 = time.perf_counter()
            delta = operators.converge(new_w, ctx)
            keep_going = operators.loop_decision(delta, ctx, hyper.tolerance,
                                                 hyper.max_iter)
            timer.add("converge", time.perf_counter() - t0, 1)
            error_sequence.append((i, delta))
            if trace is not None:
                trace.append(new_w.copy())

            if not np.all(np.isfinite(new_w)):
                stop_reason = "diverged"
                diagnostic = f"non-finite weights at iteration {i}"
                break
            if not keep_going:
                stop_reason = ("tolerance-reached"
                               if hyper.tolerance is not None
                               and delta < hyper.tolerance else "max-iter")
                break
            if time_budget is not None and time.perf_counter() - started > time_budget:
                stop_reason = "time-budget"
                break
    finally:
        if pool is not None:
            pool.shutdown(wait=False)

    return TrainResult(
        weights=ctx["weights"],
        iterations_run=len(error_sequence),
        error_sequence=error_sequence,
        wall_times=dict(timer.seconds),
        stop_reason=stop_reason,
        diagnostic=diagnostic,
        phase_units=dict(timer.units),
        weight_trace=trace,
        plan_string=plan.to_string(),
        total_seconds=time.perf_counter() - started,
        seed=seed,
    )


# --- prediction ----------------------------------------------------------------

CLASSIFICATION_TASKS = ("svm", "classification", "logistic")


@dataclass
class PredictionResult:
    predictions: np.ndarray
    mse: float
    accuracy: Optional[float] = None


def predict_batch(weights, X, y, task) -> PredictionResult:
    w = np.asarray(weights, dtype=float)
    if X.shape[1] != len(w):
        raise ValueError(
            f"dimension mismatch: test data has {X.shape[1]} features, "
            f"model has {len(w)}")
    scores = X @ w
    if task in CLASSIFICATION_TASKS:
        preds = np.where(scores >= 0.0, 1.0, -1.0)  # sign(0) predicts +1
        mse = float(np.mean((preds - y) ** 2))
        return PredictionResult(preds, mse, float(np.mean(preds == y)))
    mse = float(np.mean((scores - y) ** 2))
    return PredictionResult(scores, mse)


def predict(weights, units, task) -> PredictionResult:
    """Score parsed data units against their ground-truth labels."""
    units = list(units)
    X = np.stack([u.to_dense() for u in units])
    y = np.asarray([u.label for u in units])
    return predict_batch(weights, X, y, task)
