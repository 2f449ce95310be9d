"""Plan selection: estimate iterations per algorithm, price every candidate
plan, and pick the cheapest one that satisfies the user's constraints.

One speculation runs per algorithm and is shared by all of that algorithm's
plan variants; the variants differ in where transformation and sampling cost
land, not in convergence behavior. When the query fixes an iteration count
and no tolerance, speculation is skipped entirely and every plan is priced at
that count.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional

from . import costmodel, estimator, plans, sampling
from .dataset import Dataset
from .errors import EstimationUnavailableError


@dataclass(frozen=True)
class Constraints:
    """The optional bounds a query may impose; tolerance and iteration caps
    are folded into the hyperparameters, the time bound is checked here."""

    time_seconds: Optional[float] = None


@dataclass
class PlanEstimate:
    plan: plans.GDPlan
    estimated_iterations: int
    cost_per_iteration: float
    startup_seconds: float
    estimated_total_seconds: float
    fit_coefficient: Optional[float] = None
    fit_residual: Optional[float] = None
    low_confidence: bool = False
    feasible: bool = True

    @property
    def plan_string(self) -> str:
        return self.plan.to_string()

    def to_row(self) -> dict:
        return {
            "plan": self.plan_string,
            "estimated_iterations": self.estimated_iterations,
            "cost_per_iteration_seconds": self.cost_per_iteration,
            "startup_seconds": self.startup_seconds,
            "estimated_total_seconds": self.estimated_total_seconds,
            "fit_coefficient": self.fit_coefficient,
            "fit_residual": self.fit_residual,
            "low_confidence": self.low_confidence,
            "feasible": self.feasible,
        }


@dataclass
class OptimizerDecision:
    chosen: plans.GDPlan
    table: list
    speculation_seconds: float
    constraint_check: str  # "ok" or "violated(<name>)"
    params: costmodel.CostParameters
    speculation_metrics: list = field(default_factory=list)

    @property
    def chosen_estimate(self) -> PlanEstimate:
        for row in self.table:
            if row.plan == self.chosen:
                return row
        raise LookupError("chosen plan missing from its own table")

    def to_report(self) -> dict:
        return {
            "chosen": self.chosen.to_string(),
            "constraint_check": self.constraint_check,
            "table": [row.to_row() for row in self.table],
        }


def _speculation_plan(algorithm_name: str, mgd_batch: int) -> plans.GDPlan:
    """Canonical variant used to observe each algorithm's convergence: on a
    one-partition sample, uniform random-partition draws stand in for every
    sampled variant."""
    if algorithm_name == "bgd":
        return plans.GDPlan(plans.BatchGD())
    if algorithm_name == "mgd":
        return plans.GDPlan(plans.MiniBatchGD(mgd_batch), plans.EAGER,
                            sampling.RandomPartition())
    return plans.GDPlan(plans.StochasticGD(), plans.EAGER,
                        sampling.RandomPartition())


def estimate_algorithm_iterations(dataset, gradient, hyper, cfg, seed,
                                  algorithm_names, columns=None, sample=None,
                                  mgd_batch=plans.DEFAULT_MGD_BATCH):
    """One speculation + fit per algorithm, on a shared sample.

    Returns (per-algorithm estimates, speculation wall seconds, metrics).
    Algorithms whose speculation yields nothing are priced at the iteration
    cap and flagged low-confidence.
    """
    if sample is None:
        sample = estimator.draw_speculation_sample(dataset, cfg.sample_size, seed)
    estimates = {}
    metrics = []
    wall = 0.0
    for name in algorithm_names:
        plan = _speculation_plan(name, mgd_batch)
        try:
            spec = estimator.speculate(plan, dataset, cfg, hyper, seed,
                                       gradient=gradient, columns=columns,
                                       sample=sample)
            wall += spec.wall_seconds
            metrics.append(spec.train_result.to_metrics())
            if len(spec.sequence) >= 2:
                fit_result = estimator.fit(spec.sequence)
            else:
                fit_result = estimator.single_point_estimate(spec.sequence)
            run = spec.train_result
            if (run.stop_reason == "tolerance-reached"
                    and run.final_delta is not None
                    and run.final_delta < hyper.tolerance):
                # the speculation run crossed the requested tolerance itself:
                # no extrapolation needed, the iteration count was observed
                iterations = max(1, run.iterations_run)
            else:
                iterations = max(
                    estimator.estimate_iterations(fit_result, hyper.tolerance,
                                                  hyper.max_iter),
                    min(run.iterations_run, hyper.max_iter))
            estimates[name] = (iterations, fit_result)
        except EstimationUnavailableError:
            estimates[name] = (
                hyper.max_iter,
                estimator.FitResult(float(hyper.max_iter * cfg.tolerance),
                                    float("inf"), 0, True),
            )
    return estimates, wall, metrics


def choose(dataset: Dataset, gradient, hyper: plans.HyperParams,
           cfg: Optional[estimator.SpeculationConfig] = None,
           constraints: Optional[Constraints] = None, seed: int = 0,
           params: Optional[costmodel.CostParameters] = None,
           candidate_plans=None, columns=None,
           skip_speculation: bool = False,
           mgd_batch: int = plans.DEFAULT_MGD_BATCH) -> OptimizerDecision:
    """Pick the cheapest feasible plan.

    Ties break toward fewer estimated iterations, then canonical plan order.
    If every plan violates the time constraint, the cheapest plan is still
    reported, with the check marked violated so the caller can surface which
    constraint to revisit.
    """
    cfg = cfg or estimator.SpeculationConfig()
    constraints = constraints or Constraints()
    if candidate_plans is None:
        candidate_plans = plans.enumerate_plans(mgd_batch=mgd_batch)
    algorithm_names = []
    for plan in candidate_plans:
        if plan.algorithm.name not in algorithm_names:
            algorithm_names.append(plan.algorithm.name)

    stats = dataset.stats
    spec_wall = 0.0
    spec_metrics = []
    if skip_speculation or hyper.tolerance is None:
        estimates = {name: (hyper.max_iter, None) for name in algorithm_names}
    else:
        started = time.perf_counter()
        sample = estimator.draw_speculation_sample(dataset, cfg.sample_size, seed)
        estimates, spec_wall, spec_metrics = estimate_algorithm_iterations(
            dataset, gradient, hyper, cfg, seed, algorithm_names,
            columns=columns, sample=sample, mgd_batch=mgd_batch)
        spec_wall = max(spec_wall, time.perf_counter() - started)
        if params is None:
            base = costmodel.CostParameters(
                partition_bytes=dataset.partition_bytes)
            params = costmodel.calibrate(sample, spec_metrics, gradient,
                                         base=base)
    if params is None:
        params = costmodel.CostParameters(partition_bytes=dataset.partition_bytes)

    table = []
    for plan in candidate_plans:
        iterations, fit_result = estimates[plan.algorithm.name]
        breakdown = costmodel.plan_cost_breakdown(plan, iterations, stats, params)
        table.append(PlanEstimate(
            plan=plan,
            estimated_iterations=iterations,
            cost_per_iteration=breakdown.per_iteration_seconds,
            startup_seconds=breakdown.startup_seconds,
            estimated_total_seconds=breakdown.total_seconds,
            fit_coefficient=fit_result.coefficient if fit_result else None,
            fit_residual=fit_result.residual if fit_result else None,
            low_confidence=fit_result.low_confidence if fit_result else False,
        ))

    budget = constraints.time_seconds
    if budget is not None:
        for row in table:
            row.feasible = row.estimated_total_seconds + spec_wall <= budget

    def rank(indexed):
        index, row = indexed
        return (row.estimated_total_seconds, row.estimated_iterations, index)

    feasible = [(i, r) for i, r in enumerate(table) if r.feasible]
    pool = feasible if feasible else list(enumerate(table))
    chosen = min(pool, key=rank)[1]
    check = "ok" if feasible or budget is None else "violated(time)"

    return OptimizerDecision(
        chosen=chosen.plan,
        table=table,
        speculation_seconds=spec_wall,
        constraint_check=check,
        params=params,
        speculation_metrics=spec_metrics,
    )


def check_constraints(decision: OptimizerDecision,
                      constraints: Constraints) -> str:
    """Re-evaluate the time budget against the chosen plan's estimate plus
    the speculation overhead."""
    budget = constraints.time_seconds
    if budget is None:
        return "ok"
    total = decision.chosen_estimate.estimated_total_seconds
    if total + decision.speculation_seconds <= budget:
        return "ok"
    return "violated(time)"
