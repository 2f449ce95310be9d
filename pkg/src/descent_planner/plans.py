"""The plan space and executable pipeline assembly.

A plan is (algorithm, transformation mode, sampling strategy). The optimizer's
default search space holds 11 plans: one for full-batch descent (always eager,
no sampler) and five each for the single-sample and mini-batch variants
(eager x three samplers, lazy x two -- lazy bernoulli is pointless because a
bernoulli pass scans everything anyway).

Variance-reduced descent and backtracking line search are assembled on demand
when a query pins them; they are not part of the default space.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Union

import numpy as np

from . import sampling
from .dataset import ColumnSpec
from .errors import LineSearchStalledError, PlanError
from .operators import (Context, GradientFunction, batch_objective,
                        pairwise_sum_rows, step_size)

EAGER = "eager"
LAZY = "lazy"

#: Mini-batch size used when a query does not pin one.
DEFAULT_MGD_BATCH = 1000

#: Default update frequency for the variance-reduced variant.
DEFAULT_SVRG_FREQUENCY = 10


@dataclass(frozen=True)
class BatchGD:
    name = "bgd"


@dataclass(frozen=True)
class StochasticGD:
    name = "sgd"


@dataclass(frozen=True)
class MiniBatchGD:
    batch_size: int = DEFAULT_MGD_BATCH

    name = "mgd"

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("mini-batch size must be at least 1")


@dataclass(frozen=True)
class SVRG:
    """Single-sample descent with its variance reduced by a full-gradient
    pass every ``update_frequency`` iterations."""

    update_frequency: int = DEFAULT_SVRG_FREQUENCY

    name = "svrg"

    def __post_init__(self):
        if self.update_frequency < 2:
            raise ValueError("update frequency must be at least 2")


@dataclass(frozen=True)
class LineSearchGD:
    """Full-batch descent with backtracking step-size selection.

    Default mode uses the standard sufficient-decrease (Armijo) test; the
    faithful mode reproduces the published operator listings, which shrink
    while the objective drop still exceeds step * trial-count.
    """

    shrink: float = 0.5
    sufficient_decrease: float = 1e-4
    faithful: bool = False

    name = "bgd-linesearch"

    def __post_init__(self):
        if not 0 < self.shrink < 1:
            raise ValueError("shrink factor must be in (0, 1)")


GDAlgorithm = Union[BatchGD, StochasticGD, MiniBatchGD, SVRG, LineSearchGD]

_FULL_BATCH = (BatchGD, LineSearchGD)


def algorithm_batch_size(algorithm: GDAlgorithm, n: int) -> int:
    if isinstance(algorithm, _FULL_BATCH):
        return n
    if isinstance(algorithm, MiniBatchGD):
        return min(algorithm.batch_size, n)
    return 1  # sgd and svrg sample one unit per iteration


@dataclass(frozen=True)
class GDPlan:
    algorithm: GDAlgorithm
    transform_mode: str = EAGER
    sampling_strategy: Optional[sampling.SamplingStrategy] = None

    def __post_init__(self):
        if self.transform_mode not in (EAGER, LAZY):
            raise PlanError(f"unknown transform mode {self.transform_mode!r}")
        full = isinstance(self.algorithm, _FULL_BATCH)
        if full:
            if self.sampling_strategy is not None:
                raise PlanError(
                    f"{self.algorithm.name} consumes every unit each iteration "
                    "and takes no sampler")
            if self.transform_mode != EAGER:
                raise PlanError(f"{self.algorithm.name} is always eager")
        else:
            if isinstance(self.algorithm, SVRG) and self.transform_mode != EAGER:
                raise PlanError(
                    "svrg needs the full dataset for its periodic pass; "
                    "eager mode only")
            if self.sampling_strategy is None and not isinstance(self.algorithm, SVRG):
                raise PlanError(f"{self.algorithm.name} needs a sampling strategy")
            if (self.transform_mode == LAZY
                    and isinstance(self.sampling_strategy, sampling.Bernoulli)):
                raise PlanError(
                    "lazy transformation with bernoulli sampling is never "
                    "worthwhile: the bernoulli scan touches all units anyway")

    def to_string(self) -> str:
        if self.sampling_strategy is None:
            return self.algorithm.name
        return "/".join(
            (self.algorithm.name, self.transform_mode, self.sampling_strategy.name))

    def __str__(self):
        return self.to_string()


def plan_from_string(text: str) -> GDPlan:
    parts = text.split("/")
    algorithms = {
        "bgd": BatchGD(), "sgd": StochasticGD(), "mgd": MiniBatchGD(),
        "svrg": SVRG(), "bgd-linesearch": LineSearchGD(),
    }
    if parts[0] not in algorithms:
        raise PlanError(f"unknown algorithm {parts[0]!r}")
    alg = algorithms[parts[0]]
    if len(parts) == 1:
        return GDPlan(alg)
    if len(parts) != 3:
        raise PlanError(f"malformed plan string {text!r}")
    return GDPlan(alg, parts[1], sampling.strategy_from_name(parts[2]))


@dataclass(frozen=True)
class HyperParams:
    step_beta: float = 1.0
    tolerance: Optional[float] = 1e-3
    max_iter: int = 1000
    regularizer_lambda: float = 0.0
    convergence: str = "l2"

    def __post_init__(self):
        if self.step_beta <= 0:
            raise ValueError("step beta must be positive")
        if self.tolerance is not None and self.tolerance <= 0:
            raise ValueError("tolerance must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        if self.regularizer_lambda < 0:
            raise ValueError("regularizer weight must be non-negative")


_SAMPLED_ALGORITHMS = {"sgd": StochasticGD, "mgd": MiniBatchGD}


def enumerate_plans(algorithms=("bgd", "mgd", "sgd"),
                    mgd_batch: int = DEFAULT_MGD_BATCH):
    """The optimizer's search space, in canonical order.

    Full-batch descent contributes a single plan; each sampled algorithm
    contributes eager x {bernoulli, random-partition, shuffled-partition}
    plus lazy x {random-partition, shuffled-partition}.
    """
    plans = []
    wanted = [a.lower() for a in algorithms]
    for name in ("bgd", "mgd", "sgd"):
        if name not in wanted:
            continue
        if name == "bgd":
            plans.append(GDPlan(BatchGD()))
            continue
        alg = MiniBatchGD(mgd_batch) if name == "mgd" else StochasticGD()
        for strategy in (sampling.Bernoulli(), sampling.RandomPartition(),
                         sampling.ShuffledPartition()):
            plans.append(GDPlan(alg, EAGER, strategy))
        for strategy in (sampling.RandomPartition(), sampling.ShuffledPartition()):
            plans.append(GDPlan(alg, LAZY, strategy))
    unknown = set(wanted) - {"bgd", "mgd", "sgd"}
    if unknown:
        raise PlanError(f"cannot enumerate plans for {sorted(unknown)}")
    return plans


PREP_PHASE = {EAGER: ("transform", "stage"), LAZY: ("stage",)}


@dataclass(frozen=True)
class Pipeline:
    """An executable plan: the operator layout plus everything the executor
    needs to run it."""

    plan: GDPlan
    gradient: GradientFunction
    hyper: HyperParams
    columns: Optional[ColumnSpec] = None
    prep_operators: tuple = ()
    loop_operators: tuple = ()


def assemble(plan: GDPlan, gradient: GradientFunction, hyper: HyperParams,
             columns: Optional[ColumnSpec] = None) -> Pipeline:
    """Wire the seven operators into the loop shape the plan calls for.

    Eager plans parse everything up front; lazy plans move the transform
    inside the loop, right after the sample draw.
    """
    alg = plan.algorithm
    if isinstance(alg, SVRG) and plan.sampling_strategy is None:
        plan = replace(plan, sampling_strategy=sampling.RandomPartition())
    prep = PREP_PHASE[plan.transform_mode]
    core = ("compute", "update", "converge", "loop")
    if isinstance(alg, _FULL_BATCH):
        loop = core
    elif plan.transform_mode == EAGER:
        loop = ("sample",) + core
    else:
        loop = ("sample", "transform") + core
    return Pipeline(plan, gradient, hyper, columns, prep, loop)


# --- variance-reduced step ---------------------------------------------------


def svrg_step(t: int, unit_batch, ctx: Context, full_batch=None,
              gradient: Optional[GradientFunction] = None) -> np.ndarray:
    """One iteration of the flattened variance-reduced loop.

    Iterations with t mod m == 1 refresh the anchor weights and take a step
    along the mean full gradient; the rest correct a single unit's gradient by
    the anchor's gradient at the same unit plus the stored mean.
    """
    gradient = gradient or ctx["gradient"]
    m = ctx["m"]
    w = ctx["weights"]
    alpha = step_size(ctx.get("step_beta", 1.0), t)
    if t % m == 1:
        if full_batch is None:
            raise PlanError("svrg full-gradient pass needs dataset access")
        if t > 1:
            ctx["weightsBar"] = w.copy()
        w_bar = ctx["weightsBar"]
        X, y = full_batch
        contribs = gradient.batch_contributions(w_bar, X, y)
        mu = pairwise_sum_rows(contribs) / len(y)
        ctx["mu"] = mu
        direction = mu
    else:
        if unit_batch is None:
            raise PlanError("svrg stochastic step needs a sampled unit")
        X, y = unit_batch
        g_now = gradient.batch_contributions(w, X, y)[0]
        g_bar = gradient.batch_contributions(ctx["weightsBar"], X, y)[0]
        direction = g_now - g_bar + ctx["mu"]
    new_w = w - alpha * direction
    ctx["weights_prev"] = w
    ctx["weights"] = new_w
    ctx["iter"] = t
    ctx["step"] = alpha
    return new_w


# --- backtracking line search -------------------------------------------------

MAX_LINE_SEARCH_SHRINKS = 50


@dataclass
class LineSearchInfo:
    accepted_step: float
    shrinks: int
    gradient_norm_sq: float


def linesearch_step(ctx: Context, X, y, algorithm: LineSearchGD,
                    gradient: Optional[GradientFunction] = None):
    """One full-batch iteration with backtracking step selection.

    Returns (new_weights, LineSearchInfo). The default Armijo mode restarts
    from the configured base step every iteration and shrinks until
    f(w) - f(w - a g) >= c * a * ||g||^2. Faithful mode keeps the step and the
    trial counter across iterations and shrinks while the drop is still at
    least step * trial-count, as the published listings do.
    """
    gradient = gradient or ctx["gradient"]
    w = ctx["weights"]
    lam = ctx.get("regularizer_lambda", 0.0)
    contribs = gradient.batch_contributions(w, X, y)
    g = pairwise_sum_rows(contribs) / len(y)
    if lam:
        g = g + 2.0 * lam * w
    gnorm2 = float(g @ g)
    iteration = ctx["iter"] + 1

    if gnorm2 <= 1e-30:
        # stationary point: weights and step stay put
        ctx["weights_prev"] = w
        ctx["weights"] = w
        ctx["iter"] = iteration
        return w, LineSearchInfo(ctx.get("step", 0.0), 0, gnorm2)

    f0 = batch_objective(w, X, y, gradient, lam)
    shrinks = 0
    if algorithm.faithful:
        step = ctx.get("step", ctx.get("step_beta", 1.0))
        trial = ctx.get("step_iteration", 1)
        while f0 - batch_objective(w - step * g, X, y, gradient, lam) >= step * trial:
            step *= algorithm.shrink
            trial += 1
            shrinks += 1
            if shrinks > MAX_LINE_SEARCH_SHRINKS:
                raise LineSearchStalledError("line search stalled")
        ctx["step_iteration"] = trial
    else:
        step = ctx.get("step_beta", 1.0)
        c = algorithm.sufficient_decrease
        while f0 - batch_objective(w - step * g, X, y, gradient, lam) < c * step * gnorm2:
            step *= algorithm.shrink
            shrinks += 1
            if shrinks > MAX_LINE_SEARCH_SHRINKS:
                raise LineSearchStalledError("line search stalled")

    new_w = w - step * g
    ctx["weights_prev"] = w
    ctx["weights"] = new_w
    ctx["iter"] = iteration
    ctx["step"] = step
    return new_w, LineSearchInfo(step, shrinks, gnorm2)
