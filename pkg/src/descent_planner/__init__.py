"""Cost-based plan optimizer and execution engine for gradient-descent
training."""

from .dataset import (ColumnSpec, Dataset, DatasetStats, ingest, synthesize,
                      write_dataset)
from .errors import (ConstraintViolation, DescentPlannerError, DivergenceError,
                     EmptySampleError, EstimationUnavailableError, IngestError,
                     LineSearchStalledError, PlanError, TransformError)
from .estimator import (ErrorSequence, FitResult, SpeculationConfig,
                        estimate_iterations, fit, speculate)
from .executor import TrainResult, execute, predict
from .operators import (Context, DataUnit, GradientFunction, aggregate,
                        compute, converge, get_gradient, loop_decision,
                        objective, register_gradient, stage, transform, update)
from .optimizer import Constraints, OptimizerDecision, check_constraints, choose
from .plans import (SVRG, BatchGD, GDPlan, HyperParams, LineSearchGD,
                    MiniBatchGD, StochasticGD, assemble, enumerate_plans,
                    linesearch_step, svrg_step)
from .costmodel import (CostParameters, DerivedLayout, c_cpu, c_io, c_nt,
                        calibrate, operator_cost, plan_cost_per_run)
from .sampling import (Bernoulli, RandomPartition, SamplerState,
                       ShuffledPartition, make_sampler)

__version__ = "0.1.0"
