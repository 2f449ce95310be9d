"""Analytical per-iteration and per-plan cost model, plus calibration.

Costs decompose into IO, CPU, and network terms over a partitioned layout:

* partitions   p = ceil(size_bytes / partition_bytes)
* waves        w = p / workers (a wave is one round of partitions processed
  in parallel)
* last wave    lwp = (n mod (k * workers * floor(w))) / k partitions, where k
  is units per partition; when there is no full wave everything falls into
  the last wave (the mod-by-zero case)

IO charges one seek plus the page reads of a single partition per full wave,
plus a final seek and the remaining units' pages for the last wave. The
formulas are transcribed literally, including the unconditional last-wave seek
and the ceil over fractional last-wave units; see the module tests for the
hand-derived fixtures.

Update is the only operator that also pays network cost: its inputs are
shipped to a single node for aggregation. In single-machine mode the network
constant is zero and that term vanishes.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import plans, sampling
from .dataset import DEFAULT_PARTITION_BYTES, Dataset, DatasetStats

OPERATOR_KINDS = ("transform", "stage", "compute", "update", "sample",
                  "converge", "loop")

_DEFAULT_CPU = {
    "transform": 1e-6,
    "stage": 1e-6,
    "compute": 2e-7,
    "update": 2e-7,
    "sample": 1e-6,
    "sample.bernoulli": 5e-9,
    "sample.random-partition": 1e-6,
    "sample.shuffled-partition": 1e-6,
    # per-unit cost of physically permuting a partition, distinct from the
    # amortized per-draw cost above
    "sample.shuffled-partition.setup": 3e-8,
    "converge": 2e-6,
    "loop": 2e-6,
}


@dataclass(frozen=True)
class CostParameters:
    """Machine and layout constants.

    ``cpu_unit_seconds`` maps operator kind to seconds per data unit;
    sampler-specific entries use dotted keys like ``sample.bernoulli``.
    """

    page_bytes: int = 4096
    packet_bytes: int = 1500
    partition_bytes: int = DEFAULT_PARTITION_BYTES
    parallel_workers: int = 1
    page_io_seconds: float = 2e-9
    seek_seconds: float = 5e-6
    network_seconds_per_packet: float = 0.0
    cpu_unit_seconds: dict = field(default_factory=lambda: dict(_DEFAULT_CPU))

    def __post_init__(self):
        if min(self.page_bytes, self.packet_bytes, self.partition_bytes) <= 0:
            raise ValueError("byte sizes must be positive")
        if self.parallel_workers < 1:
            raise ValueError("parallel_workers must be at least 1")
        if self.page_io_seconds <= 0 or self.seek_seconds <= 0:
            raise ValueError("io constants must be positive")
        if self.network_seconds_per_packet < 0:
            raise ValueError("network constant must be non-negative")

    def cpu_unit(self, op_kind: str) -> float:
        if op_kind in self.cpu_unit_seconds:
            return self.cpu_unit_seconds[op_kind]
        base = op_kind.split(".", 1)[0]
        if base in self.cpu_unit_seconds:
            return self.cpu_unit_seconds[base]
        raise KeyError(f"no cpu cost for operator kind {op_kind!r}")


@dataclass(frozen=True)
class DerivedLayout:
    """Recomputed from stats and params on every use, never stored stale.

    ``units_per_partition`` is clamped to the unit count: a partition never
    holds more units than the dataset has, which keeps the wave formulas
    sensible for datasets (and samples) smaller than one partition.
    """

    partitions: int
    waves: float
    last_wave_partitions: float
    units_per_partition: int

    @classmethod
    def compute(cls, stats: DatasetStats, params: CostParameters) -> "DerivedLayout":
        p = max(1, math.ceil(stats.size_bytes / params.partition_bytes))
        k = max(1, min(stats.units_per_partition, stats.num_units))
        waves = p / params.parallel_workers
        full = math.floor(waves)
        span = k * params.parallel_workers * full
        remainder = stats.num_units if span == 0 else stats.num_units % span
        return cls(p, waves, remainder / k, k)


def _unit_bytes(stats: DatasetStats) -> float:
    return stats.size_bytes / stats.num_units


def c_io(stats: DatasetStats, params: CostParameters) -> float:
    """Seeks plus page reads per wave, with the last wave charged only for
    the units it actually holds."""
    lay = DerivedLayout.compute(stats, params)
    full = math.floor(lay.waves)
    per_wave = params.seek_seconds + (
        params.partition_bytes / params.page_bytes) * params.page_io_seconds
    last_units = min(lay.last_wave_partitions, 1.0) * lay.units_per_partition
    last_bytes = last_units * _unit_bytes(stats)
    last = params.seek_seconds + (
        last_bytes / params.page_bytes) * params.page_io_seconds
    return full * per_wave + last


def c_cpu(stats: DatasetStats, op_kind: str, params: CostParameters) -> float:
    """Per-unit processing cost of one partition, times the wave count."""
    lay = DerivedLayout.compute(stats, params)
    unit_cost = params.cpu_unit(op_kind)
    full = math.floor(lay.waves)
    last_units = math.ceil(
        min(lay.last_wave_partitions, 1.0) * lay.units_per_partition)
    return (full * lay.units_per_partition + last_units) * unit_cost


def c_nt(stats: DatasetStats, params: CostParameters) -> float:
    return (stats.size_bytes / params.packet_bytes) * params.network_seconds_per_packet


def operator_cost(op_kind: str, stats: Optional[DatasetStats],
                  params: CostParameters) -> float:
    """IO + CPU for data-local operators; stage is CPU-only; update adds the
    network term because its inputs converge on one node."""
    base = op_kind.split(".", 1)[0]
    if base == "stage":
        target = stats or _SINGLE_UNIT
        return c_cpu(target, op_kind, params)
    if stats is None:
        raise ValueError(f"operator {op_kind!r} needs input stats")
    cost = c_io(stats, params) + c_cpu(stats, op_kind, params)
    if base == "update":
        cost += c_nt(stats, params)
    return cost


_SINGLE_UNIT = DatasetStats(num_units=1, num_features=1, size_bytes=8,
                            density=1.0, units_per_partition=1)


def sample_stats(stats: DatasetStats, units: int) -> DatasetStats:
    """Stats for a subset of ``units`` records with the parent's unit size."""
    units = max(1, min(units, stats.num_units))
    size = max(1, round(units * _unit_bytes(stats)))
    return DatasetStats(units, stats.num_features, size, stats.density,
                        stats.units_per_partition)


def delta_unit_stats(num_features: int) -> DatasetStats:
    """The convergence delta input: one unit of d doubles."""
    return DatasetStats(1, num_features, 8 * num_features, 1.0, 1)


def _partition_read(params: CostParameters) -> float:
    return params.seek_seconds + (
        params.partition_bytes / params.page_bytes) * params.page_io_seconds


def sampling_setup_cost(strategy, stats: DatasetStats,
                        params: CostParameters) -> float:
    """One-time sampler cost before the first draw. Only shuffled-partition
    pays one: its first partition must be read and physically permuted up
    front (the "+1" in its ceil(T*b/k)+1 partition-read bound)."""
    if isinstance(strategy, sampling.ShuffledPartition):
        k = max(1, min(stats.units_per_partition, stats.num_units))
        shuffle = k * params.cpu_unit("sample.shuffled-partition.setup")
        return _partition_read(params) + shuffle
    return 0.0


def sampling_cost(strategy, stats: DatasetStats, batch: int,
                  params: CostParameters) -> float:
    """Per-iteration cost of drawing ``batch`` units.

    The three strategies are priced differently (a uniform price could not
    separate the plan space): bernoulli pays a full scan, random-partition
    pays one seek and one unit's pages per draw, shuffled-partition amortizes
    one partition read and shuffle over the k draws it serves.
    """
    if isinstance(strategy, sampling.Bernoulli):
        return c_io(stats, params) + c_cpu(stats, "sample.bernoulli", params)
    unit_pages = math.ceil(_unit_bytes(stats) / params.page_bytes)
    if isinstance(strategy, sampling.RandomPartition):
        per_draw = (params.seek_seconds
                    + unit_pages * params.page_io_seconds
                    + params.cpu_unit("sample.random-partition"))
        return batch * per_draw
    if isinstance(strategy, sampling.ShuffledPartition):
        k = max(1, min(stats.units_per_partition, stats.num_units))
        shuffle = k * params.cpu_unit("sample.shuffled-partition")
        return (_partition_read(params) + shuffle) * batch / k
    raise TypeError(f"unknown sampling strategy {strategy!r}")


@dataclass(frozen=True)
class PlanCost:
    startup_seconds: float
    per_iteration_seconds: float
    iterations: int

    @property
    def total_seconds(self) -> float:
        return self.startup_seconds + self.iterations * self.per_iteration_seconds


def plan_cost_breakdown(plan: plans.GDPlan, iterations: int,
                        stats: DatasetStats, params: CostParameters) -> PlanCost:
    """Startup plus per-iteration cost for a plan run of T iterations.

    Full-batch: stage + transform(all) up front, then compute/update over the
    whole dataset each iteration. Eager sampled plans transform everything up
    front but compute only over the batch; lazy plans skip the upfront
    transform and parse the batch inside the loop.
    """
    if iterations < 1:
        raise ValueError("iterations must be at least 1")
    alg = plan.algorithm
    n = stats.num_units
    stage_cost = operator_cost("stage", None, params)
    converge_cost = operator_cost("converge", delta_unit_stats(stats.num_features),
                                  params)
    loop_cost = operator_cost("loop", _SINGLE_UNIT, params)
    tail = converge_cost + loop_cost

    if isinstance(alg, (plans.BatchGD, plans.LineSearchGD)):
        startup = stage_cost + operator_cost("transform", stats, params)
        per_iter = (operator_cost("compute", stats, params)
                    + operator_cost("update", stats, params) + tail)
        return PlanCost(startup, per_iter, iterations)

    batch = plans.algorithm_batch_size(alg, n)
    batch_stats = sample_stats(stats, batch)
    draw = sampling_cost(plan.sampling_strategy, stats, batch, params)
    setup = sampling_setup_cost(plan.sampling_strategy, stats, params)
    core = (operator_cost("compute", batch_stats, params)
            + operator_cost("update", batch_stats, params) + tail)

    if isinstance(alg, plans.SVRG):
        # amortized full pass every update_frequency iterations
        full_pass = (operator_cost("compute", stats, params)
                     + operator_cost("update", stats, params))
        per_iter = draw + core + full_pass / alg.update_frequency
        return PlanCost(stage_cost + operator_cost("transform", stats, params)
                        + setup, per_iter, iterations)

    if plan.transform_mode == plans.EAGER:
        startup = stage_cost + operator_cost("transform", stats, params) + setup
        per_iter = draw + core
    else:
        startup = stage_cost + setup
        per_iter = draw + operator_cost("transform", batch_stats, params) + core
    return PlanCost(startup, per_iter, iterations)


def plan_cost_per_run(plan: plans.GDPlan, iterations: int, stats: DatasetStats,
                      params: CostParameters) -> float:
    return plan_cost_breakdown(plan, iterations, stats, params).total_seconds


# --- calibration -----------------------------------------------------------------


def derive_cpu_unit_costs(metrics) -> dict:
    """Per-unit CPU constants from executed-run metrics: pooled phase seconds
    over pooled units. Deterministic in its inputs."""
    phase_to_op = {"transform": "transform", "compute": "compute",
                   "update": "update", "sample": "sample"}
    seconds = {}
    units = {}
    iterations = 0
    converge_seconds = 0.0
    for m in metrics:
        for phase, op in phase_to_op.items():
            seconds[op] = seconds.get(op, 0.0) + m["phase_seconds"].get(phase, 0.0)
            units[op] = units.get(op, 0) + m["phase_units"].get(phase, 0)
        converge_seconds += m["phase_seconds"].get("converge", 0.0)
        iterations += m["phase_units"].get("converge", 0)
    out = {}
    for op, secs in seconds.items():
        if units.get(op, 0) > 0 and secs > 0:
            out[op] = secs / units[op]
    if iterations > 0 and converge_seconds > 0:
        # the converge phase times the converge and loop operators together
        half = converge_seconds / iterations / 2.0
        out["converge"] = max(half, 1e-12)
        out["loop"] = max(half, 1e-12)
    return out


#: Page cost floor used by single-machine calibration. Data here is
#: memory-resident, so streaming cost already lives inside the measured
#: per-unit CPU constants; a real page constant would double-charge it.
PAGE_IO_FLOOR = 1e-12


@dataclass(frozen=True)
class IoProbe:
    """Raw engine measurements, injectable so calibration is a pure function
    of its inputs.

    ``batch1_iteration_seconds`` is the observed wall time of one iteration
    of a lazy single-unit-batch loop; calibration solves the seek constant
    from it, so a "seek" prices what one partition-batch dispatch costs this
    engine.
    """

    slope_seconds: dict
    sampler_unit_seconds: dict
    batch1_iteration_seconds: float
    scan_page_seconds: float


def _time_repeats(fn, min_seconds=0.01, max_repeats=400):
    start = time.perf_counter()
    reps = 0
    while reps < max_repeats:
        fn()
        reps += 1
        if time.perf_counter() - start >= min_seconds and reps >= 5:
            break
    return (time.perf_counter() - start) / reps


_PROBE_ITERATIONS = 256


def measure_io_probe(sample: Dataset, gradient,
                     params: Optional[CostParameters] = None) -> IoProbe:
    """Micro-benchmarks over the sample: raw-record scan, per-operator unit
    slopes, per-sampler draw costs, and one metered single-unit-batch loop."""
    from . import executor, operators, plans

    params = params or CostParameters()

    def scan():
        total = 0
        for part in sample.partitions:
            for rec in part.records:
                total += len(rec.text)
        return total

    scan_seconds = _time_repeats(scan)
    pages = max(1, math.ceil(sample.stats.size_bytes / params.page_bytes))
    scan_page = max(scan_seconds / pages, 1e-12)

    parser = executor.RecordParser(sample.format, sample.stats.num_features,
                                   sample.columns)
    data = executor.transform_all(sample, parser)
    n = len(data.y)
    w = np.zeros(sample.stats.num_features)
    texts = [r.text for r in sample.partitions[0].records]

    slopes = {}
    slopes["transform"] = max(
        _time_repeats(lambda: parser.parse_batch(texts)) / n, 1e-12)
    slopes["compute"] = max(
        _time_repeats(lambda: gradient.batch_contributions(w, data.X, data.y)) / n,
        1e-12)
    contribs = gradient.batch_contributions(w, data.X, data.y)

    def agg_update():
        g = operators.pairwise_sum_rows(contribs) / n
        return w - 0.5 * g

    slopes["update"] = max(_time_repeats(agg_update) / n, 1e-12)

    prev = w + 1.0

    def conv_loop():
        delta = float(np.linalg.norm(w - prev))
        return delta < 1e-3

    per_conv = _time_repeats(conv_loop)
    slopes["converge"] = max(per_conv / 2.0, 1e-12)
    slopes["loop"] = max(per_conv / 2.0, 1e-12)
    slopes["stage"] = slopes["converge"]

    sampler_costs = {}
    for name in sampling.STRATEGY_NAMES:
        strategy = sampling.strategy_from_name(name)
        sampler = sampling.make_sampler(strategy, sample, seed=0, batch_size=64)
        counter = {"i": 0, "units": 0}

        def draw():
            counter["i"] += 1
            idx = sampler.sample_indices(64, counter["i"])
            counter["units"] += len(idx)

        seconds = _time_repeats(draw, min_seconds=0.005)
        per_unit = seconds * counter["i"] / max(1, counter["units"])
        if name == "bernoulli":
            # the scan visits every unit; charge per unit scanned
            per_unit = seconds / sample.stats.num_units
        sampler_costs[f"sample.{name}"] = max(per_unit, 1e-12)

    shuffle_rng = np.random.default_rng(1)
    shuffle_n = 16_384
    shuffle_seconds = _time_repeats(lambda: shuffle_rng.permutation(shuffle_n),
                                    min_seconds=0.005)
    sampler_costs["sample.shuffled-partition.setup"] = max(
        shuffle_seconds / shuffle_n, 1e-12)

    plan = plans.GDPlan(plans.StochasticGD(), plans.LAZY,
                        sampling.ShuffledPartition())
    hyper = plans.HyperParams(tolerance=None, max_iter=_PROBE_ITERATIONS)
    pipeline = plans.assemble(plan, gradient, hyper, sample.columns)
    run = executor.execute(pipeline, sample, seed=0)
    per_iter = run.total_seconds / max(1, run.iterations_run)

    return IoProbe(slopes, sampler_costs, per_iter, scan_page)


_CALIBRATION_PLAN = "sgd/lazy/shuffled-partition"


def _solve_seek(probe: IoProbe, stats: DatasetStats,
                base: CostParameters, cpu: dict) -> float:
    """Solve the per-iteration cost model for the seek constant so the
    metered single-unit loop is predicted exactly."""
    from . import plans

    plan = plans.plan_from_string(_CALIBRATION_PLAN)

    def per_iter(seek):
        trial = replace(base, seek_seconds=seek,
                        page_io_seconds=PAGE_IO_FLOOR,
                        network_seconds_per_packet=0.0,
                        cpu_unit_seconds=cpu)
        return plan_cost_breakdown(plan, 1, stats, trial).per_iteration_seconds

    zero = per_iter(1e-12)
    count = per_iter(1.0) - zero  # number of seek charges per iteration
    if count <= 0:
        return base.seek_seconds
    return max((probe.batch1_iteration_seconds - zero) / count, 1e-9)


def calibrate(sample: Dataset, metrics, gradient=None,
              base: Optional[CostParameters] = None,
              probe: Optional[IoProbe] = None) -> CostParameters:
    """Fit the cost constants to this machine and engine.

    Per-unit CPU constants come from the supplied run metrics (normally the
    speculation runs), with probe-measured slopes filling any gaps. The seek
    constant is solved from the probe's metered single-unit loop, and the
    page constant is floored: memory-resident data pays its streaming cost
    inside the CPU constants. The network constant is zero in single-machine
    mode. Missing measurements keep the configured defaults.
    """
    base = base or CostParameters()
    if probe is None:
        if gradient is None:
            raise ValueError("calibrate needs a gradient function to probe with")
        probe = measure_io_probe(sample, gradient, base)
    cpu = dict(base.cpu_unit_seconds)
    cpu.update(probe.slope_seconds)
    cpu.update(derive_cpu_unit_costs(metrics))
    cpu.update(probe.sampler_unit_seconds)
    seek = _solve_seek(probe, sample.stats, base, cpu)
    return replace(
        base,
        page_io_seconds=PAGE_IO_FLOOR,
        seek_seconds=seek,
        network_seconds_per_packet=0.0,
        cpu_unit_seconds=cpu,
    )


# --- parameter files -----------------------------------------------------------

_SCALAR_FIELDS = ("page_bytes", "packet_bytes", "partition_bytes",
                  "parallel_workers", "page_io_seconds", "seek_seconds",
                  "network_seconds_per_packet")


def save_params(params: CostParameters, path) -> None:
    lines = []
    for name in _SCALAR_FIELDS:
        lines.append(f"{name}={getattr(params, name)!r}")
    for key in sorted(params.cpu_unit_seconds):
        lines.append(f"cpu_unit_seconds.{key}={params.cpu_unit_seconds[key]!r}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_params(path) -> CostParameters:
    ints = {"page_bytes", "packet_bytes", "partition_bytes", "parallel_workers"}
    kwargs = {}
    cpu = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value")
            key, value = line.split("=", 1)
            key = key.strip()
            if key.startswith("cpu_unit_seconds."):
                cpu[key.split(".", 1)[1]] = float(value)
            elif key in ints:
                kwargs[key] = int(value)
            elif key in _SCALAR_FIELDS:
                kwargs[key] = float(value)
            else:
                raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
    return CostParameters(cpu_unit_seconds=cpu or dict(_DEFAULT_CPU), **kwargs)
