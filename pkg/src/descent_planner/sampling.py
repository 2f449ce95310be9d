"""Sampling strategies over partitioned datasets.

Three strategies:

* bernoulli: scan every unit and include it independently with a fixed
  fraction, so the returned size is random with mean n * fraction;
* random-partition: each draw picks a partition uniformly, then a unit
  uniformly inside it (draws are independent, so a batch may repeat a unit);
* shuffled-partition: keep one randomly-picked partition shuffled and hand out
  its units sequentially, drawing and shuffling a fresh partition when the
  current one runs out.

Samplers derive a fresh generator from (base seed, iteration) for every
iteration, so plan variants that share a seed see identical draws regardless
of what else they do between iterations.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .dataset import Dataset
from .errors import EmptySampleError

# Minimum expected bernoulli draw. MLlib-style guard: with fraction b/n and
# b=1 the draw is empty ~37% of the time, so tiny batches bump the fraction
# instead of retrying full scans.
BERNOULLI_MIN_EXPECTED = 8


@dataclass(frozen=True)
class Bernoulli:
    """fraction None means "derive as batch_size / n at assembly time"."""

    fraction: Optional[float] = None

    name = "bernoulli"

    def __post_init__(self):
        if self.fraction is not None and not 0 < self.fraction <= 1:
            raise ValueError("bernoulli fraction must be in (0, 1]")


@dataclass(frozen=True)
class RandomPartition:
    name = "random-partition"


@dataclass(frozen=True)
class ShuffledPartition:
    name = "shuffled-partition"


SamplingStrategy = Union[Bernoulli, RandomPartition, ShuffledPartition]

STRATEGY_NAMES = ("bernoulli", "random-partition", "shuffled-partition")


def strategy_from_name(name: str) -> SamplingStrategy:
    table = {
        "bernoulli": Bernoulli(),
        "random-partition": RandomPartition(),
        "shuffled-partition": ShuffledPartition(),
    }
    if name not in table:
        raise KeyError(
            f"unknown sampler {name!r}; known: {', '.join(STRATEGY_NAMES)}")
    return table[name]


def resolve_bernoulli_fraction(strategy: Bernoulli, batch_size: int, n: int) -> float:
    if strategy.fraction is not None:
        return strategy.fraction
    return min(1.0, max(batch_size, BERNOULLI_MIN_EXPECTED) / n)


def _iteration_rng(seed: int, iteration: int, attempt: int = 0):
    return np.random.default_rng((seed, iteration, attempt))


@dataclass
class SamplerState:
    """Mutable cursor for shuffled-partition sampling; owned by exactly one
    executor loop."""

    seed: int
    current_partition: Optional[int] = None
    cursor: int = 0
    shuffled_order: Optional[np.ndarray] = None
    partition_reads: int = 0


class Sampler:
    """Base: produces global record indices for one iteration."""

    def __init__(self, strategy, dataset: Dataset, seed: int):
        self.strategy = strategy
        self.dataset = dataset
        self.state = SamplerState(seed=seed)

    def sample_indices(self, batch_size: int, iteration: int,
                       attempt: int = 0) -> np.ndarray:
        raise NotImplementedError

    def sample(self, batch_size: int, iteration: int, attempt: int = 0):
        """Spec-level view: the sampled raw records themselves."""
        idx = self.sample_indices(batch_size, iteration, attempt)
        return [self.dataset.record(int(i)) for i in idx]


class BernoulliSampler(Sampler):
    def __init__(self, strategy, dataset, seed, batch_size):
        super().__init__(strategy, dataset, seed)
        n = dataset.stats.num_units
        self.fraction = resolve_bernoulli_fraction(strategy, batch_size, n)

    def sample_indices(self, batch_size, iteration, attempt=0):
        rng = _iteration_rng(self.state.seed, iteration, attempt)
        n = self.dataset.stats.num_units
        mask = rng.random(n) < self.fraction
        idx = np.nonzero(mask)[0]
        if idx.size == 0:
            raise EmptySampleError(
                f"bernoulli draw at iteration {iteration} returned no units")
        return idx


class RandomPartitionSampler(Sampler):
    def sample_indices(self, batch_size, iteration, attempt=0):
        rng = _iteration_rng(self.state.seed, iteration, attempt)
        counts = self.dataset.partition_counts
        starts = self.dataset.partition_starts
        parts = rng.integers(0, len(counts), size=batch_size)
        offsets = rng.integers(0, counts[parts])
        return starts[parts] + offsets


class ShuffledPartitionSampler(Sampler):
    def _reshuffle(self, rng):
        pid = int(rng.integers(0, self.dataset.num_partitions))
        count = int(self.dataset.partition_counts[pid])
        start = int(self.dataset.partition_starts[pid])
        self.state.current_partition = pid
        self.state.shuffled_order = start + rng.permutation(count)
        self.state.cursor = 0
        self.state.partition_reads += 1

    def sample_indices(self, batch_size, iteration, attempt=0):
        rng = _iteration_rng(self.state.seed, iteration, attempt)
        st = self.state
        out = np.empty(batch_size, dtype=np.int64)
        filled = 0
        while filled < batch_size:
            if st.shuffled_order is None or st.cursor >= len(st.shuffled_order):
                self._reshuffle(rng)
            take = min(batch_size - filled, len(st.shuffled_order) - st.cursor)
            out[filled:filled + take] = st.shuffled_order[st.cursor:st.cursor + take]
            st.cursor += take
            filled += take
        return out


def make_sampler(strategy: SamplingStrategy, dataset: Dataset, seed: int,
                 batch_size: int) -> Sampler:
    if isinstance(strategy, Bernoulli):
        return BernoulliSampler(strategy, dataset, seed, batch_size)
    if isinstance(strategy, RandomPartition):
        return RandomPartitionSampler(strategy, dataset, seed)
    if isinstance(strategy, ShuffledPartition):
        return ShuffledPartitionSampler(strategy, dataset, seed)
    raise TypeError(f"unknown sampling strategy {strategy!r}")
