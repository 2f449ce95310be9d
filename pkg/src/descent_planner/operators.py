"""The seven-operator abstraction and the gradient/objective library.

Operators: transform, stage, compute, aggregate (the fan-in between compute
and update), update, converge, and loop_decision. Each reads and writes a
Context, the keyed store of algorithm globals (weights, step size, iteration
counter, task parameters).

Compute is pure over an immutable context snapshot and may run on many units
in parallel; update/converge/loop_decision mutate the context and run on one
thread per iteration.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .dataset import DENSE_CSV, LIBSVM_SPARSE, ColumnSpec, RawRecord
from .errors import DivergenceError, EmptySampleError, TransformError


class Context(dict):
    """Keyed store of algorithm globals.

    Canonical keys: ``weights``, ``step``, ``iter``, ``step_beta``,
    ``regularizer_lambda``; algorithm variants add ``weightsBar``, ``mu``,
    ``m``, ``isStepSizeIter``, ``step_iteration``.
    """

    @property
    def weights(self) -> np.ndarray:
        return self["weights"]

    def snapshot(self) -> "Context":
        return Context(self)


@dataclass
class DataUnit:
    """One labeled example: dense features, or a sparse (indices, values)
    layout with 0-based strictly increasing indices."""

    label: float
    features: Optional[np.ndarray] = None
    indices: Optional[np.ndarray] = None
    values: Optional[np.ndarray] = None
    num_features: int = 0

    def __post_init__(self):
        if self.features is not None:
            self.num_features = len(self.features)
        elif self.indices is not None:
            idx = np.asarray(self.indices)
            if len(idx) and (np.any(np.diff(idx) <= 0) or idx[-1] >= self.num_features
                             or idx[0] < 0):
                raise ValueError("sparse indices must be strictly increasing and < d")

    @property
    def is_sparse(self) -> bool:
        return self.features is None

    def to_dense(self) -> np.ndarray:
        if self.features is not None:
            return self.features
        out = np.zeros(self.num_features)
        out[self.indices] = self.values
        return out

    def dot(self, w: np.ndarray) -> float:
        if self.features is not None:
            return float(self.features @ w)
        return float(self.values @ w[self.indices])


def _sigmoid(z):
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _scaled_unit(unit: DataUnit, coef: float) -> np.ndarray:
    out = np.zeros(unit.num_features)
    if coef != 0.0:
        if unit.features is not None:
            out = coef * unit.features
        else:
            out[unit.indices] = coef * unit.values
    return out


# --- gradient / loss pairs ------------------------------------------------
#
# linear regression:   g = 2 (w.x - y) x        loss = (w.x - y)^2
# logistic regression: g = -y x / (1 + e^{y w.x})  loss = log(1 + e^{-y w.x})
# svm hinge:           g = -y x if y w.x < 1 else 0  loss = max(0, 1 - y w.x)


def _linreg_grad(w, unit):
    return _scaled_unit(unit, 2.0 * (unit.dot(w) - unit.label))


def _linreg_loss(w, unit):
    r = unit.dot(w) - unit.label
    return r * r


def _linreg_batch(w, X, y):
    r = X @ w - y
    return (2.0 * r)[:, None] * X


def _linreg_batch_loss(w, X, y):
    r = X @ w - y
    return r * r


def _logistic_grad(w, unit):
    margin = unit.label * unit.dot(w)
    return _scaled_unit(unit, -unit.label * float(_sigmoid(-margin)))


def _logistic_loss(w, unit):
    return float(np.logaddexp(0.0, -unit.label * unit.dot(w)))


def _logistic_batch(w, X, y):
    margin = y * (X @ w)
    coef = -y * _sigmoid(-margin)
    return coef[:, None] * X


def _logistic_batch_loss(w, X, y):
    return np.logaddexp(0.0, -y * (X @ w))


def _hinge_grad(w, unit):
    margin = unit.label * unit.dot(w)
    return _scaled_unit(unit, -unit.label if margin < 1.0 else 0.0)


def _hinge_loss(w, unit):
    return max(0.0, 1.0 - unit.label * unit.dot(w))


def _hinge_batch(w, X, y):
    margin = y * (X @ w)
    coef = np.where(margin < 1.0, -y, 0.0)
    return coef[:, None] * X


def _hinge_batch_loss(w, X, y):
    return np.maximum(0.0, 1.0 - y * (X @ w))


@dataclass(frozen=True)
class GradientFunction:
    """A pointwise gradient paired with its loss, plus vectorized forms that
    produce one contribution row per unit."""

    name: str
    pointwise_gradient: Callable
    pointwise_loss: Callable
    batch_contributions: Callable
    batch_loss: Callable


GRADIENT_REGISTRY = {}
_GRADIENT_ALIASES = {
    "linreg": "linear-regression",
    "linear": "linear-regression",
    "squared": "linear-regression",
    "logistic": "logistic-regression",
    "logreg": "logistic-regression",
    "svm": "svm-hinge",
    "hinge": "svm-hinge",
}


def register_gradient(fn: GradientFunction) -> None:
    GRADIENT_REGISTRY[fn.name] = fn


def get_gradient(name: str) -> GradientFunction:
    key = _GRADIENT_ALIASES.get(name, name)
    if key not in GRADIENT_REGISTRY:
        known = ", ".join(sorted(GRADIENT_REGISTRY))
        raise KeyError(f"unknown gradient function {name!r}; known: {known}")
    return GRADIENT_REGISTRY[key]


register_gradient(GradientFunction(
    "linear-regression", _linreg_grad, _linreg_loss, _linreg_batch, _linreg_batch_loss))
register_gradient(GradientFunction(
    "logistic-regression", _logistic_grad, _logistic_loss, _logistic_batch,
    _logistic_batch_loss))
register_gradient(GradientFunction(
    "svm-hinge", _hinge_grad, _hinge_loss, _hinge_batch, _hinge_batch_loss))


# --- record parsing (transform) --------------------------------------------


def _parse_dense(text: bytes, columns: Optional[ColumnSpec], record=None):
    fields = text.split(b",")
    values = []
    for col, f in enumerate(fields, start=1):
        try:
            values.append(float(f))
        except ValueError:
            raise TransformError(
                f"malformed number {f.decode(errors='replace')!r} at column {col}",
                partition_id=getattr(record, "partition_id", None),
                offset=getattr(record, "offset", None),
                column=col,
            ) from None
    if columns is None:
        label = values[0]
        feats = np.asarray(values[1:], dtype=float)
    else:
        label = values[columns.label_column - 1]
        feats = np.asarray(
            values[columns.feature_start - 1:columns.feature_end], dtype=float)
    return DataUnit(label=label, features=feats)


def _parse_libsvm(text: bytes, num_features: int, record=None):
    parts = text.split()
    try:
        label = float(parts[0])
    except (ValueError, IndexError):
        raise TransformError(
            "malformed label",
            partition_id=getattr(record, "partition_id", None),
            offset=getattr(record, "offset", None),
        ) from None
    indices, values = [], []
    for col, item in enumerate(parts[1:], start=2):
        try:
            idx_s, val_s = item.split(b":", 1)
            indices.append(int(idx_s) - 1)  # 1-based on disk, 0-based in memory
            values.append(float(val_s))
        except ValueError:
            raise TransformError(
                f"malformed feature {item.decode(errors='replace')!r} at column {col}",
                partition_id=getattr(record, "partition_id", None),
                offset=getattr(record, "offset", None),
                column=col,
            ) from None
    return DataUnit(
        label=label,
        indices=np.asarray(indices, dtype=np.int64),
        values=np.asarray(values, dtype=float),
        num_features=num_features,
    )


def transform(record: RawRecord, ctx: Context) -> DataUnit:
    """Parse a raw record into a data unit per the configured format and
    column spec. No normalization is applied by default."""
    fmt = ctx.get("format", DENSE_CSV)
    if fmt == LIBSVM_SPARSE:
        return _parse_libsvm(record.text, ctx["num_features"], record)
    return _parse_dense(record.text, ctx.get("columns"), record)


# --- stage ------------------------------------------------------------------


def stage(init_units, ctx: Context) -> Context:
    """Zero the weight vector, set the step size and iteration counter, and
    collect any global statistics a lazy-plan transform will need from the
    provided units (e.g. the feature mean)."""
    d = ctx["num_features"]
    ctx["weights"] = np.zeros(d)
    ctx["step"] = float(ctx.get("step_beta", 1.0))
    ctx["iter"] = 0
    if init_units:
        dense = np.stack([u.to_dense() for u in init_units])
        ctx["feature_mean"] = dense.mean(axis=0)
    return ctx


# --- compute / aggregate / update -------------------------------------------


def compute(unit: DataUnit, ctx: Context) -> np.ndarray:
    """Gradient contribution of one unit at the current weights; the
    regularizer is handled in update."""
    w = ctx["weights"]
    if unit.num_features != len(w):
        raise ValueError(
            f"dimension mismatch: unit has {unit.num_features} features, "
            f"weights have {len(w)}")
    return ctx["gradient"].pointwise_gradient(w, unit)


def pairwise_sum_rows(matrix: np.ndarray, copy: bool = True) -> np.ndarray:
    """Sum rows with a fixed balanced pairing so the reduction order never
    depends on chunking or thread count.

    Callers that own a freshly computed matrix may pass copy=False; the
    buffer is clobbered in place.
    """
    g = np.array(matrix, dtype=float, copy=copy)
    n = g.shape[0]
    step = 1
    while step < n:
        upper = n - step
        g[0:upper:2 * step] += g[step:n:2 * step]
        step *= 2
    return g[0]


def aggregate(contributions) -> np.ndarray:
    """Elementwise sum of gradient contributions (fixed pairwise order)."""
    contributions = list(contributions)
    if not contributions:
        raise EmptySampleError("aggregate received no contributions")
    lengths = {len(c) for c in contributions}
    if len(lengths) != 1:
        raise ValueError("contributions have mismatched lengths")
    return pairwise_sum_rows(np.stack(contributions))


def step_size(beta: float, iteration: int) -> float:
    """Adaptive step beta / sqrt(i) for iteration i >= 1."""
    return beta / math.sqrt(iteration)


def update(aggregated: np.ndarray, batch_size: int, ctx: Context) -> np.ndarray:
    """Apply one descent step from the mean gradient and advance the
    iteration counter.

    The mean (not the sum) keeps one step-size schedule comparable across
    full-batch, mini-batch, and single-sample variants.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be at least 1")
    w = ctx["weights"]
    g = np.asarray(aggregated, dtype=float) / batch_size
    lam = ctx.get("regularizer_lambda", 0.0)
    if lam:
        g = g + 2.0 * lam * w
    iteration = ctx["iter"] + 1
    if not np.all(np.isfinite(g)):
        raise DivergenceError(
            f"non-finite gradient at iteration {iteration}", iteration=iteration)
    alpha = step_size(ctx.get("step_beta", 1.0), iteration)
    new_w = w - alpha * g
    ctx["weights_prev"] = w
    ctx["weights"] = new_w
    ctx["iter"] = iteration
    ctx["step"] = alpha
    return new_w


# --- convergence phase -------------------------------------------------------

CONVERGENCE_REGISTRY = {
    "l2": lambda new, old: float(np.linalg.norm(new - old)),
    "l1": lambda new, old: float(np.sum(np.abs(new - old))),
}


def converge(new_weights: np.ndarray, ctx: Context) -> float:
    """Delta between successive weight vectors: L2 by default, L1 as a
    switch."""
    old = ctx["weights_prev"]
    metric = CONVERGENCE_REGISTRY[ctx.get("convergence", "l2")]
    return metric(np.asarray(new_weights, dtype=float), old)


def loop_decision(delta: float, ctx: Context, tolerance, max_iter: int) -> bool:
    """True if the loop should continue: stop once delta drops below the
    tolerance or the iteration cap is reached. A tolerance of None disables
    the delta test (fixed-iteration runs)."""
    if tolerance is not None and delta < tolerance:
        return False
    if ctx["iter"] >= max_iter:
        return False
    return True


# --- objective ----------------------------------------------------------------


def objective(weights, units, gradient: GradientFunction,
              regularizer_lambda: float = 0.0) -> float:
    """Mean pointwise loss plus lambda * ||w||^2 over the given units."""
    units = list(units)
    if not units:
        raise ValueError("objective needs at least one unit")
    w = np.asarray(weights, dtype=float)
    total = sum(gradient.pointwise_loss(w, u) for u in units)
    value = total / len(units)
    if regularizer_lambda:
        value += regularizer_lambda * float(w @ w)
    return value


def batch_objective(weights, X, y, gradient: GradientFunction,
                    regularizer_lambda: float = 0.0) -> float:
    w = np.asarray(weights, dtype=float)
    value = float(np.mean(gradient.batch_loss(w, X, y)))
    if regularizer_lambda:
        value += regularizer_lambda * float(w @ w)
    return value
