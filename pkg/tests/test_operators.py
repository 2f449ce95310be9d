import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from descent_planner import operators as ops
from descent_planner.dataset import DENSE_CSV, LIBSVM_SPARSE, RawRecord
from descent_planner.errors import (DivergenceError, EmptySampleError,
                                    TransformError)

from conftest import unit


def ctx_for(d, fmt=DENSE_CSV, **extra):
    base = ops.Context(num_features=d, format=fmt,
                       gradient=ops.get_gradient("svm-hinge"))
    base.update(extra)
    return base


class TestTransform:
    def test_dense_default_label_first(self):
        rec = RawRecord(b"5.0,2.0,3.0", 0, 0)
        u = ops.transform(rec, ctx_for(2))
        assert u.label == 5.0
        assert np.array_equal(u.features, [2.0, 3.0])

    def test_libsvm_one_based_shift(self):
        rec = RawRecord(b"+1 3:0.5 7:1.2", 0, 0)
        u = ops.transform(rec, ctx_for(8, fmt=LIBSVM_SPARSE))
        assert u.label == 1.0
        assert u.indices.tolist() == [2, 6]
        assert u.values.tolist() == [0.5, 1.2]
        dense = u.to_dense()
        assert dense[2] == 0.5 and dense[6] == 1.2 and dense.sum() == 1.7

    def test_malformed_number_carries_position(self):
        rec = RawRecord(b"1.0,abc", 3, 17)
        with pytest.raises(TransformError) as err:
            ops.transform(rec, ctx_for(1))
        assert err.value.column == 2
        assert err.value.partition_id == 3
        assert err.value.offset == 17


class TestStage:
    def test_defaults(self):
        ctx = ctx_for(3)
        ops.stage(None, ctx)
        assert np.array_equal(ctx["weights"], [0.0, 0.0, 0.0])
        assert ctx["step"] == 1.0
        assert ctx["iter"] == 0

    def test_user_step(self):
        ctx = ctx_for(2, step_beta=0.5)
        ops.stage(None, ctx)
        assert ctx["step"] == 0.5

    def test_sample_statistics_available_to_lazy_transform(self):
        ctx = ctx_for(2)
        ops.stage([unit(1.0, [2.0, 4.0]), unit(-1.0, [4.0, 0.0])], ctx)
        assert np.array_equal(ctx["feature_mean"], [3.0, 2.0])


class TestCompute:
    def test_hinge_inactive_margin(self):
        ctx = ctx_for(2)
        ctx["weights"] = np.array([1.0, 0.0])
        g = ops.compute(unit(1.0, [2.0, 0.0]), ctx)
        assert np.array_equal(g, [0.0, 0.0])

    def test_hinge_active_margin(self):
        ctx = ctx_for(2)
        ctx["weights"] = np.array([0.0, 0.0])
        g = ops.compute(unit(1.0, [2.0, 3.0]), ctx)
        assert np.array_equal(g, [-2.0, -3.0])

    def test_linear_regression_fixture(self):
        ctx = ctx_for(1)
        ctx["gradient"] = ops.get_gradient("linear-regression")
        ctx["weights"] = np.array([0.0])
        g = ops.compute(unit(2.0, [1.0]), ctx)
        assert np.array_equal(g, [-4.0])

    def test_logistic_fixture(self):
        ctx = ctx_for(1)
        ctx["gradient"] = ops.get_gradient("logistic-regression")
        ctx["weights"] = np.array([0.0])
        g = ops.compute(unit(1.0, [2.0]), ctx)
        assert np.allclose(g, [-1.0], atol=1e-15)

    def test_dimension_mismatch(self):
        ctx = ctx_for(3)
        ctx["weights"] = np.zeros(3)
        with pytest.raises(ValueError, match="dimension"):
            ops.compute(unit(1.0, [1.0]), ctx)


class TestAggregate:
    def test_elementwise_sum(self):
        agg = ops.aggregate([np.array([1.0, 2.0]), np.array([3.0, 4.0])])
        assert np.array_equal(agg, [4.0, 6.0])

    def test_single_element_identity(self):
        g = np.array([1.5, -2.5])
        assert np.array_equal(ops.aggregate([g]), g)

    def test_four_identical_vectors(self):
        g = np.array([0.1, 0.7])
        assert np.array_equal(ops.aggregate([g] * 4), 4 * g)

    def test_empty_signals_resample(self):
        with pytest.raises(EmptySampleError):
            ops.aggregate([])

    def test_mismatched_lengths(self):
        with pytest.raises(ValueError):
            ops.aggregate([np.zeros(2), np.zeros(3)])

    @given(st.integers(0, 6), st.integers(1, 9))
    def test_pairwise_matches_mean_for_identical_rows(self, log2n, dval):
        # identical rows reduce exactly at any power-of-two count
        n = 2 ** log2n
        row = np.full(3, dval / 7.0)
        total = ops.pairwise_sum_rows(np.tile(row, (n, 1)))
        assert np.array_equal(total / n, row)


class TestUpdate:
    def test_mean_gradient_step(self):
        ctx = ctx_for(2, step_beta=1.0)
        ctx["weights"] = np.array([1.0, 1.0])
        ctx["iter"] = 0
        new = ops.update(np.array([4.0, 4.0]), 2, ctx)
        assert np.array_equal(new, [-1.0, -1.0])
        assert ctx["iter"] == 1

    def test_zero_gradient_is_identity(self):
        ctx = ctx_for(2)
        ctx["weights"] = np.array([0.3, -0.7])
        ctx["iter"] = 0
        new = ops.update(np.zeros(2), 5, ctx)
        assert np.array_equal(new, [0.3, -0.7])

    def test_step_schedule(self):
        # beta / sqrt(i): fourth step halves a unit beta
        assert ops.step_size(1.0, 4) == 0.5
        ctx = ctx_for(1, step_beta=1.0)
        ctx["weights"] = np.zeros(1)
        ctx["iter"] = 3
        ops.update(np.array([1.0]), 1, ctx)
        assert ctx["step"] == 0.5

    def test_non_finite_aborts(self):
        ctx = ctx_for(1)
        ctx["weights"] = np.zeros(1)
        ctx["iter"] = 0
        with pytest.raises(DivergenceError):
            ops.update(np.array([np.nan]), 1, ctx)

    def test_regularizer_added(self):
        ctx = ctx_for(1, regularizer_lambda=0.5)
        ctx["weights"] = np.array([2.0])
        ctx["iter"] = 0
        new = ops.update(np.array([0.0]), 1, ctx)
        # g = 0/1 + 2*0.5*2 = 2, alpha = 1
        assert np.array_equal(new, [0.0])


class TestConverge:
    def test_identical_weights(self):
        ctx = ctx_for(2)
        ctx["weights_prev"] = np.array([1.0, 1.0])
        assert ops.converge(np.array([1.0, 1.0]), ctx) == 0.0

    def test_l2_three_four_five(self):
        ctx = ctx_for(2)
        ctx["weights_prev"] = np.array([0.0, 0.0])
        assert ops.converge(np.array([3.0, 4.0]), ctx) == 5.0

    def test_l1_mode(self):
        ctx = ctx_for(2, convergence="l1")
        ctx["weights_prev"] = np.array([0.0, 0.0])
        assert ops.converge(np.array([1.0, 2.0]), ctx) == 3.0


class TestLoopDecision:
    def test_stops_below_tolerance(self):
        ctx = ctx_for(1)
        ctx["iter"] = 5
        assert ops.loop_decision(0.0005, ctx, 0.001, 1000) is False

    def test_stops_at_iteration_cap(self):
        ctx = ctx_for(1)
        ctx["iter"] = 1000
        assert ops.loop_decision(0.5, ctx, 0.001, 1000) is False

    def test_continues_otherwise(self):
        ctx = ctx_for(1)
        ctx["iter"] = 10
        assert ops.loop_decision(0.01, ctx, 0.001, 1000) is True

    def test_no_tolerance_runs_to_cap(self):
        ctx = ctx_for(1)
        ctx["iter"] = 10
        assert ops.loop_decision(0.0, ctx, None, 1000) is True


class TestObjective:
    def test_hinge_zero_when_margin_met(self):
        grad = ops.get_gradient("svm-hinge")
        assert ops.objective([1.0, 0.0], [unit(1.0, [2.0, 0.0])], grad) == 0.0

    def test_squared_error(self):
        grad = ops.get_gradient("linear-regression")
        assert ops.objective([0.0], [unit(2.0, [1.0])], grad) == 4.0

    def test_log_loss_at_origin(self):
        grad = ops.get_gradient("logistic-regression")
        val = ops.objective([0.0], [unit(1.0, [2.0])], grad)
        assert val == pytest.approx(math.log(2.0), rel=1e-12)

    def test_log_loss_is_overflow_safe(self):
        grad = ops.get_gradient("logistic-regression")
        val = ops.objective([1000.0], [unit(-1.0, [1.0])], grad)
        assert val == pytest.approx(1000.0, rel=1e-9)
        tiny = ops.objective([1000.0], [unit(1.0, [1.0])], grad)
        assert 0.0 <= tiny < 1e-300 or tiny == 0.0


def _finite_difference(grad, w, u, h=1e-6):
    out = np.zeros_like(w)
    for j in range(len(w)):
        hi, lo = w.copy(), w.copy()
        hi[j] += h
        lo[j] -= h
        out[j] = (grad.pointwise_loss(hi, u) - grad.pointwise_loss(lo, u)) / (2 * h)
    return out


@pytest.mark.parametrize("name", ["linear-regression", "logistic-regression",
                                  "svm-hinge"])
def test_gradient_matches_finite_differences(name):
    grad = ops.get_gradient(name)
    rng = np.random.default_rng(42)
    checked = 0
    while checked < 100:
        d = int(rng.integers(1, 6))
        w = rng.standard_normal(d)
        u = unit(1.0 if rng.random() < 0.5 else -1.0, rng.standard_normal(d))
        if name == "svm-hinge" and abs(1.0 - u.label * float(u.features @ w)) < 1e-3:
            continue  # kink of the hinge
        analytic = grad.pointwise_gradient(w, u)
        numeric = _finite_difference(grad, w, u)
        scale = max(np.max(np.abs(numeric)), 1.0)
        assert np.max(np.abs(analytic - numeric)) / scale < 1e-5
        checked += 1


def test_gradient_linearity():
    # sum of per-unit gradients equals the gradient of the summed objective
    grad = ops.get_gradient("linear-regression")
    rng = np.random.default_rng(7)
    w = rng.standard_normal(4)
    units = [unit(rng.standard_normal(), rng.standard_normal(4))
             for _ in range(16)]
    summed = ops.aggregate([grad.pointwise_gradient(w, u) for u in units])

    def total_loss(wv):
        return sum(grad.pointwise_loss(wv, u) for u in units)

    numeric = np.zeros(4)
    h = 1e-7
    for j in range(4):
        hi, lo = w.copy(), w.copy()
        hi[j] += h
        lo[j] -= h
        numeric[j] = (total_loss(hi) - total_loss(lo)) / (2 * h)
    assert np.max(np.abs(summed - numeric)) < 1e-5 * max(1.0, np.max(np.abs(numeric)))


def test_update_is_one_textbook_batch_step():
    # w' = w - alpha * mean gradient, assembled by hand
    grad = ops.get_gradient("linear-regression")
    rng = np.random.default_rng(3)
    w0 = rng.standard_normal(3)
    units = [unit(rng.standard_normal(), rng.standard_normal(3))
             for _ in range(8)]
    ctx = ops.Context(num_features=3, step_beta=0.7, gradient=grad)
    ctx["weights"] = w0.copy()
    ctx["iter"] = 0
    agg = ops.aggregate([grad.pointwise_gradient(w0, u) for u in units])
    new = ops.update(agg, len(units), ctx)
    expected = w0 - 0.7 * (agg / len(units))
    assert np.array_equal(new, expected)


def test_sparse_and_dense_units_agree():
    grad = ops.get_gradient("svm-hinge")
    sparse = ops.DataUnit(label=1.0, indices=np.array([1, 3]),
                          values=np.array([2.0, -1.0]), num_features=5)
    dense = unit(1.0, sparse.to_dense())
    w = np.array([0.1, 0.2, 0.3, 0.4, 0.5])
    assert np.array_equal(grad.pointwise_gradient(w, sparse),
                          grad.pointwise_gradient(w, dense))
    assert grad.pointwise_loss(w, sparse) == grad.pointwise_loss(w, dense)


def test_custom_gradient_registration():
    fn = ops.GradientFunction("custom-zero",
                              lambda w, u: np.zeros_like(w),
                              lambda w, u: 0.0,
                              lambda w, X, y: np.zeros_like(X),
                              lambda w, X, y: np.zeros(len(y)))
    ops.register_gradient(fn)
    try:
        assert ops.get_gradient("custom-zero") is fn
    finally:
        del ops.GRADIENT_REGISTRY["custom-zero"]
    with pytest.raises(KeyError, match="unknown gradient"):
        ops.get_gradient("custom-zero")
