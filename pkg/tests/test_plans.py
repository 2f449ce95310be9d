import numpy as np
import pytest

from descent_planner import operators as ops
from descent_planner import plans, sampling
from descent_planner.errors import LineSearchStalledError, PlanError

from conftest import unit

GRAD = ops.get_gradient("svm-hinge")
LINREG = ops.get_gradient("linear-regression")


class TestEnumerate:
    def test_default_space_has_eleven_plans(self):
        space = plans.enumerate_plans()
        assert len(space) == 11
        assert len({p.to_string() for p in space}) == 11

    def test_bgd_alone_is_one_plan(self):
        space = plans.enumerate_plans(["bgd"])
        assert len(space) == 1
        assert space[0].sampling_strategy is None
        assert space[0].transform_mode == plans.EAGER

    def test_sgd_contributes_five_without_lazy_bernoulli(self):
        space = plans.enumerate_plans(["sgd"])
        assert len(space) == 5
        for p in space:
            assert not (p.transform_mode == plans.LAZY
                        and isinstance(p.sampling_strategy, sampling.Bernoulli))

    def test_order_is_deterministic(self):
        assert [p.to_string() for p in plans.enumerate_plans()] == \
               [p.to_string() for p in plans.enumerate_plans()]

    def test_unknown_algorithm_rejected(self):
        with pytest.raises(PlanError):
            plans.enumerate_plans(["adam"])


class TestPlanInvariants:
    def test_bgd_rejects_sampler(self):
        with pytest.raises(PlanError):
            plans.GDPlan(plans.BatchGD(), plans.EAGER, sampling.Bernoulli())

    def test_bgd_rejects_lazy(self):
        with pytest.raises(PlanError):
            plans.GDPlan(plans.BatchGD(), plans.LAZY)

    def test_lazy_bernoulli_rejected(self):
        with pytest.raises(PlanError, match="bernoulli"):
            plans.GDPlan(plans.StochasticGD(), plans.LAZY, sampling.Bernoulli())

    def test_sampled_algorithms_need_a_sampler(self):
        with pytest.raises(PlanError):
            plans.GDPlan(plans.StochasticGD(), plans.EAGER, None)

    def test_plan_string_round_trip(self):
        for plan in plans.enumerate_plans():
            assert plans.plan_from_string(plan.to_string()) == plan

    def test_canonical_string_form(self):
        plan = plans.GDPlan(plans.StochasticGD(), plans.LAZY,
                            sampling.ShuffledPartition())
        assert plan.to_string() == "sgd/lazy/shuffled-partition"


class TestAssemble:
    def test_lazy_moves_transform_inside_the_loop(self):
        plan = plans.GDPlan(plans.StochasticGD(), plans.LAZY,
                            sampling.ShuffledPartition())
        pipe = plans.assemble(plan, GRAD, plans.HyperParams())
        assert pipe.loop_operators.index("transform") == \
               pipe.loop_operators.index("sample") + 1
        assert "transform" not in pipe.prep_operators

    def test_bgd_has_no_sample_stage(self):
        pipe = plans.assemble(plans.GDPlan(plans.BatchGD()), GRAD,
                              plans.HyperParams())
        assert "sample" not in pipe.loop_operators
        assert pipe.prep_operators == ("transform", "stage")

    def test_mgd_bernoulli_fraction_is_batch_over_n(self):
        strategy = sampling.Bernoulli()
        assert sampling.resolve_bernoulli_fraction(strategy, 1000, 50_000) \
               == 1000 / 50_000


class TestSvrgStep:
    def ctx(self, m=5, d=2, beta=1.0):
        ctx = ops.Context(num_features=d, step_beta=beta, gradient=LINREG)
        ctx["weights"] = np.zeros(d)
        ctx["weightsBar"] = np.zeros(d)
        ctx["mu"] = np.zeros(d)
        ctx["m"] = m
        ctx["iter"] = 0
        return ctx

    def test_full_gradient_iterations(self):
        # m=5: t in {1, 6, 11} refresh the anchor
        m = 5
        assert [t for t in range(1, 12) if t % m == 1] == [1, 6, 11]
        ctx = self.ctx(m=m)
        X = np.array([[1.0, 0.0], [0.0, 1.0]])
        y = np.array([1.0, -1.0])
        with pytest.raises(PlanError, match="dataset access"):
            plans.svrg_step(1, None, ctx, full_batch=None)
        plans.svrg_step(1, None, ctx, full_batch=(X, y))
        assert "mu" in ctx and ctx["iter"] == 1

    def test_anchor_equal_to_weights_cancels_correction(self):
        # with anchor == weights the stochastic step is exactly -alpha * mu
        ctx = self.ctx(m=5)
        ctx["weights"] = np.array([0.5, -0.5])
        ctx["weightsBar"] = ctx["weights"].copy()
        ctx["mu"] = np.array([0.2, 0.1])
        ctx["iter"] = 1
        X = np.array([[1.0, 2.0]])
        y = np.array([3.0])
        new = plans.svrg_step(2, (X, y), ctx)
        alpha = 1.0 / np.sqrt(2)
        assert np.allclose(new, np.array([0.5, -0.5]) - alpha * np.array([0.2, 0.1]),
                           atol=1e-15)

    def test_svrg_and_bgd_agree_on_quadratic(self):
        # oracle: the closed-form least-squares minimizer on a 1-d quadratic
        import descent_planner as dp
        from descent_planner import dataset as ds
        from descent_planner import executor

        rng = np.random.default_rng(12)
        X = rng.uniform(0.5, 1.5, size=(40, 1))
        y = 2.0 * X[:, 0]
        lines = ds.render_lines(X, y, ds.DENSE_CSV)
        data = ds.build_dataset(lines, ds.DENSE_CSV, 1 << 20)
        minimizer = float((X[:, 0] @ y) / (X[:, 0] @ X[:, 0]))

        hyper = plans.HyperParams(tolerance=1e-7, max_iter=4000)
        bgd = executor.execute(
            plans.assemble(plans.GDPlan(plans.BatchGD()), LINREG, hyper),
            data, seed=5)
        svrg = executor.execute(
            plans.assemble(plans.GDPlan(plans.SVRG(10), plans.EAGER,
                                        sampling.RandomPartition()),
                           LINREG, hyper),
            data, seed=5)
        assert abs(bgd.weights[0] - minimizer) < 1e-3
        assert abs(svrg.weights[0] - minimizer) < 1e-3
        assert abs(bgd.weights[0] - svrg.weights[0]) < 1e-3

    def test_lazy_svrg_rejected(self):
        with pytest.raises(PlanError, match="eager"):
            plans.GDPlan(plans.SVRG(5), plans.LAZY, sampling.RandomPartition())


class TestLineSearch:
    def quad_ctx(self, w0=2.0, beta=1.0):
        # f(w) = w^2 realized as squared loss on (x=1, y=0)
        ctx = ops.Context(num_features=1, step_beta=beta, gradient=LINREG)
        ctx["weights"] = np.array([w0])
        ctx["iter"] = 0
        return ctx

    def test_armijo_hand_trace(self):
        # hand evaluation: f(2)=4, grad=4; alpha=1 gives diff 0 < 1e-4*1*16,
        # alpha=0.5 gives diff 4 - 0 = 4 >= 1e-4*0.5*16, so 0.5 is accepted
        ctx = self.quad_ctx()
        X = np.array([[1.0]])
        y = np.array([0.0])
        new, info = plans.linesearch_step(ctx, X, y, plans.LineSearchGD())
        assert info.shrinks == 1
        assert info.accepted_step == 0.5
        assert np.array_equal(new, [0.0])

    def test_zero_gradient_leaves_weights_alone(self):
        ctx = self.quad_ctx(w0=0.0)
        X = np.array([[1.0]])
        y = np.array([0.0])
        new, info = plans.linesearch_step(ctx, X, y, plans.LineSearchGD())
        assert np.array_equal(new, [0.0])
        assert info.shrinks == 0

    def test_faithful_mode_shrinks_while_drop_exceeds_step_times_trial(self):
        # published-listing semantics: diff >= step * trial shrinks the step.
        # Hand trace on f(w) = w^2/2 (units (1,0) and (0,0)) from w=2, step=1:
        #   step=1,    trial=1: diff = 2      >= 1    -> shrink to 0.5
        #   step=0.5,  trial=2: diff = 1.5    >= 1    -> shrink to 0.25
        #   step=0.25, trial=3: diff = 0.875  >= 0.75 -> shrink to 0.125
        #   step=0.125,trial=4: diff = 0.46875 < 0.5  -> accept
        ctx = self.quad_ctx()
        ctx["step"] = 1.0
        ctx["step_iteration"] = 1
        X = np.array([[1.0], [0.0]])
        y = np.array([0.0, 0.0])
        new, info = plans.linesearch_step(ctx, X, y,
                                          plans.LineSearchGD(faithful=True))
        assert info.shrinks == 3
        assert info.accepted_step == 0.125
        assert ctx["step"] == 0.125
        assert ctx["step_iteration"] == 4
        assert np.array_equal(new, [1.75])

    def test_stall_raises(self):
        grad = ops.GradientFunction(
            "adversarial",
            lambda w, u: np.ones_like(w),
            lambda w, u: 0.0,
            lambda w, X, y: np.ones_like(X),
            lambda w, X, y: np.full(len(y), 1e9),  # objective never drops
        )
        ctx = ops.Context(num_features=1, step_beta=1.0, gradient=grad)
        ctx["weights"] = np.array([1.0])
        ctx["iter"] = 0
        with pytest.raises(LineSearchStalledError):
            plans.linesearch_step(ctx, np.array([[1.0]]), np.array([0.0]),
                                  plans.LineSearchGD())

    def test_objective_never_increases_over_a_run(self):
        import descent_planner as dp
        from descent_planner import dataset as ds
        from descent_planner import executor

        synth = ds.synthesize("linreg", 60, 3, 0.2, seed=8)
        parser = executor.RecordParser(ds.DENSE_CSV, 3)
        data = executor.transform_all(synth.dataset, parser)
        ctx = ops.Context(num_features=3, step_beta=1.0, gradient=LINREG)
        ctx["weights"] = np.zeros(3)
        ctx["iter"] = 0
        values = [ops.batch_objective(ctx["weights"], data.X, data.y, LINREG)]
        for _ in range(25):
            plans.linesearch_step(ctx, data.X, data.y, plans.LineSearchGD())
            values.append(ops.batch_objective(ctx["weights"], data.X, data.y,
                                              LINREG))
        assert all(b <= a + 1e-12 for a, b in zip(values, values[1:]))


class TestHyperParams:
    def test_defaults(self):
        hyper = plans.HyperParams()
        assert hyper.step_beta == 1.0
        assert hyper.tolerance == 1e-3
        assert hyper.max_iter == 1000

    def test_validation(self):
        with pytest.raises(ValueError):
            plans.HyperParams(step_beta=0.0)
        with pytest.raises(ValueError):
            plans.HyperParams(tolerance=-1.0)
        with pytest.raises(ValueError):
            plans.HyperParams(max_iter=0)
