"""Command-line surface.

    descent-planner run "RUN classification ON data.txt;" --seed 7 --report out.json
    descent-planner explain query.dsl --max-iter 1000 --no-epsilon
    descent-planner predict test.txt model.txt
    descent-planner generate --task svm --n 1000 --d 10 --out dir/

Exit codes: 0 success, 1 parse or input error, 2 constraint violation,
3 divergence.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import costmodel, dataset as ds, estimator, executor, operators, plans
from . import optimizer, querylang
from .errors import DescentPlannerError, DivergenceError

REPORT_SCHEMA_VERSION = 1

EXIT_OK = 0
EXIT_PARSE = 1
EXIT_CONSTRAINT = 2
EXIT_DIVERGED = 3


# --- model files --------------------------------------------------------------


def write_model(path, task, gradient_name, weights, plan_string, iterations,
                final_delta):
    lines = [
        f"task {task}",
        f"gradient {gradient_name}",
        f"features {len(weights)}",
        f"plan {plan_string}",
        f"iterations {iterations}",
        f"final_delta {format(final_delta, '.17g') if final_delta is not None else 'none'}",
        "weights",
    ]
    # 17 significant digits: lossless float round-trip
    lines += [format(float(w), ".17g") for w in weights]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_model(path):
    header = {}
    weights = []
    with open(path) as fh:
        in_weights = False
        for raw in fh:
            line = raw.strip()
            if not line:
                continue
            if in_weights:
                weights.append(float(line))
            elif line == "weights":
                in_weights = True
            else:
                key, _, value = line.partition(" ")
                header[key] = value
    if "features" not in header or not in_weights:
        raise DescentPlannerError(f"{path} is not a model file")
    d = int(header["features"])
    if len(weights) != d:
        raise DescentPlannerError(
            f"{path}: header says {d} weights, found {len(weights)}")
    header["weights"] = np.asarray(weights)
    return header


# --- shared plumbing -------------------------------------------------------------


def _read_query(arg: str) -> str:
    if os.path.exists(arg):
        with open(arg) as fh:
            return fh.read()
    return arg


def _speculation_config(args) -> estimator.SpeculationConfig:
    return estimator.SpeculationConfig(
        tolerance=args.speculation_tolerance,
        budget_seconds=args.speculation_budget,
        sample_size=args.speculation_sample,
    )


def _apply_flag_overrides(query, args):
    having = query.having
    if getattr(args, "max_iter", None) is not None:
        having = querylang.HavingClause(having.time_seconds, having.epsilon,
                                        args.max_iter)
    if getattr(args, "epsilon", None) is not None:
        having = querylang.HavingClause(having.time_seconds, args.epsilon,
                                        having.max_iter)
    if getattr(args, "no_epsilon", False):
        having = querylang.HavingClause(having.time_seconds, None,
                                        having.max_iter)
    using = query.using
    if getattr(args, "sampler", None) is not None:
        using = querylang.UsingClause(using.algorithm, using.algorithm_arg,
                                      using.convergence, using.step,
                                      args.sampler)
    return querylang.RunQuery(query.task, query.refs, having, using,
                              query.binding)


def _candidate_plans(normalized):
    pinned_alg = normalized.pinned_algorithm
    pinned_sampler = normalized.pinned_sampler
    if pinned_alg is not None and pinned_alg.name not in ("bgd", "mgd", "sgd"):
        strategy = pinned_sampler
        mode = plans.EAGER
        return [plans.GDPlan(pinned_alg, mode, strategy)]
    if pinned_alg is not None:
        batch = (pinned_alg.batch_size
                 if isinstance(pinned_alg, plans.MiniBatchGD)
                 else plans.DEFAULT_MGD_BATCH)
        candidates = plans.enumerate_plans([pinned_alg.name], mgd_batch=batch)
    else:
        candidates = plans.enumerate_plans()
    if pinned_sampler is not None:
        candidates = [p for p in candidates
                      if p.sampling_strategy is not None
                      and p.sampling_strategy.name == pinned_sampler.name]
        if not candidates:
            raise querylang.ValidationError(
                "pinned sampler is incompatible with the pinned algorithm")
    return candidates


def _decide(normalized, data, args, seed):
    params = costmodel.load_params(args.cost_params) if args.cost_params else None
    candidates = _candidate_plans(normalized)
    gradient = operators.get_gradient(normalized.gradient_name)
    decision = optimizer.choose(
        data, gradient, normalized.hyper,
        cfg=_speculation_config(args),
        constraints=normalized.constraints,
        seed=seed, params=params,
        candidate_plans=candidates, columns=normalized.columns,
        skip_speculation=normalized.skip_speculation,
    )
    return decision, gradient


def _dump_report(path, payload):
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _decision_text_table(decision):
    rows = sorted(decision.table, key=lambda r: r.estimated_total_seconds)
    header = f"{'plan':<32}{'est. iters':>10}{'cost/iter':>14}{'est. total':>14}  feasible"
    out = [header, "-" * len(header)]
    for row in rows:
        out.append(
            f"{row.plan_string:<32}{row.estimated_iterations:>10}"
            f"{row.cost_per_iteration:>14.3e}{row.estimated_total_seconds:>14.3e}"
            f"  {'yes' if row.feasible else 'no'}")
    return "\n".join(out)


# --- subcommands -----------------------------------------------------------------


def cmd_run(args) -> int:
    statements = querylang.parse(_read_query(args.query))
    runs = [s for s in statements if isinstance(s, querylang.RunQuery)]
    persists = [s for s in statements if isinstance(s, querylang.PersistStmt)]
    predicts = [s for s in statements if isinstance(s, querylang.PredictStmt)]
    if not runs and not predicts:
        print("error: nothing to do (no RUN or PREDICT statement)",
              file=sys.stderr)
        return EXIT_PARSE

    report = {"schema_version": REPORT_SCHEMA_VERSION, "runs": []}
    models = {}
    for query in runs:
        query = _apply_flag_overrides(query, args)
        normalized = querylang.validate(query)
        data = ds.ingest(normalized.path, columns=normalized.columns,
                         partition_bytes=args.partition_bytes)
        decision, gradient = _decide(normalized, data, args, args.seed)
        if decision.constraint_check != "ok":
            print(f"constraint violated: {decision.constraint_check}; "
                  "revisit the HAVING clause", file=sys.stderr)
            return EXIT_CONSTRAINT

        pipeline = plans.assemble(decision.chosen, gradient, normalized.hyper,
                                  normalized.columns)
        result = executor.execute(pipeline, data, seed=args.seed,
                                  threads=args.threads)
        if result.stop_reason == "diverged":
            print(f"training diverged: {result.diagnostic}", file=sys.stderr)
            return EXIT_DIVERGED

        name = normalized.binding or f"run{len(models) + 1}"
        models[name] = (normalized, result, decision)
        print(f"{name}: plan={decision.chosen.to_string()} "
              f"iterations={result.iterations_run} "
              f"stop={result.stop_reason} "
              f"final_delta={result.final_delta:.6g}")
        report["runs"].append({
            "name": name,
            "query": querylang.pretty(query),
            "decision": decision.to_report(),
            "speculation_seconds": decision.speculation_seconds,
            "result": {
                "plan": result.plan_string,
                "iterations": result.iterations_run,
                "stop_reason": result.stop_reason,
                "final_delta": result.final_delta,
                "error_sequence": [[i, d] for i, d in result.error_sequence],
                "wall_times": result.wall_times,
                "total_seconds": result.total_seconds,
            },
        })
        if args.out:
            _persist(args.out, models[name])

    for stmt in persists:
        if stmt.query_name not in models:
            print(f"error: PERSIST references unknown query {stmt.query_name!r}",
                  file=sys.stderr)
            return EXIT_PARSE
        _persist(stmt.path, models[stmt.query_name])

    for stmt in predicts:
        code = _run_predict(stmt.test_path, stmt.model_path,
                            args.partition_bytes)
        if code != EXIT_OK:
            return code

    if args.report:
        _dump_report(args.report, report)
    return EXIT_OK


def _persist(path, bundle):
    normalized, result, decision = bundle
    write_model(path, normalized.prediction_task, normalized.gradient_name,
                result.weights, result.plan_string, result.iterations_run,
                result.final_delta)


def cmd_explain(args) -> int:
    statements = querylang.parse(_read_query(args.query))
    runs = [s for s in statements if isinstance(s, querylang.RunQuery)]
    if not runs:
        print("error: EXPLAIN needs a RUN statement", file=sys.stderr)
        return EXIT_PARSE
    report = {"schema_version": REPORT_SCHEMA_VERSION, "decisions": []}
    for query in runs:
        query = _apply_flag_overrides(query, args)
        normalized = querylang.validate(query)
        data = ds.ingest(normalized.path, columns=normalized.columns,
                         partition_bytes=args.partition_bytes)
        decision, _ = _decide(normalized, data, args, args.seed)
        print(_decision_text_table(decision))
        print(f"chosen: {decision.chosen.to_string()}  "
              f"constraint: {decision.constraint_check}  "
              f"speculation: {decision.speculation_seconds:.3f}s")
        report["decisions"].append(decision.to_report())
    if args.report:
        _dump_report(args.report, report)
    return EXIT_OK


def _run_predict(test_path, model_path, partition_bytes, out=None) -> int:
    header = read_model(model_path)
    weights = header["weights"]
    task = header.get("task", "classification")
    data = ds.ingest(test_path, partition_bytes=partition_bytes,
                     num_features=len(weights))
    parser = executor.RecordParser(data.format, data.stats.num_features)
    transformed = executor.transform_all(data, parser)
    if transformed.X.shape[1] != len(weights):
        print(f"error: dimension mismatch: test data has "
              f"{transformed.X.shape[1]} features, model has {len(weights)}",
              file=sys.stderr)
        return EXIT_PARSE
    outcome = executor.predict_batch(weights, transformed.X, transformed.y, task)
    print(f"mse {outcome.mse:.6g}")
    if outcome.accuracy is not None:
        print(f"accuracy {outcome.accuracy:.6g}")
    if out:
        with open(out, "w") as fh:
            for p in outcome.predictions:
                fh.write(format(float(p), ".17g") + "\n")
    return EXIT_OK


def cmd_predict(args) -> int:
    return _run_predict(args.test, args.model, args.partition_bytes,
                        out=args.out)


def cmd_generate(args) -> int:
    synth = ds.synthesize(args.task, args.n, args.d, args.noise, args.seed,
                          fmt=args.format, density=args.density)
    os.makedirs(args.out, exist_ok=True)
    rng = np.random.default_rng((args.seed, 0x5E1))
    n = synth.dataset.stats.num_units
    order = rng.permutation(n)
    cut = int(round(n * 0.8))
    texts = [r.text for r in synth.dataset.iter_records()]
    ext = "libsvm" if synth.dataset.format == ds.LIBSVM_SPARSE else "csv"
    train_path = os.path.join(args.out, f"train.{ext}")
    test_path = os.path.join(args.out, f"test.{ext}")
    with open(train_path, "wb") as fh:
        fh.write(b"\n".join(texts[i] for i in order[:cut]) + b"\n")
    with open(test_path, "wb") as fh:
        fh.write(b"\n".join(texts[i] for i in order[cut:]) + b"\n")
    truth = {
        "task": synth.task,
        "true_weights": [float(w) for w in synth.true_weights],
        "noise": args.noise,
        "seed": args.seed,
        "train_records": int(cut),
        "test_records": int(n - cut),
    }
    with open(os.path.join(args.out, "truth.json"), "w") as fh:
        json.dump(truth, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"wrote {train_path} ({cut} records), {test_path} ({n - cut} records)")
    return EXIT_OK


# --- argument parsing ---------------------------------------------------------------


def _add_common(p):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--cost-params", help="cost-parameter file (key=value)")
    p.add_argument("--speculation-budget", type=float, default=60.0,
                   help="speculation time budget in seconds")
    p.add_argument("--speculation-tolerance", type=float, default=0.05)
    p.add_argument("--speculation-sample", type=int, default=1000)
    p.add_argument("--report", help="write a JSON report here")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--partition-bytes", type=int,
                   default=ds.DEFAULT_PARTITION_BYTES)
    p.add_argument("--max-iter", type=int, default=None,
                   help="override the query's max_iter")
    p.add_argument("--epsilon", type=float, default=None,
                   help="override the query's epsilon")
    p.add_argument("--no-epsilon", action="store_true",
                   help="drop the tolerance: run for max_iter iterations")
    p.add_argument("--sampler",
                   choices=["bernoulli", "random-partition",
                            "shuffled-partition"],
                   help="pin the sampling strategy (overrides USING sampler)")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="descent-planner",
        description="Cost-based plan selection and execution for "
                    "gradient-descent training.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="optimize and execute a query")
    p_run.add_argument("query", help="query text or a file containing it")
    p_run.add_argument("--out", help="write the trained model here")
    _add_common(p_run)
    p_run.set_defaults(func=cmd_run)

    p_explain = sub.add_parser("explain",
                               help="print the plan decision table only")
    p_explain.add_argument("query", help="query text or a file containing it")
    _add_common(p_explain)
    p_explain.set_defaults(func=cmd_explain)

    p_predict = sub.add_parser("predict", help="score a test set with a model")
    p_predict.add_argument("test", help="test dataset path")
    p_predict.add_argument("model", help="model file path")
    p_predict.add_argument("--out", help="write per-point predictions here")
    p_predict.add_argument("--partition-bytes", type=int,
                           default=ds.DEFAULT_PARTITION_BYTES)
    p_predict.set_defaults(func=cmd_predict)

    p_gen = sub.add_parser("generate", help="synthesize train/test datasets")
    p_gen.add_argument("--task", required=True,
                       choices=["svm", "classification", "logistic",
                                "linreg", "regression"])
    p_gen.add_argument("--n", type=int, required=True)
    p_gen.add_argument("--d", type=int, required=True)
    p_gen.add_argument("--noise", type=float, default=0.0)
    p_gen.add_argument("--seed", type=int, default=0)
    p_gen.add_argument("--out", required=True, help="output directory")
    p_gen.add_argument("--format", choices=[ds.DENSE_CSV, ds.LIBSVM_SPARSE],
                       default=None)
    p_gen.add_argument("--density", type=float, default=1.0)
    p_gen.set_defaults(func=cmd_generate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except querylang.ParseError as exc:
        print(f"parse error {exc}", file=sys.stderr)
        return EXIT_PARSE
    except querylang.ValidationError as exc:
        print(f"invalid query: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except DescentPlannerError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE


if __name__ == "__main__":
    sys.exit(main())
