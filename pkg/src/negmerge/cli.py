"""Command-line surface.

Subcommands: diff, merge, apply, stats, experiment.  Exit codes are stable:
0 success, 1 I/O or container error, 2 schema mismatch, 3 invalid
configuration, 4 experiment-stage failure.  All machine output is strict
JSON/CSV with full float precision.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

from . import analysis, consensus_stream, merging, task_vector, tensor_store
from .errors import (
    ContainerFormatError,
    ExperimentStageError,
    GroupingError,
    InvalidSpec,
    NoFeasibleLambda,
    NonFiniteValue,
    SchemaMismatch,
)
from .harness import ExperimentConfig, run_experiment
from .kernels import thread_count

EXIT_OK = 0
EXIT_IO = 1
EXIT_SCHEMA = 2
EXIT_CONFIG = 3
EXIT_EXPERIMENT = 4


class _ConfigExit(Exception):
    """Raised on argparse errors so they map to the config exit code."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _ConfigExit(message)


def _fail(code: int, message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return code


def build_parser() -> _Parser:
    p = _Parser(prog="negmerge", description=__doc__)
    p.add_argument("--output-format", choices=("json", "csv"), default="json")
    p.add_argument("--threads", type=int, default=None,
                   help="worker threads for per-tensor work (default: NEGMERGE_THREADS or CPU count)")
    p.add_argument("--seed", type=int, default=0)
    sub = p.add_subparsers(dest="command", required=True)

    d = sub.add_parser("diff", help="write fine-tuned minus base as a task vector")
    d.add_argument("--base", required=True)
    d.add_argument("--finetuned", required=True)
    d.add_argument("--out", required=True)

    m = sub.add_parser("merge", help="merge a pool of task vectors")
    m.add_argument("--pool", nargs="+", required=True)
    m.add_argument("--method", default="negmerge", choices=merging.METHODS)
    m.add_argument("--reduce", default="avg", choices=merging.REDUCE_OPS)
    m.add_argument("--q", type=float, default=1.0)
    m.add_argument("--ties-k", type=float, default=0.20)
    m.add_argument("--streaming", action="store_true",
                   help="fold the pool one file at a time (negmerge, q=1 only)")
    m.add_argument("--sparse-out", action="store_true")
    m.add_argument("--timing", action="store_true", help="print merge wall-clock seconds as JSON")
    m.add_argument("--out", required=True)

    a = sub.add_parser("apply", help="apply a (possibly sparse) task vector to a base model")
    a.add_argument("--base", required=True)
    a.add_argument("--tau", required=True)
    a.add_argument("--lambda", dest="lam", type=float, default=1.0)
    a.add_argument("--negate", action="store_true")
    a.add_argument("--out", required=True)

    s = sub.add_parser("stats", help="sparsity report for a task vector")
    s.add_argument("--tau", required=True)
    s.add_argument("--pool", nargs="*", default=[])
    s.add_argument("--group-mode", default=None,
                   choices=("by_depth_thirds", "by_name_regex", "custom"))
    s.add_argument("--group-regex", default=None,
                   help="pattern with one capture group naming the group (by_name_regex)")
    s.add_argument("--group", action="append", default=[], metavar="LABEL=REGEX",
                   help="custom group definition, repeatable")

    e = sub.add_parser("experiment", help="run the unlearning experiment pipeline")
    e.add_argument("--config", required=True)
    e.add_argument("--out", required=True, help="output directory")
    return p


def cmd_diff(args) -> int:
    base = tensor_store.load(args.base)
    ft = tensor_store.load(args.finetuned)
    tau = task_vector.diff(ft, base)
    tensor_store.save(tau.delta, args.out)
    return EXIT_OK


def cmd_merge(args) -> int:
    spec = merging.MergeSpec(method=args.method, reduce=args.reduce, q=args.q,
                             ties_trim_fraction=args.ties_k)
    if args.streaming and (spec.method != "negmerge" or spec.q != 1.0):
        raise InvalidSpec("--streaming supports only negmerge with q=1.0")
    if args.streaming and spec.reduce not in ("avg", "min_mag", "max_mag"):
        raise InvalidSpec("--streaming supports only avg/min_mag/max_mag reduces")

    started = time.perf_counter()
    if args.streaming:
        state = None
        for path in args.pool:
            tau = task_vector.load_task_vector(path)
            if state is None:
                state = consensus_stream.init(tau.schema)
            consensus_stream.update(state, tau)
        merged = consensus_stream.finalize(state, spec.reduce)
    else:
        pool = [task_vector.load_task_vector(p) for p in args.pool]
        merged = merging.merge(pool, spec, threads=args.threads)
    elapsed = time.perf_counter() - started

    if args.sparse_out:
        task_vector.save_sparse(task_vector.sparsify(merged), args.out)
    else:
        tensor_store.save(merged.delta, args.out)
    if args.timing:
        print(json.dumps({"merge_seconds": elapsed, "method": spec.method,
                          "n": len(args.pool), "streaming": bool(args.streaming)}))
    return EXIT_OK


def cmd_apply(args) -> int:
    base = tensor_store.load(args.base)
    cfg = task_vector.NegationConfig(lam=args.lam, direction="negate" if args.negate else "add")
    raw = tensor_store.load(args.tau)
    if task_vector.is_sparse_file(raw):
        result = task_vector.apply_sparse(base, task_vector.load_sparse(args.tau), cfg)
    else:
        result = task_vector.apply(base, task_vector.TaskVector(raw), cfg)
    tensor_store.save(result, args.out)
    return EXIT_OK


def _grouping_from_args(args) -> analysis.GroupingRule | None:
    if args.group_mode is None:
        return None
    if args.group_mode == "custom":
        patterns = []
        for item in args.group:
            label, _, regex = item.partition("=")
            if not label or not regex:
                raise InvalidSpec(f"--group expects LABEL=REGEX, got {item!r}")
            patterns.append((label, regex))
        if not patterns:
            raise InvalidSpec("custom grouping needs at least one --group")
        return analysis.GroupingRule(mode="custom", patterns=tuple(patterns))
    if args.group_mode == "by_name_regex":
        if not args.group_regex:
            raise InvalidSpec("by_name_regex needs --group-regex")
        return analysis.GroupingRule(mode="by_name_regex", regex=args.group_regex)
    return analysis.GroupingRule(mode="by_depth_thirds")


def cmd_stats(args) -> int:
    tau = task_vector.load_task_vector(args.tau)
    pool = [task_vector.load_task_vector(p) for p in args.pool] or None
    try:
        report = analysis.sparsity_report(tau, _grouping_from_args(args), pool)
    except GroupingError as e:
        raise InvalidSpec(str(e)) from e
    print(report.to_csv() if args.output_format == "csv" else report.to_json(), end="")
    if args.output_format == "json":
        print()
    return EXIT_OK


def cmd_experiment(args) -> int:
    try:
        text = Path(args.config).read_text()
    except OSError as e:
        return _fail(EXIT_IO, str(e))
    try:
        config = ExperimentConfig.from_json(text)
    except json.JSONDecodeError as e:
        return _fail(EXIT_CONFIG, f"config JSON parse error at line {e.lineno} column {e.colno}: {e.msg}")
    except (TypeError, ValueError) as e:
        return _fail(EXIT_CONFIG, f"invalid experiment config: {e}")
    try:
        report = run_experiment(config)
    except ExperimentStageError as e:
        return _fail(EXIT_EXPERIMENT, f"stage {e.stage!r}: {e.cause}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for seed_result in report.per_seed:
        (out / f"seed_{seed_result.seed}.json").write_text(
            json.dumps(seed_result.to_dict()) + "\n")
    (out / "aggregate.csv").write_text(report.aggregate_csv())
    (out / "report.json").write_text(report.to_json() + "\n")
    print(report.aggregate_csv(), end="")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _ConfigExit as e:
        return _fail(EXIT_CONFIG, str(e))
    if args.threads is not None and args.threads < 1:
        return _fail(EXIT_CONFIG, "--threads must be >= 1")
    args.threads = thread_count(args.threads)

    handlers = {"diff": cmd_diff, "merge": cmd_merge, "apply": cmd_apply,
                "stats": cmd_stats, "experiment": cmd_experiment}
    try:
        return handlers[args.command](args)
    except SchemaMismatch as e:
        return _fail(EXIT_SCHEMA, str(e))
    except (InvalidSpec, NoFeasibleLambda, GroupingError) as e:
        return _fail(EXIT_CONFIG, str(e))
    except (ContainerFormatError, NonFiniteValue, OSError) as e:
        return _fail(EXIT_IO, str(e))
    except ExperimentStageError as e:
        return _fail(EXIT_EXPERIMENT, f"stage {e.stage!r}: {e.cause}")


if __name__ == "__main__":
    sys.exit(main())
