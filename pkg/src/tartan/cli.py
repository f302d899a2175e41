"""Command-line entry points tying the modules into reproducible experiments.

Commands compose through files only: benchmarks are task directories,
mined pools and training logs are JSON-lines, parameters are checkpoint
files, indexes and runs use the formats in :mod:`tartan.search`.

Configuration comes from ``key = value`` lines in a config file (``#``
comments allowed); precedence is flags > config file > defaults.  All
randomness flows from one ``--seed`` via the documented splittable scheme
in :mod:`tartan.hashing`; each subcommand logs its derived seed.

Exit codes: 0 success, 1 usage error, 2 data/validation error, 3 numeric
failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import DataError, NumericError, TartanError
from .evaluation import (
    ExperimentConfig,
    ablate_instructions,
    evaluate_pooled,
    make_dense_system,
    metric_fn,
    write_report,
)
from .hashing import derive_seed
from .mining import MiningConfig, build_training_instances, read_pools, write_pools
from .schema import (
    NO_INSTRUCTION,
    Task,
    load_benchmark,
    load_task,
    read_corpus,
    read_instructions,
    read_qrels,
    read_queries,
    save_benchmark,
    save_task,
    validate_task,
)
from .search import (
    RankedHit,
    build_index,
    dense_retriever_factory,
    cross_reranker,
    load_index,
    read_run,
    rerank as rerank_hits,
    retrieval_run,
    save_index,
    write_run,
)
from .synth import SynthSpec, generate_benchmark
from .training import TrainConfig, distill_refresh, train, write_training_log

logger = logging.getLogger("tartan")


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors exit 1, not argparse's 2
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        sys.exit(1)


def read_config_file(path: str | Path) -> dict[str, str]:
    """Parse ``key = value`` lines; '#' starts a comment."""
    values: dict[str, str] = {}
    for line_no, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataError("bad_config", f"{path}:{line_no}: expected key = value")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


class Settings:
    """Flag > config-file > default resolution for one command invocation."""

    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.file: dict[str, str] = {}
        if getattr(args, "config", None):
            self.file = read_config_file(args.config)

    def get(self, key: str, default, cast=None):
        flag = getattr(self.args, key, None)
        if flag is not None:
            return flag
        if key in self.file:
            raw = self.file[key]
            caster = cast or type(default)
            if caster is bool:
                return raw.lower() in ("1", "true", "yes", "on")
            return caster(raw)
        return default


def _threads(settings: Settings) -> int:
    value = settings.get("threads", None, cast=int)
    if value is not None:
        return value
    env = os.environ.get("TARTAN_THREADS")
    return int(env) if env else 1


def _seed(settings: Settings, command: str) -> int:
    master = settings.get("seed", 0, cast=int)
    derived = derive_seed(master, command)
    logger.info("%s: master seed %d, derived seed %d", command, master, derived)
    return derived


def _train_config(settings: Settings, seed: int) -> TrainConfig:
    return TrainConfig(
        batch_size=settings.get("batch_size", 16, int),
        negatives_per_positive=settings.get("negatives", 5, int),
        hard_or_uf_fraction=settings.get("hard_fraction", 0.1, float),
        pos_neg_ratio_cross=settings.get("cross_ratio", 4, int),
        learning_rate=settings.get("lr", 1e-3, float),
        warmup_steps=settings.get("warmup", 100, int),
        max_steps=settings.get("steps", 500, int),
        seed=seed,
        temperature=settings.get("temperature", 0.05, float),
        uf_max_fraction=settings.get("uf_max_fraction", 0.2, float),
    )


def _mining_config(settings: Settings, seed: int) -> MiningConfig:
    return MiningConfig(
        retrieval_depth=settings.get("depth", 100, int),
        denoise_threshold=settings.get("denoise_threshold", 0.1, float),
        uf_top_k=settings.get("uf_top_k", 20, int),
        uf_max_fraction=settings.get("uf_max_fraction", 0.2, float),
        uf_pair_cap=settings.get("uf_pair_cap", 10_000, int),
        seed=seed,
    )


def _parse_uf_pairs(raw: str | None):
    if not raw:
        return None
    pairs = []
    for chunk in raw.split(","):
        if ":" not in chunk:
            raise DataError("bad_config", f"uf pair {chunk!r}, expected task:foreign")
        a, b = chunk.split(":", 1)
        pairs.append((a.strip(), b.strip()))
    return pairs


def _load_task_from(benchmark_dir: str, task_id: str) -> Task:
    return load_task(Path(benchmark_dir) / task_id)


# ---------------------------------------------------------------------------
# Subcommand implementations
# ---------------------------------------------------------------------------


def cmd_synth(settings: Settings) -> int:
    args = settings.args
    spec = SynthSpec(
        n_tasks=settings.get("tasks", 3, int),
        docs_per_task=settings.get("docs", 1000, int),
        queries_per_task=settings.get("queries", 200, int),
        vocab_size=settings.get("vocab", 600, int),
        intent_kinds=tuple(
            settings.get("kinds", "answer,duplicate_question,summary", str).split(",")
        ),
        overlap_fraction=settings.get("overlap", 0.8, float),
        seed=_seed(settings, "synth"),
    )
    tasks = generate_benchmark(spec)
    save_benchmark(tasks, args.out)
    print(f"wrote {len(tasks)} tasks to {args.out}")
    return 0


def cmd_ingest(settings: Settings) -> int:
    args = settings.args
    task = Task(
        id=args.task_id,
        corpus=read_corpus(args.corpus, args.task_id),
        queries=read_queries(args.queries, args.task_id),
        qrels=read_qrels(args.qrels),
        instructions=read_instructions(args.instructions),
    )
    report = validate_task(task)
    if report:
        for code, detail in report.issues:
            print(f"{code}\t{detail}", file=sys.stderr)
        raise DataError("invalid_task", f"{len(report.issues)} validation issues")
    save_task(task, args.out)
    print(f"ingested task {task.id}: {len(task.corpus)} docs, {len(task.queries)} queries")
    return 0


def cmd_mine(settings: Settings) -> int:
    args = settings.args
    tasks = load_benchmark(args.benchmark)
    config = _mining_config(settings, _seed(settings, "mine"))
    retriever_factory = None
    if args.dual:
        dual = load_checkpoint(args.dual, expect_kind="dual")
        retriever_factory = dense_retriever_factory(dual, threads=_threads(settings))
    reranker = None
    if args.reranker:
        cross = load_checkpoint(args.reranker, expect_kind="cross")
        reranker = cross_reranker(cross)
    instances = build_training_instances(
        tasks,
        config,
        retriever_factory=retriever_factory,
        reranker=reranker,
        include_unfollowing=not args.no_uf,
        uf_pairs=_parse_uf_pairs(args.uf_pairs),
    )
    write_pools(args.out, instances)
    n_hard = sum(len(i.hard_negatives) for i in instances)
    n_uf = sum(len(i.unfollowing_negatives) for i in instances)
    print(f"mined pools for {len(instances)} instances: {n_hard} hard, {n_uf} unfollowing")
    return 0


def _cmd_train(settings: Settings, kind: str) -> int:
    args = settings.args
    tasks = load_benchmark(args.benchmark)
    if args.pools:
        instances = read_pools(args.pools, tasks)
    else:
        instances = build_training_instances(
            tasks, _mining_config(settings, _seed(settings, "mine")), include_unfollowing=False
        )
    config = _train_config(settings, _seed(settings, f"train-{kind}"))
    init_params = load_checkpoint(args.resume, expect_kind=kind) if args.resume else None
    params, log = train(
        kind,
        config,
        instances,
        tasks,
        use_instructions=not args.no_instructions,
        init_params=init_params,
        dim=settings.get("dim", 48, int),
        num_buckets=settings.get("buckets", 1 << 15, int),
        hidden_dim=settings.get("hidden_dim", 48, int),
    )
    save_checkpoint(params, args.out)
    if args.log:
        write_training_log(args.log, log)
    last = log.entries[-1]["loss"] if log.entries else float("nan")
    print(
        f"trained {kind} for {config.max_steps} steps "
        f"(final loss {last:.4f}, {log.skipped_instances} instances skipped) -> {args.out}"
    )
    return 0


def cmd_distill(settings: Settings) -> int:
    args = settings.args
    tasks = load_benchmark(args.benchmark)
    instances = read_pools(args.pools, tasks)
    cross = load_checkpoint(args.cross, expect_kind="cross")
    refreshed, report = distill_refresh(
        cross,
        instances,
        tasks,
        threshold=settings.get("denoise_threshold", 0.1, float),
        promote_threshold=settings.get("promote_threshold", 0.9, float),
    )
    write_pools(args.out, refreshed)
    print(
        f"refreshed pools: {report.promoted} promoted, {report.demoted} demoted, "
        f"{len(report.flagged)} instances left unchanged"
    )
    return 0


def cmd_index(settings: Settings) -> int:
    args = settings.args
    task = _load_task_from(args.benchmark, args.task)
    dual = load_checkpoint(args.dual, expect_kind="dual")
    index = build_index(
        task.corpus, dual, threads=_threads(settings), include_title=args.include_titles
    )
    save_index(index, args.out)
    print(f"indexed {len(index)} docs from {task.id} -> {args.out}")
    return 0


def cmd_search(settings: Settings) -> int:
    args = settings.args
    task = _load_task_from(args.benchmark, args.task)
    dual = load_checkpoint(args.dual, expect_kind="dual")
    index = load_index(args.index) if args.index else None
    run = retrieval_run(
        dual,
        task,
        use_instruction=not args.no_instruction,
        first_stage_k=settings.get("first_stage_k", 100, int),
        k=settings.get("k", 10, int),
        index=index,
        threads=_threads(settings),
        include_title=args.include_titles,
    )
    write_run(args.out, run, tag=settings.get("tag", "tartan", str))
    print(f"searched {len(run)} queries -> {args.out}")
    return 0


def cmd_rerank(settings: Settings) -> int:
    args = settings.args
    task = _load_task_from(args.benchmark, args.task)
    cross = load_checkpoint(args.cross, expect_kind="cross")
    ranked = read_run(args.run)
    corpus = task.doc_map()
    queries = task.query_map()
    instruction = NO_INSTRUCTION if args.no_instruction else task.instructions[0]
    out = {}
    for query_id, doc_ids in ranked.items():
        if query_id not in queries:
            raise DataError("unknown_query", query_id)
        hits = [
            RankedHit(doc_id=d, score=0.0, rank=i + 1) for i, d in enumerate(doc_ids)
        ]
        out[query_id] = rerank_hits(
            cross,
            instruction,
            queries[query_id],
            hits,
            corpus,
            include_title=args.include_titles,
        )[: settings.get("k", len(doc_ids), int)]
    write_run(args.out, out, tag=settings.get("tag", "tartan-rerank", str))
    print(f"reranked {len(out)} queries -> {args.out}")
    return 0


def cmd_eval(settings: Settings) -> int:
    args = settings.args
    metric = settings.get("metric", "ndcg", str)
    k = settings.get("k", 10, int)
    if args.run:  # score an existing run file against qrels (closed setup)
        if not args.qrels:
            raise DataError("bad_config", "eval --run requires --qrels")
        run = read_run(args.run)
        value = metric_fn(metric)(run, read_qrels(args.qrels), k)
        print(f"{metric}@{k}\t{value:.6f}")
        return 0
    if not args.benchmark or not args.dual:
        raise DataError("bad_config", "eval needs --benchmark and --dual (or --run)")
    tasks = load_benchmark(args.benchmark)
    dual = load_checkpoint(args.dual, expect_kind="dual")
    cross = load_checkpoint(args.cross, expect_kind="cross") if args.cross else None
    system = make_dense_system(
        dual,
        cross=cross,
        use_instruction=not args.no_instruction,
        first_stage_k=settings.get("first_stage_k", 100, int),
        k=k,
        threads=_threads(settings),
        include_title=args.include_titles,
    )
    report = evaluate_pooled(system, tasks, metric=metric, k=k)
    if args.out_json or args.out_tsv:
        write_report(report, args.out_json or "report.json", args.out_tsv)
    print(report.to_tsv(), end="")
    return 0


def cmd_ablate(settings: Settings) -> int:
    args = settings.args
    tasks = load_benchmark(args.benchmark)
    seed = _seed(settings, "ablate")
    config = ExperimentConfig(
        train=_train_config(settings, seed),
        mining=_mining_config(settings, seed),
        metric=settings.get("metric", "success", str),
        k=settings.get("k", 5, int),
        first_stage_k=settings.get("first_stage_k", 100, int),
        dim=settings.get("dim", 48, int),
        num_buckets=settings.get("buckets", 1 << 15, int),
        threads=_threads(settings),
    )
    grid = ablate_instructions(config, tasks)
    import json as _json

    payload = {
        cell: {
            "closed_avg": report.closed_avg,
            "pooled_avg": report.pooled_avg,
            "delta": report.delta,
        }
        for cell, report in grid.items()
    }
    text = _json.dumps(payload, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    print(text)
    return 0


# ---------------------------------------------------------------------------
# Argument wiring
# ---------------------------------------------------------------------------


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--seed", type=int, help="master seed (default 0)")
    p.add_argument("--threads", type=int, help="worker threads (env TARTAN_THREADS)")
    p.add_argument("--verbose", action="store_true", default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tartan", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic multi-task benchmark")
    _add_common(p)
    p.add_argument("--out", required=True)
    for flag, typ in (
        ("--tasks", int), ("--docs", int), ("--queries", int),
        ("--vocab", int), ("--overlap", float),
    ):
        p.add_argument(flag, type=typ)
    p.add_argument("--kinds", help="comma list of intent kinds")
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("ingest", help="validate and import external task files")
    _add_common(p)
    for flag in ("--corpus", "--queries", "--qrels", "--instructions", "--task-id", "--out"):
        p.add_argument(flag, required=True)
    p.set_defaults(fn=cmd_ingest)

    p = sub.add_parser("mine", help="mine negative pools into a pools file")
    _add_common(p)
    p.add_argument("--benchmark", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--dual", help="dual checkpoint for dense retrieval (default BM25)")
    p.add_argument("--reranker", help="cross checkpoint enabling hard-negative mining")
    p.add_argument("--uf-pairs", help="task:foreign[,task:foreign...] (default all pairs)")
    p.add_argument("--no-uf", action="store_true")
    for flag, typ in (
        ("--depth", int), ("--uf-top-k", int), ("--uf-pair-cap", int),
        ("--denoise-threshold", float), ("--uf-max-fraction", float),
    ):
        p.add_argument(flag, type=typ)
    p.set_defaults(fn=cmd_mine)

    for kind in ("dual", "cross"):
        p = sub.add_parser(f"train-{kind}", help=f"train the {kind} encoder")
        _add_common(p)
        p.add_argument("--benchmark", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--pools", help="mined pools file (default: random negatives only)")
        p.add_argument("--resume", help="checkpoint to continue from")
        p.add_argument("--log", help="JSONL training-log path")
        p.add_argument("--no-instructions", action="store_true")
        for flag, typ in (
            ("--steps", int), ("--batch-size", int), ("--lr", float),
            ("--warmup", int), ("--negatives", int), ("--hard-fraction", float),
            ("--cross-ratio", int), ("--dim", int), ("--buckets", int),
            ("--hidden-dim", int), ("--temperature", float),
        ):
            p.add_argument(flag, type=typ)
        p.set_defaults(fn=lambda s, _kind=kind: _cmd_train(s, _kind))

    p = sub.add_parser("distill", help="refresh pools with a trained cross encoder")
    _add_common(p)
    p.add_argument("--benchmark", required=True)
    p.add_argument("--pools", required=True)
    p.add_argument("--cross", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--denoise-threshold", type=float)
    p.add_argument("--promote-threshold", type=float)
    p.set_defaults(fn=cmd_distill)

    p = sub.add_parser("index", help="embed a task corpus into an index file")
    _add_common(p)
    p.add_argument("--benchmark", required=True)
    p.add_argument("--task", required=True)
    p.add_argument("--dual", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--include-titles", action="store_true")
    p.set_defaults(fn=cmd_index)

    p = sub.add_parser("search", help="first-stage retrieval into a run file")
    _add_common(p)
    p.add_argument("--benchmark", required=True)
    p.add_argument("--task", required=True)
    p.add_argument("--dual", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--index", help="prebuilt index file (default: embed now)")
    p.add_argument("--no-instruction", action="store_true")
    p.add_argument("--include-titles", action="store_true")
    p.add_argument("--k", type=int)
    p.add_argument("--first-stage-k", type=int)
    p.add_argument("--tag")
    p.set_defaults(fn=cmd_search)

    p = sub.add_parser("rerank", help="rerank an existing run with the cross encoder")
    _add_common(p)
    p.add_argument("--benchmark", required=True)
    p.add_argument("--task", required=True)
    p.add_argument("--cross", required=True)
    p.add_argument("--run", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--no-instruction", action="store_true")
    p.add_argument("--include-titles", action="store_true")
    p.add_argument("--k", type=int)
    p.add_argument("--tag")
    p.set_defaults(fn=cmd_rerank)

    p = sub.add_parser("eval", help="closed+pooled report, or score one run file")
    _add_common(p)
    p.add_argument("--benchmark")
    p.add_argument("--dual")
    p.add_argument("--cross")
    p.add_argument("--run", help="score this run file instead of running retrieval")
    p.add_argument("--qrels", help="qrels for --run mode")
    p.add_argument("--metric", choices=("ndcg", "success", "recall"))
    p.add_argument("--k", type=int)
    p.add_argument("--first-stage-k", type=int)
    p.add_argument("--no-instruction", action="store_true")
    p.add_argument("--include-titles", action="store_true")
    p.add_argument("--out-json")
    p.add_argument("--out-tsv")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", help="2x2 train/test instruction ablation grid")
    _add_common(p)
    p.add_argument("--benchmark", required=True)
    p.add_argument("--out")
    p.add_argument("--metric", choices=("ndcg", "success", "recall"))
    for flag, typ in (
        ("--k", int), ("--first-stage-k", int), ("--steps", int),
        ("--batch-size", int), ("--lr", float), ("--warmup", int),
        ("--negatives", int), ("--hard-fraction", float),
        ("--dim", int), ("--buckets", int), ("--temperature", float),
    ):
        p.add_argument(flag, type=typ)
    p.set_defaults(fn=cmd_ablate)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    settings = Settings(args)
    try:
        return args.fn(settings)
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 3
    except (TartanError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
