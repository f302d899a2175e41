"""Ranking metrics, the closed-vs-pooled evaluation protocol and the
instruction-ablation grid.

The closed score evaluates each task against its own corpus; the pooled
score evaluates the same queries against the union of every task's corpus
(doc ids namespaced ``corpus::doc`` to prevent collisions).  The robustness
delta is mean(closed) - mean(pooled): smaller means the system is
distracted less by documents from other tasks' corpora.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

from .encoder import CrossParams, DualParams
from .errors import DataError
from .mining import MiningConfig, build_training_instances
from .schema import Document, Qrels, Query, Task
from .search import build_index, retrieval_run
from .training import TrainConfig, train

logger = logging.getLogger(__name__)

Run = Mapping[str, Sequence[str]]  # query_id -> ranked doc ids
System = Callable[[Task], Run]

METRICS = ("ndcg", "success", "recall")


def _evaluated_queries(run: Run, qrels: Qrels) -> list[str]:
    """Queries scored into the mean: present in the run, judged, and with at
    least one positive grade (standard trec-eval behavior)."""
    judged_queries = {qid for (qid, _) in qrels.entries}
    included = []
    skipped = 0
    for query_id in sorted(run):
        if query_id not in judged_queries:
            skipped += 1
            continue
        if any(g > 0 for g in qrels.judged_grades(query_id)):
            included.append(query_id)
    if skipped:
        logger.warning("evaluation: %d run queries absent from qrels, skipped", skipped)
    return included


def ndcg_at_k(run: Run, qrels: Qrels, k: int) -> float:
    """NDCG@k with gain 2^rel - 1 and log2(rank+1) discount.

    Unjudged documents count as grade 0; the ideal ranking sorts the
    query's judged grades descending.
    """
    if k < 1:
        raise DataError("bad_count", "k must be >= 1")
    included = _evaluated_queries(run, qrels)
    if not included:
        return 0.0
    total = 0.0
    for query_id in included:
        dcg = 0.0
        for i, doc_id in enumerate(run[query_id][:k], start=1):
            rel = qrels.grade(query_id, doc_id)
            if rel > 0:
                dcg += (2.0**rel - 1.0) / math.log2(i + 1)
        ideal = sorted(qrels.judged_grades(query_id), reverse=True)[:k]
        idcg = sum(
            (2.0**rel - 1.0) / math.log2(i + 1)
            for i, rel in enumerate(ideal, start=1)
            if rel > 0
        )
        total += dcg / idcg
    return total / len(included)


def success_at_k(run: Run, qrels: Qrels, k: int) -> float:
    """Fraction of queries with at least one relevant doc in the top k."""
    if k < 1:
        raise DataError("bad_count", "k must be >= 1")
    included = _evaluated_queries(run, qrels)
    if not included:
        return 0.0
    hits = sum(
        1
        for query_id in included
        if any(qrels.grade(query_id, d) > 0 for d in run[query_id][:k])
    )
    return hits / len(included)


def recall_at_k(run: Run, qrels: Qrels, k: int) -> float:
    """Mean fraction of each query's relevant docs found in the top k.

    Coincides with success_at_k exactly when every query has one gold.
    """
    if k < 1:
        raise DataError("bad_count", "k must be >= 1")
    included = _evaluated_queries(run, qrels)
    if not included:
        return 0.0
    total = 0.0
    for query_id in included:
        gold = set(qrels.positives(query_id))
        found = gold.intersection(run[query_id][:k])
        total += len(found) / len(gold)
    return total / len(included)


_METRIC_FNS = {"ndcg": ndcg_at_k, "success": success_at_k, "recall": recall_at_k}


def metric_fn(name: str):
    try:
        return _METRIC_FNS[name]
    except KeyError:
        raise DataError("unknown_metric", f"{name!r} not in {METRICS}") from None


# ---------------------------------------------------------------------------
# Closed vs pooled protocol
# ---------------------------------------------------------------------------


@dataclass
class RunReport:
    """Per-task closed/pooled metric values plus the robustness delta."""

    per_task: dict[str, dict[str, float]]
    metric: str
    k: int
    closed_avg: float = field(init=False)
    pooled_avg: float = field(init=False)
    delta: float = field(init=False)

    def __post_init__(self):
        closed = [v["closed"] for v in self.per_task.values()]
        pooled = [v["pooled"] for v in self.per_task.values()]
        self.closed_avg = sum(closed) / len(closed)
        self.pooled_avg = sum(pooled) / len(pooled)
        self.delta = self.closed_avg - self.pooled_avg

    def to_json(self) -> str:
        payload = {
            "metric": self.metric,
            "k": self.k,
            "per_task": {
                task_id: {
                    "task": task_id,
                    "closed": vals["closed"],
                    "pooled": vals["pooled"],
                }
                for task_id, vals in sorted(self.per_task.items())
            },
            "closed_avg": self.closed_avg,
            "pooled_avg": self.pooled_avg,
            "delta": self.delta,
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    def to_tsv(self) -> str:
        lines = ["task\tclosed\tpooled\tdelta"]
        for task_id, vals in sorted(self.per_task.items()):
            lines.append(f"{task_id}\t{vals['closed']:.6f}\t{vals['pooled']:.6f}\t")
        lines.append(
            f"average\t{self.closed_avg:.6f}\t{self.pooled_avg:.6f}\t{self.delta:.6f}"
        )
        return "\n".join(lines) + "\n"


def write_report(report: RunReport, json_path: str | Path, tsv_path: str | Path | None = None) -> None:
    Path(json_path).write_text(report.to_json() + "\n", encoding="utf-8")
    if tsv_path is not None:
        Path(tsv_path).write_text(report.to_tsv(), encoding="utf-8")


def namespaced_doc_id(corpus_id: str, doc_id: str) -> str:
    return f"{corpus_id}::{doc_id}"


def pooled_corpus(tasks: Sequence[Task]) -> tuple[Document, ...]:
    """Union corpus with namespaced ids; duplicate ids are an error."""
    seen: set[str] = set()
    docs: list[Document] = []
    for task in tasks:
        for doc in task.corpus:
            ns_id = namespaced_doc_id(doc.corpus_id, doc.id)
            if ns_id in seen:
                raise DataError("id_collision", ns_id)
            seen.add(ns_id)
            docs.append(
                Document(id=ns_id, text=doc.text, corpus_id=doc.corpus_id, title=doc.title)
            )
    return tuple(docs)


def pooled_view(task: Task, pool: tuple[Document, ...]) -> Task:
    """The task's queries and instructions over the pooled corpus, with
    qrels rewritten to namespaced ids."""
    entries = {
        (qid, namespaced_doc_id(task.id, did)): grade
        for (qid, did), grade in task.qrels.entries.items()
    }
    return Task(
        id=task.id,
        corpus=pool,
        queries=task.queries,
        qrels=Qrels(entries),
        instructions=task.instructions,
    )


def evaluate_pooled(
    system: System,
    tasks: Sequence[Task],
    metric: str = "ndcg",
    k: int = 10,
) -> RunReport:
    """Closed and pooled metric per task for one retrieval system.

    The system is any callable mapping a task (whose corpus may be the
    pooled union) to a run of ranked doc ids per query.
    """
    if not tasks:
        raise DataError("empty_tasks", "need at least one task")
    fn = metric_fn(metric)
    pool = pooled_corpus(tasks)
    per_task: dict[str, dict[str, float]] = {}
    for task in tasks:
        closed_run = system(task)
        closed = fn(closed_run, task.qrels, k)
        view = pooled_view(task, pool)
        pooled_run = system(view)
        pooled = fn(pooled_run, view.qrels, k)
        per_task[task.id] = {"closed": closed, "pooled": pooled}
    return RunReport(per_task=per_task, metric=metric, k=k)


def make_dense_system(
    dual: DualParams,
    *,
    cross: CrossParams | None = None,
    use_instruction: bool = True,
    first_stage_k: int = 100,
    k: int = 10,
    threads: int = 1,
    include_title: bool = False,
) -> System:
    """Retrieval system over the dual encoder (optionally reranked).

    Indexes are cached per corpus identity, so evaluating several tasks
    against the same pooled corpus embeds it once.
    """
    from .hashing import hash64

    index_cache: dict[int, object] = {}

    def system(task: Task) -> Run:
        # Corpus identity, not just doc ids: different tasks reuse id ranges.
        key = hash64(
            "\x1f".join(f"{d.corpus_id}\x1e{d.id}\x1e{d.text}" for d in task.corpus).encode()
        )
        index = index_cache.get(key)
        if index is None:
            index = build_index(task.corpus, dual, threads=threads, include_title=include_title)
            index_cache[key] = index
        hits = retrieval_run(
            dual,
            task,
            cross=cross,
            use_instruction=use_instruction,
            first_stage_k=first_stage_k,
            k=k,
            index=index,
            threads=threads,
            include_title=include_title,
        )
        return {qid: [h.doc_id for h in ranked] for qid, ranked in hits.items()}

    return system


# ---------------------------------------------------------------------------
# Instruction ablation grid
# ---------------------------------------------------------------------------


@dataclass
class ExperimentConfig:
    """Settings shared by the ablation grid and the experiment helpers."""

    train: TrainConfig = field(default_factory=TrainConfig)
    mining: MiningConfig = field(default_factory=MiningConfig)
    metric: str = "success"
    k: int = 5
    first_stage_k: int = 100
    dim: int = 48
    num_buckets: int = 1 << 15
    include_unfollowing: bool = True
    threads: int = 1


GRID_CELLS = ("train+test+", "train+test-", "train-test+", "train-test-")


def train_dual_model(
    benchmark: Sequence[Task],
    config: ExperimentConfig,
    *,
    use_instructions: bool = True,
    include_unfollowing: bool | None = None,
) -> DualParams:
    """Mine pools, compose instances and train a dual encoder end to end."""
    instances = build_training_instances(
        benchmark,
        config.mining,
        include_unfollowing=(
            config.include_unfollowing
            if include_unfollowing is None
            else include_unfollowing
        ),
    )
    params, _ = train(
        "dual",
        config.train,
        instances,
        benchmark,
        use_instructions=use_instructions,
        dim=config.dim,
        num_buckets=config.num_buckets,
    )
    return params


def ablate_instructions(
    config: ExperimentConfig, benchmark: Sequence[Task]
) -> dict[str, RunReport]:
    """Train with/without instructions and test with/without instructions.

    Returns the four-cell grid keyed "train{+|-}test{+|-}"; both trainings
    share the config seed, so reruns produce identical grids.
    """
    params_with = train_dual_model(benchmark, config, use_instructions=True)
    params_without = train_dual_model(benchmark, config, use_instructions=False)
    grid: dict[str, RunReport] = {}
    for cell, params, test_instructions in (
        ("train+test+", params_with, True),
        ("train+test-", params_with, False),
        ("train-test+", params_without, True),
        ("train-test-", params_without, False),
    ):
        system = make_dense_system(
            params,
            use_instruction=test_instructions,
            first_stage_k=config.first_stage_k,
            k=config.k,
            threads=config.threads,
        )
        grid[cell] = evaluate_pooled(system, benchmark, metric=config.metric, k=config.k)
    return grid
