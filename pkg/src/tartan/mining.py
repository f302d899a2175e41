"""Negative-pool construction: denoised hard negatives, instruction-unfollowing
negatives from foreign corpora, and per-step negative sampling.

Hard negatives are retriever near-misses whose reranker probability falls
below the denoise threshold; unfollowing negatives are documents retrieved
from a *different* task's corpus and are all treated as negatives without
any filtering, since they cannot satisfy the task's instruction.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

from .errors import DataError
from .hashing import make_rng
from .schema import Document, Query, Task, TrainingInstance

logger = logging.getLogger(__name__)

# retriever(query, k) -> ranked hits (objects with a .doc_id attribute)
Retriever = Callable[[Query, int], Sequence]
# reranker(query, doc) -> relevance probability; instruction conditioning is
# the caller's policy (bootstrap mining scores without instructions, the
# distillation rerun scores with them).
Reranker = Callable[[Query, Document], float]


@dataclass
class MiningConfig:
    retrieval_depth: int = 100
    denoise_threshold: float = 0.1
    uf_top_k: int = 20
    uf_max_fraction: float = 0.2
    uf_pair_cap: int = 10_000
    seed: int = 0

    def __post_init__(self):
        if not (0.0 < self.denoise_threshold < 1.0):
            raise DataError("bad_threshold", "denoise_threshold must be in (0, 1)")
        if not (0.0 <= self.uf_max_fraction <= 1.0):
            raise DataError("bad_fraction", "uf_max_fraction must be in [0, 1]")
        if self.retrieval_depth < 1 or self.uf_top_k < 1:
            raise DataError("bad_count", "retrieval depths must be >= 1")


def mine_hard_negatives(
    retriever: Retriever,
    reranker: Reranker,
    task: Task,
    config: MiningConfig,
) -> dict[str, list[str]]:
    """Denoised hard negatives per query, in retriever rank order.

    Retrieves the top ``retrieval_depth`` candidates, drops gold documents,
    and keeps only candidates whose reranker probability is below the
    denoise threshold (near-misses confirmed irrelevant).
    """
    doc_map = task.doc_map()
    out: dict[str, list[str]] = {}
    empties = 0
    for query in sorted(task.queries, key=lambda q: q.id):
        gold = set(task.qrels.positives(query.id))
        hits = retriever(query, config.retrieval_depth)
        if not hits:
            empties += 1
            out[query.id] = []
            continue
        kept = []
        for hit in hits:
            if hit.doc_id in gold:
                continue
            prob = reranker(query, doc_map[hit.doc_id])
            if prob < config.denoise_threshold:
                kept.append(hit.doc_id)
        out[query.id] = kept
    if empties:
        logger.warning("hard-negative mining: %d queries retrieved no candidates", empties)
    return out


def mine_unfollowing(
    retriever: Retriever,
    task: Task,
    foreign: Task,
    k: int,
) -> dict[str, list[str]]:
    """Top-k docs per query from a different task's corpus, all negatives.

    ``retriever`` must search the foreign corpus.  No reranker filtering is
    applied; by construction these documents do not follow the task's
    instruction.
    """
    if k < 1:
        raise DataError("bad_count", "k must be >= 1")
    if foreign.id == task.id:
        raise DataError("uf_same_corpus", f"task {task.id} paired with itself")
    out: dict[str, list[str]] = {}
    for query in sorted(task.queries, key=lambda q: q.id):
        hits = retriever(query, k)
        out[query.id] = [hit.doc_id for hit in hits]
    return out


def sample_negatives(
    instance: TrainingInstance,
    task: Task,
    docs: Mapping[str, Mapping[str, Document]],
    n_total: int,
    rng,
    hard_fraction: float = 0.1,
    uf_max_fraction: float = 0.2,
) -> list[Document]:
    """Draw ``n_total`` negatives for one instance, without replacement.

    ``ceil(hard_fraction * n_total)`` come from the pooled hard/unfollowing
    union (the unfollowing share capped at ``floor(uf_max_fraction *
    n_total)``), the remainder uniformly from the task corpus excluding
    positives.  Short pools fall back to random draws.
    """
    if n_total < 1:
        raise DataError("bad_count", "n_total must be >= 1")
    import math

    pooled: list[tuple[str, str]] = [
        (task.id, doc_id) for doc_id in instance.hard_negatives
    ] + list(instance.unfollowing_negatives)

    chosen: list[Document] = []
    chosen_own: set[str] = set()
    if pooled:
        want = min(math.ceil(hard_fraction * n_total), n_total, len(pooled))
        uf_cap = int(uf_max_fraction * n_total)
        uf_taken = 0
        for idx in rng.permutation(len(pooled)):
            if len(chosen) >= want:
                break
            corpus_id, doc_id = pooled[int(idx)]
            is_uf = corpus_id != task.id
            if is_uf and uf_taken >= uf_cap:
                continue
            try:
                doc = docs[corpus_id][doc_id]
            except KeyError:
                raise DataError("unknown_doc", f"{corpus_id}::{doc_id}") from None
            if not is_uf:
                if doc_id in chosen_own:
                    continue
                chosen_own.add(doc_id)
            else:
                uf_taken += 1
            chosen.append(doc)

    n_random = n_total - len(chosen)
    if n_random > 0:
        excluded = set(instance.positives) | chosen_own
        candidates = [d for d in task.corpus if d.id not in excluded]
        if len(candidates) < n_random:
            raise DataError(
                "corpus_too_small",
                f"task {task.id}: need {n_random} random negatives, "
                f"{len(candidates)} candidates",
            )
        for idx in rng.choice(len(candidates), size=n_random, replace=False):
            chosen.append(candidates[int(idx)])
    return chosen


def build_training_instances(
    tasks: Sequence[Task],
    config: MiningConfig,
    *,
    retriever_factory: Callable[[Task], Retriever] | None = None,
    reranker: Reranker | None = None,
    include_unfollowing: bool = True,
    uf_pairs: Sequence[tuple[str, str]] | None = None,
) -> list[TrainingInstance]:
    """Compose per-query training instances from mined pools.

    ``retriever_factory`` builds a retriever over a given task's corpus
    (defaults to BM25, the lexical bootstrap available before any trained
    model exists).  Hard negatives are mined only when a ``reranker`` is
    supplied.  ``uf_pairs`` names (task_id, foreign_task_id) pairs; by
    default every task is paired with every other task.  The per-pair
    unfollowing budget (``uf_pair_cap``, counted over all queries of the
    pair) is enforced here, in query-id order.
    """
    if retriever_factory is None:
        from .search import bm25_retriever_factory

        retriever_factory = bm25_retriever_factory
    task_by_id = {task.id: task for task in tasks}

    retrievers: dict[str, Retriever] = {}

    def retriever_for(task_id: str) -> Retriever:
        if task_id not in retrievers:
            retrievers[task_id] = retriever_factory(task_by_id[task_id])
        return retrievers[task_id]

    if uf_pairs is None:
        uf_pairs = [
            (a.id, b.id) for a in tasks for b in tasks if a.id != b.id
        ]
    for task_id, foreign_id in uf_pairs:
        if task_id not in task_by_id or foreign_id not in task_by_id:
            raise DataError("unknown_task", f"uf pair ({task_id}, {foreign_id})")
        if task_id == foreign_id:
            raise DataError("uf_same_corpus", f"task {task_id} paired with itself")

    hard_pools: dict[str, dict[str, list[str]]] = {}
    if reranker is not None:
        for task in tasks:
            hard_pools[task.id] = mine_hard_negatives(
                retriever_for(task.id), reranker, task, config
            )

    uf_pools: dict[str, dict[str, list[tuple[str, str]]]] = {
        task.id: {q.id: [] for q in task.queries} for task in tasks
    }
    if include_unfollowing:
        for task_id, foreign_id in uf_pairs:
            task = task_by_id[task_id]
            foreign = task_by_id[foreign_id]
            mined = mine_unfollowing(
                retriever_for(foreign_id), task, foreign, config.uf_top_k
            )
            budget = config.uf_pair_cap
            for query_id in sorted(mined):
                if budget <= 0:
                    break
                take = mined[query_id][: min(budget, len(mined[query_id]))]
                uf_pools[task_id][query_id].extend(
                    (foreign_id, doc_id) for doc_id in take
                )
                budget -= len(take)

    instances: list[TrainingInstance] = []
    for task in tasks:
        task_hard = hard_pools.get(task.id, {})
        for query in task.queries:
            positives = tuple(task.qrels.positives(query.id))
            instances.append(
                TrainingInstance(
                    task_id=task.id,
                    query_id=query.id,
                    positives=positives,
                    hard_negatives=tuple(task_hard.get(query.id, ())),
                    unfollowing_negatives=tuple(uf_pools[task.id][query.id]),
                )
            )
    return instances


# ---------------------------------------------------------------------------
# Pool persistence
# ---------------------------------------------------------------------------


def write_pools(path: str | Path, instances: Iterable[TrainingInstance]) -> None:
    """Persist mined pools as JSON-lines, one row per (query, pool, source)."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for inst in instances:
            rows = []
            if inst.hard_negatives:
                rows.append(("hard", inst.task_id, list(inst.hard_negatives)))
            by_source: dict[str, list[str]] = {}
            for corpus_id, doc_id in inst.unfollowing_negatives:
                by_source.setdefault(corpus_id, []).append(doc_id)
            for corpus_id in sorted(by_source):
                rows.append(("unfollowing", corpus_id, by_source[corpus_id]))
            if inst.random_negatives:
                rows.append(("random", inst.task_id, list(inst.random_negatives)))
            for pool, source, doc_ids in rows:
                fh.write(
                    json.dumps(
                        {
                            "query_id": inst.query_id,
                            "task_id": inst.task_id,
                            "pool": pool,
                            "doc_ids": doc_ids,
                            "source_corpus": source,
                        },
                        sort_keys=True,
                    )
                )
                fh.write("\n")


def read_pools(path: str | Path, tasks: Sequence[Task]) -> list[TrainingInstance]:
    """Rebuild training instances from a pools file plus task qrels."""
    task_by_id = {task.id: task for task in tasks}
    hard: dict[tuple[str, str], list[str]] = {}
    unf: dict[tuple[str, str], list[tuple[str, str]]] = {}
    rand: dict[tuple[str, str], list[str]] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            row = json.loads(line)
            key = (row["task_id"], row["query_id"])
            if row["task_id"] not in task_by_id:
                raise DataError("unknown_task", f"{path}:{line_no}: {row['task_id']}")
            pool = row["pool"]
            if pool == "hard":
                hard.setdefault(key, []).extend(row["doc_ids"])
            elif pool == "unfollowing":
                unf.setdefault(key, []).extend(
                    (row["source_corpus"], d) for d in row["doc_ids"]
                )
            elif pool == "random":
                rand.setdefault(key, []).extend(row["doc_ids"])
            else:
                raise DataError("bad_pool", f"{path}:{line_no}: pool {pool!r}")

    instances = []
    for task in tasks:
        for query in task.queries:
            key = (task.id, query.id)
            instances.append(
                TrainingInstance(
                    task_id=task.id,
                    query_id=query.id,
                    positives=tuple(task.qrels.positives(query.id)),
                    hard_negatives=tuple(hard.get(key, ())),
                    unfollowing_negatives=tuple(unf.get(key, ())),
                    random_negatives=tuple(rand.get(key, ())),
                )
            )
    return instances


def materialize_random_negatives(
    instances: Sequence[TrainingInstance],
    tasks: Sequence[Task],
    config: MiningConfig,
    n_total: int,
    hard_fraction: float = 0.1,
) -> list[TrainingInstance]:
    """Freeze one sampled negative set per instance into its random pool.

    Training normally resamples negatives per step; this materializes one
    deterministic draw (seeded by the mining config) for persistence.
    """
    from dataclasses import replace

    task_by_id = {task.id: task for task in tasks}
    docs = {task.id: task.doc_map() for task in tasks}
    out = []
    for inst in instances:
        rng = make_rng(config.seed, "materialize", inst.task_id, inst.query_id)
        drawn = sample_negatives(
            inst,
            task_by_id[inst.task_id],
            docs,
            n_total=n_total,
            rng=rng,
            hard_fraction=hard_fraction,
            uf_max_fraction=config.uf_max_fraction,
        )
        randoms = tuple(
            d.id
            for d in drawn
            if d.corpus_id == inst.task_id
            and d.id not in inst.hard_negatives
            and d.id not in inst.positives
        )
        out.append(replace(inst, random_negatives=randoms))
    return out
