"""Exact inner-product search, a BM25 baseline, cross-encoder reranking and
the two-stage retrieval pipeline.

Document embeddings are computed offline into a dense index; queries run a
full scan, so results are exact.  Ties everywhere break by (score
descending, doc id ascending) -- the rule that makes pooled-vs-closed
comparisons exact.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .checkpoint import fingerprint_params
from .encoder import (
    CrossParams,
    DualParams,
    Embedding,
    document_text,
    embed_query,
    embed_texts,
    score_cross,
    tokenize,
)
from .errors import DataError
from .schema import Document, InstructionLike, NO_INSTRUCTION, Query, Task

INDEX_MAGIC = b"TARTIDX1"

DEFAULT_K1 = 0.9
DEFAULT_B = 0.4


@dataclass(frozen=True)
class RankedHit:
    doc_id: str
    score: float
    rank: int  # 1-based


@dataclass
class DenseIndex:
    doc_ids: tuple[str, ...]
    matrix: np.ndarray  # (N, dim), unit-norm rows
    params_fingerprint: int

    @property
    def dim(self) -> int:
        return int(self.matrix.shape[1])

    def __len__(self) -> int:
        return len(self.doc_ids)


def build_index(
    corpus: Sequence[Document],
    params: DualParams,
    threads: int = 1,
    include_title: bool = False,
) -> DenseIndex:
    """Embed every document; row order follows corpus order."""
    if not corpus:
        raise DataError("empty_corpus", "cannot index an empty corpus")
    texts = [document_text(doc, include_title) for doc in corpus]
    matrix = embed_texts(params, texts, threads=threads)
    return DenseIndex(
        doc_ids=tuple(doc.id for doc in corpus),
        matrix=matrix,
        params_fingerprint=fingerprint_params(params),
    )


def _rank_hits(doc_ids: Sequence[str], scores: np.ndarray, k: int) -> list[RankedHit]:
    # lexsort: last key is primary -> sort by score desc, then doc id asc.
    ids_arr = np.asarray(doc_ids)
    order = np.lexsort((ids_arr, -scores))[: min(k, len(doc_ids))]
    return [
        RankedHit(doc_id=str(ids_arr[i]), score=float(scores[i]), rank=r + 1)
        for r, i in enumerate(order)
    ]


def search_topk(index: DenseIndex, query_embedding: Embedding, k: int) -> list[RankedHit]:
    """Exact top-k by inner product via full scan."""
    if k < 1:
        raise DataError("bad_count", "k must be >= 1")
    if query_embedding.values.shape[0] != index.dim:
        raise DataError(
            "dim_mismatch",
            f"query dim {query_embedding.values.shape[0]} vs index dim {index.dim}",
        )
    scores = index.matrix @ query_embedding.values
    return _rank_hits(index.doc_ids, scores, k)


# ---------------------------------------------------------------------------
# BM25
# ---------------------------------------------------------------------------


@dataclass
class Bm25Stats:
    """Inverted statistics for Okapi BM25 over the same tokenizer as the
    encoders (documents are not length-truncated here).

    ``postings`` maps each term to (doc indices, term frequencies) arrays so
    query scoring touches only documents containing the term.
    """

    doc_ids: tuple[str, ...]
    doc_lengths: np.ndarray
    avg_doc_length: float
    doc_freq: dict[str, int]
    postings: dict[str, tuple[np.ndarray, np.ndarray]]
    k1: float = DEFAULT_K1
    b: float = DEFAULT_B

    @classmethod
    def build(
        cls,
        corpus: Sequence[Document],
        k1: float = DEFAULT_K1,
        b: float = DEFAULT_B,
        include_title: bool = False,
    ) -> "Bm25Stats":
        if not corpus:
            raise DataError("empty_corpus", "cannot build stats for an empty corpus")
        raw_postings: dict[str, list[tuple[int, int]]] = {}
        lengths = []
        for doc_idx, doc in enumerate(corpus):
            tokens = tokenize(document_text(doc, include_title), max_len=1 << 30)
            tf: dict[str, int] = {}
            for tok in tokens:
                tf[tok] = tf.get(tok, 0) + 1
            for term, count in tf.items():
                raw_postings.setdefault(term, []).append((doc_idx, count))
            lengths.append(len(tokens))
        lengths_arr = np.array(lengths, dtype=np.float64)
        postings = {
            term: (
                np.array([i for i, _ in entries], dtype=np.int64),
                np.array([c for _, c in entries], dtype=np.float64),
            )
            for term, entries in raw_postings.items()
        }
        return cls(
            doc_ids=tuple(doc.id for doc in corpus),
            doc_lengths=lengths_arr,
            avg_doc_length=float(lengths_arr.mean()),
            doc_freq={term: len(idx) for term, (idx, _) in postings.items()},
            postings=postings,
            k1=k1,
            b=b,
        )


def bm25_scores(stats: Bm25Stats, query: str) -> np.ndarray:
    """Okapi BM25 scores for every document.

    idf uses the non-negative variant ln(1 + (N - df + 0.5)/(df + 0.5));
    query tokens are summed as given (repeats contribute repeatedly) and
    unseen terms contribute zero, so all scores are non-negative.
    """
    n_docs = len(stats.doc_ids)
    scores = np.zeros(n_docs)
    length_norm = stats.k1 * (
        1.0 - stats.b + stats.b * stats.doc_lengths / stats.avg_doc_length
    )
    for term in tokenize(query, max_len=1 << 30):
        if term not in stats.postings:
            continue
        doc_idx, tf = stats.postings[term]
        df = stats.doc_freq[term]
        idf = np.log(1.0 + (n_docs - df + 0.5) / (df + 0.5))
        scores[doc_idx] += idf * (tf * (stats.k1 + 1.0)) / (tf + length_norm[doc_idx])
    return scores


def bm25_search(stats: Bm25Stats, query: str, k: int) -> list[RankedHit]:
    if k < 1:
        raise DataError("bad_count", "k must be >= 1")
    return _rank_hits(stats.doc_ids, bm25_scores(stats, query), k)


# ---------------------------------------------------------------------------
# Reranking and the two-stage pipeline
# ---------------------------------------------------------------------------


def rerank(
    cross_params: CrossParams,
    instruction: InstructionLike,
    query: Query | str,
    hits: Sequence[RankedHit],
    corpus: Mapping[str, Document],
    include_title: bool = False,
) -> list[RankedHit]:
    """Rescore hits with the cross encoder; the candidate set is unchanged."""
    if not hits:
        raise DataError("empty_hits", "nothing to rerank")
    ids = [hit.doc_id for hit in hits]
    scores = np.array(
        [
            score_cross(cross_params, instruction, query, corpus[doc_id], include_title)
            for doc_id in ids
        ]
    )
    return _rank_hits(ids, scores, len(ids))


def pipeline_retrieve(
    dual: DualParams,
    cross: CrossParams | None,
    instruction: InstructionLike,
    query: Query | str,
    index: DenseIndex,
    corpus: Mapping[str, Document],
    first_stage_k: int = 100,
    k: int = 10,
    include_title: bool = False,
) -> list[RankedHit]:
    """First-stage exact search over the instruction-conditioned query
    embedding, optionally reranked by the cross encoder, truncated to k."""
    if k < 1 or first_stage_k < k:
        raise DataError("bad_count", "need first_stage_k >= k >= 1")
    query_emb = embed_query(dual, instruction, query)
    hits = search_topk(index, query_emb, first_stage_k)
    if cross is not None and hits:
        hits = rerank(cross, instruction, query, hits, corpus, include_title)
    return hits[:k]


# ---------------------------------------------------------------------------
# Retriever factories (shared by mining and the CLI)
# ---------------------------------------------------------------------------


def bm25_retriever_factory(task: Task) -> Callable[[Query, int], list[RankedHit]]:
    stats = Bm25Stats.build(task.corpus)

    def retrieve(query: Query, k: int) -> list[RankedHit]:
        return bm25_search(stats, query.text, k)

    return retrieve


def dense_retriever_factory(
    params: DualParams,
    instruction: InstructionLike = NO_INSTRUCTION,
    threads: int = 1,
) -> Callable[[Task], Callable[[Query, int], list[RankedHit]]]:
    """Dense retriever builder; conditioning on an instruction is the
    caller's policy (the bootstrap pass mines without one)."""

    def factory(task: Task) -> Callable[[Query, int], list[RankedHit]]:
        index = build_index(task.corpus, params, threads=threads)

        def retrieve(query: Query, k: int) -> list[RankedHit]:
            return search_topk(index, embed_query(params, instruction, query), k)

        return retrieve

    return factory


def cross_reranker(
    params: CrossParams,
    instruction: InstructionLike = NO_INSTRUCTION,
    include_title: bool = False,
) -> Callable[[Query, Document], float]:
    def score(query: Query, doc: Document) -> float:
        return score_cross(params, instruction, query, doc, include_title)

    return score


# ---------------------------------------------------------------------------
# Index persistence
# ---------------------------------------------------------------------------


def save_index(index: DenseIndex, path: str | Path) -> None:
    """Write the index: magic, u32 N, u32 dim, f32 rows, id table, fingerprint."""
    n, dim = index.matrix.shape
    with open(path, "wb") as fh:
        fh.write(INDEX_MAGIC)
        fh.write(struct.pack("<II", n, dim))
        fh.write(np.ascontiguousarray(index.matrix, dtype="<f4").tobytes())
        for doc_id in index.doc_ids:
            encoded = doc_id.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
        fh.write(struct.pack("<Q", index.params_fingerprint))


def load_index(path: str | Path) -> DenseIndex:
    blob = Path(path).read_bytes()
    if blob[: len(INDEX_MAGIC)] != INDEX_MAGIC:
        raise DataError("bad_magic", f"{path}: not an index file")
    offset = len(INDEX_MAGIC)
    n, dim = struct.unpack_from("<II", blob, offset)
    offset += 8
    count = n * dim
    matrix = (
        np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
        .reshape(n, dim)
        .astype(np.float64)
    )
    offset += count * 4
    doc_ids = []
    for _ in range(n):
        (length,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        doc_ids.append(blob[offset : offset + length].decode("utf-8"))
        offset += length
    (fingerprint,) = struct.unpack_from("<Q", blob, offset)
    offset += 8
    if offset != len(blob):
        raise DataError("bad_magic", f"{path}: trailing bytes")
    return DenseIndex(
        doc_ids=tuple(doc_ids), matrix=matrix, params_fingerprint=fingerprint
    )


# ---------------------------------------------------------------------------
# TREC-style run files
# ---------------------------------------------------------------------------


def write_run(
    path: str | Path,
    run: Mapping[str, Sequence[RankedHit]],
    tag: str = "tartan",
) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for query_id in sorted(run):
            for hit in run[query_id]:
                fh.write(
                    f"{query_id} Q0 {hit.doc_id} {hit.rank} {hit.score:.6f} {tag}\n"
                )


def read_run(path: str | Path) -> dict[str, list[str]]:
    """Ranked doc ids per query, in rank order."""
    rows: dict[str, list[tuple[int, str]]] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 6:
                raise DataError("bad_run", f"{path}:{line_no}: expected 6 columns")
            query_id, _, doc_id, rank, _, _ = parts
            rows.setdefault(query_id, []).append((int(rank), doc_id))
    return {
        qid: [doc_id for _, doc_id in sorted(entries)]
        for qid, entries in rows.items()
    }


def retrieval_run(
    dual: DualParams,
    task: Task,
    *,
    cross: CrossParams | None = None,
    use_instruction: bool = True,
    first_stage_k: int = 100,
    k: int = 10,
    index: DenseIndex | None = None,
    threads: int = 1,
    include_title: bool = False,
) -> dict[str, list[RankedHit]]:
    """Run the pipeline over every query of a task (first instruction used
    when conditioning is enabled; evaluation stays deterministic)."""
    if index is None:
        index = build_index(task.corpus, dual, threads=threads, include_title=include_title)
    corpus = task.doc_map()
    instruction: InstructionLike = (
        task.instructions[0] if use_instruction and task.instructions else NO_INSTRUCTION
    )
    effective_first = min(first_stage_k, len(index)) if len(index) else first_stage_k
    effective_first = max(effective_first, min(k, len(index)))
    out: dict[str, list[RankedHit]] = {}
    for query in sorted(task.queries, key=lambda q: q.id):
        out[query.id] = pipeline_retrieve(
            dual,
            cross,
            instruction,
            query,
            index,
            corpus,
            first_stage_k=effective_first,
            k=min(k, len(index)),
            include_title=include_title,
        )
    return out
