"""Deterministic generator of desk-scale multi-task retrieval benchmarks.

Tasks share a token vocabulary and, controllably, query surface forms: an
overlapped surface appears verbatim in every task, and within each task it
appears as a small group of ambiguous readings (distinct query ids with the
same text but different gold documents).  With three tasks and three
readings each, one shared surface needs nine distinct documents ranked
high, while any scorer that ignores the instruction produces a single
ranking with only k slots -- a counting barrier no amount of training can
beat.  Instruction-conditioned scorers rank per task and only ever need
their own readings' golds near the top.

Template sketch (content tokens c1..c6; every document carries one unique
id token ``uidTxN`` and no shared task marker):

    answer              uidTxN c1 a1 c2 a2 ...         (one doc per reading)
    duplicate_question  uidTxN <permutation of c>      (5 variants)
    summary             uidTxN <3-token window of c>
    code                uidTxN def c1 .. c6 return x1 x2

Answer documents interleave answer tokens between content tokens, which
kills bigram shortcuts.  There is deliberately no shared task-identity
token in documents: suppressing another task's look-alike documents cannot
be learned as one global rule, only from direct negative evidence on those
documents (which is what instruction-unfollowing negatives provide), and
instruction texts use a ``topicNN`` word that never appears in documents,
so nothing links instructions to documents at the surface level.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import DataError
from .hashing import make_rng
from .schema import Document, Instruction, Qrels, Query, Task

INTENT_KINDS = ("answer", "duplicate_question", "summary", "code")

QUERY_LEN = 6
READINGS_PER_SURFACE = 3  # ambiguous readings of a shared surface, per task
DUP_VARIANTS = 5
ANSWER_TOKENS = 5
_MAX_DRAW_ATTEMPTS = 200


@dataclass
class SynthSpec:
    n_tasks: int = 3
    docs_per_task: int = 1000
    queries_per_task: int = 200
    vocab_size: int = 600
    intent_kinds: tuple[str, ...] = ("answer", "duplicate_question", "summary")
    overlap_fraction: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.overlap_fraction <= 1.0):
            raise DataError("bad_fraction", "overlap_fraction must be in [0, 1]")
        if min(self.n_tasks, self.docs_per_task, self.queries_per_task) < 1:
            raise DataError("bad_count", "all counts must be >= 1")
        if self.docs_per_task < self.queries_per_task:
            raise DataError(
                "bad_count", "docs_per_task must be >= queries_per_task"
            )
        unknown = set(self.intent_kinds) - set(INTENT_KINDS)
        if not self.intent_kinds or unknown:
            raise DataError("bad_kind", f"intent kinds {unknown or 'missing'}")
        if self.vocab_size < QUERY_LEN:
            raise DataError(
                "vocab_exhausted", f"vocab_size {self.vocab_size} < {QUERY_LEN}"
            )


_KIND_UNITS = {
    "answer": "passage",
    "duplicate_question": "question",
    "summary": "summary",
    "code": "snippet",
}

_INSTRUCTION_TEMPLATES = {
    "answer": (
        "retrieve the passage that answers this question from the {topic} collection",
        "you want a passage from {topic} that gives the answer",
    ),
    "duplicate_question": (
        "find a question in {topic} that duplicates this question",
        "retrieve the duplicate of this question from {topic}",
    ),
    "summary": (
        "find the short summary of this text in the {topic} collection",
        "retrieve a summary from {topic}",
    ),
    "code": (
        "find code in {topic} that implements this description",
        "retrieve an implementation snippet from {topic}",
    ),
}


def _draw_content(rng, vocab, taken: set[str]) -> tuple[str, ...]:
    for _ in range(_MAX_DRAW_ATTEMPTS):
        idx = rng.choice(len(vocab), size=QUERY_LEN, replace=False)
        content = tuple(vocab[int(i)] for i in idx)
        if " ".join(content) not in taken:
            taken.add(" ".join(content))
            return content
    raise DataError("vocab_exhausted", "cannot draw a fresh distinct query")


def _surface_docs(
    kind: str,
    content: tuple[str, ...],
    n_readings: int,
    rng,
    vocab,
) -> tuple[list[str], list[int]]:
    """Document bodies for one surface plus the gold index per reading.

    Readings of an ambiguous surface get distinct golds: separate answer
    documents, separate paraphrase variants, different summary windows.
    Bodies are deduplicated within the surface; the caller prepends a
    per-document unique token, which makes full texts globally distinct.
    """
    half = (len(content) + 1) // 2
    bodies: list[str] = []
    seen: set[str] = set()

    def emit(tokens: list[str]) -> None:
        body = " ".join(tokens)
        if body in seen:
            raise DataError("vocab_exhausted", "duplicate document within surface")
        seen.add(body)
        bodies.append(body)

    if kind == "answer":
        for _ in range(n_readings):
            answers = [vocab[int(i)] for i in rng.choice(len(vocab), size=ANSWER_TOKENS)]
            interleaved: list[str] = []
            for pos, tok in enumerate(content):
                interleaved.append(tok)
                if pos < len(answers):
                    interleaved.append(answers[pos])
            emit(interleaved)
        return bodies, list(range(n_readings))

    if kind == "duplicate_question":
        n_variants = max(DUP_VARIANTS, n_readings)
        for _ in range(_MAX_DRAW_ATTEMPTS):
            if len(bodies) == n_variants:
                break
            perm = [content[int(i)] for i in rng.permutation(len(content))]
            body = " ".join(perm)
            if body not in seen:
                seen.add(body)
                bodies.append(body)
        if len(bodies) < n_variants:
            raise DataError("vocab_exhausted", "cannot build distinct paraphrases")
        return bodies, list(range(n_readings))

    if kind == "summary":
        for r in range(n_readings):
            start = min(r, len(content) - half)
            emit(list(content[start : start + half]))
        return bodies, list(range(n_readings))

    # code: shared implementation body, reading-specific trailing tokens
    for _ in range(n_readings):
        suffix = [vocab[int(i)] for i in rng.choice(len(vocab), size=2)]
        emit(["def"] + list(content) + ["return"] + suffix)
    return bodies, list(range(n_readings))


def generate_benchmark(spec: SynthSpec) -> list[Task]:
    """Generate ``spec.n_tasks`` tasks; fully deterministic in the seed."""
    vocab = [f"w{i}" for i in range(spec.vocab_size)]
    n_shared = round(spec.overlap_fraction * spec.queries_per_task)

    taken_queries: set[str] = set()
    shared_rng = make_rng(spec.seed, "shared-queries")
    # (content, n_readings) per shared surface; drawing the maximum up front
    # keeps different overlap fractions on one seed sharing a prefix.
    shared_surfaces: list[tuple[tuple[str, ...], int]] = []
    remaining = n_shared
    max_surfaces = (spec.queries_per_task + READINGS_PER_SURFACE - 1) // READINGS_PER_SURFACE
    for _ in range(max_surfaces):
        content = _draw_content(shared_rng, vocab, taken_queries)
        if remaining <= 0:
            continue
        size = min(READINGS_PER_SURFACE, remaining)
        shared_surfaces.append((content, size))
        remaining -= size

    tasks: list[Task] = []
    for task_idx in range(spec.n_tasks):
        kind = spec.intent_kinds[task_idx % len(spec.intent_kinds)]
        task_id = f"task{task_idx:02d}"
        topic = f"topic{task_idx:02d}"

        unique_rng = make_rng(spec.seed, "task", task_idx, "unique-queries")
        surfaces = list(shared_surfaces) + [
            (_draw_content(unique_rng, vocab, taken_queries), 1)
            for _ in range(spec.queries_per_task - n_shared)
        ]

        corpus: list[Document] = []
        entries: dict[tuple[str, str], int] = {}
        queries: list[Query] = []

        def add_doc(body: str) -> str:
            doc_id = f"d{len(corpus):05d}"
            text = f"uid{task_idx}x{len(corpus)} {body}"
            corpus.append(Document(id=doc_id, text=text, corpus_id=task_id))
            return doc_id

        for s_idx, (content, n_readings) in enumerate(surfaces):
            doc_rng = make_rng(spec.seed, "task", task_idx, "docs", s_idx)
            bodies, gold_of_reading = _surface_docs(
                kind, content, n_readings, doc_rng, vocab
            )
            doc_ids = [add_doc(body) for body in bodies]
            for reading in range(n_readings):
                query_id = f"q{len(queries):04d}"
                queries.append(
                    Query(id=query_id, text=" ".join(content), task_id=task_id)
                )
                entries[(query_id, doc_ids[gold_of_reading[reading]])] = 1

        if len(corpus) > spec.docs_per_task:
            raise DataError(
                "bad_count",
                f"{task_id}: {len(corpus)} generated docs exceed docs_per_task",
            )

        filler_rng = make_rng(spec.seed, "task", task_idx, "filler")
        filler_taken: set[str] = set()
        while len(corpus) < spec.docs_per_task:
            fake = _draw_content(filler_rng, vocab, filler_taken)
            add_doc(_surface_docs(kind, fake, 1, filler_rng, vocab)[0][0])

        instructions = tuple(
            Instruction(
                text=template.format(topic=topic),
                intent=kind,
                domain=topic,
                unit=_KIND_UNITS[kind],
                paraphrase_group=f"{task_id}:{kind}",
            )
            for template in _INSTRUCTION_TEMPLATES[kind]
        )
        tasks.append(
            Task(
                id=task_id,
                corpus=tuple(corpus),
                queries=tuple(queries),
                qrels=Qrels(entries),
                instructions=instructions,
            )
        )
    return tasks
