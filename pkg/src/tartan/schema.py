"""Unified task data model and on-disk formats.

A retrieval task bundles a corpus, queries, relevance judgments and one or
more natural-language instructions.  Instructions carry three facets:
*intent* (how the target relates to the query), *domain* (where the target
comes from) and *unit* (the granularity of the target text block).

On-disk layout of a task directory::

    corpus.jsonl        {"_id": str, "title": str?, "text": str}
    queries.jsonl       {"_id": str, "text": str}
    qrels.tsv           query-id [0] doc-id relevance   (optional header)
    instructions.jsonl  {"task_id", "text", "intent", "domain", "unit"}

All schema types are immutable after construction and safe to share across
worker threads.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .errors import DataError


def _require_text(value: str, what: str) -> str:
    if not isinstance(value, str) or not value.strip():
        raise DataError("empty_text", f"{what} must be a non-empty string")
    return value


@dataclass(frozen=True)
class Instruction:
    """A natural-language description of a retrieval task.

    ``paraphrase_group`` links paraphrases of the same task intent so
    training can sample among them.
    """

    text: str
    intent: str
    domain: str
    unit: str
    paraphrase_group: str = ""

    def __post_init__(self):
        _require_text(self.text, "instruction text")
        for facet in ("intent", "domain", "unit"):
            _require_text(getattr(self, facet), f"instruction {facet}")


class NoInstruction:
    """Explicit no-instruction sentinel for ablations.

    A dedicated singleton rather than an empty string, so logs and
    experiment grids are unambiguous about which condition ran.
    """

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "<no-instruction>"


NO_INSTRUCTION = NoInstruction()

InstructionLike = Instruction | NoInstruction


@dataclass(frozen=True)
class Document:
    """One retrievable text. ``id`` is unique within its corpus."""

    id: str
    text: str
    corpus_id: str
    title: str | None = None

    def __post_init__(self):
        _require_text(self.id, "document id")
        _require_text(self.text, "document text")
        _require_text(self.corpus_id, "corpus id")


@dataclass(frozen=True)
class Query:
    id: str
    text: str
    task_id: str

    def __post_init__(self):
        _require_text(self.id, "query id")
        _require_text(self.text, "query text")
        _require_text(self.task_id, "task id")


@dataclass(frozen=True)
class Qrels:
    """Relevance judgments: (query_id, doc_id) -> grade >= 0."""

    entries: Mapping[tuple[str, str], int]

    def __post_init__(self):
        for (qid, did), grade in self.entries.items():
            if not isinstance(grade, int) or grade < 0:
                raise DataError(
                    "bad_grade", f"grade for ({qid}, {did}) must be a non-negative int"
                )

    def grade(self, query_id: str, doc_id: str) -> int:
        return self.entries.get((query_id, doc_id), 0)

    def positives(self, query_id: str) -> list[str]:
        """Doc ids judged relevant (grade > 0) for a query, in id order."""
        return sorted(
            did for (qid, did), g in self.entries.items() if qid == query_id and g > 0
        )

    def judged_grades(self, query_id: str) -> list[int]:
        return [g for (qid, _), g in self.entries.items() if qid == query_id]


@dataclass(frozen=True)
class Task:
    """A retrieval task: corpus + queries + qrels + instructions.

    The corpus keeps file order; dense index rows follow it.
    """

    id: str
    corpus: tuple[Document, ...]
    queries: tuple[Query, ...]
    qrels: Qrels
    instructions: tuple[Instruction, ...]

    def doc_map(self) -> dict[str, Document]:
        return {d.id: d for d in self.corpus}

    def query_map(self) -> dict[str, Query]:
        return {q.id: q for q in self.queries}


@dataclass(frozen=True)
class TrainingInstance:
    """A query with its gold documents and three typed negative pools.

    ``hard_negatives`` and ``random_negatives`` hold ids from the task's own
    corpus; ``unfollowing_negatives`` holds (corpus_id, doc_id) pairs from
    foreign corpora.
    """

    task_id: str
    query_id: str
    positives: tuple[str, ...]
    hard_negatives: tuple[str, ...] = ()
    unfollowing_negatives: tuple[tuple[str, str], ...] = ()
    random_negatives: tuple[str, ...] = ()

    def __post_init__(self):
        own_negs = set(self.hard_negatives) | set(self.random_negatives)
        overlap = set(self.positives) & own_negs
        if overlap:
            raise DataError(
                "positive_negative_overlap",
                f"{self.query_id}: docs in both pools: {sorted(overlap)}",
            )
        for corpus_id, _ in self.unfollowing_negatives:
            if corpus_id == self.task_id:
                raise DataError(
                    "uf_same_corpus",
                    f"{self.query_id}: unfollowing negative from own corpus",
                )


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------


def compose_input(instruction: InstructionLike, query: Query | str) -> str:
    """Join instruction and query text with a single ASCII space.

    With the :data:`NO_INSTRUCTION` sentinel the query text is returned
    unchanged, which is the no-instruction ablation identity.
    """
    query_text = query.text if isinstance(query, Query) else query
    if isinstance(instruction, NoInstruction):
        return query_text
    return instruction.text + " " + query_text


UNIFICATION_RULES = (
    "qa_context_as_gold",
    "summarization_target_as_gold",
    "simplification_target_as_gold",
    "code_comment_as_query",
    "question_duplicate_as_gold",
)

# Default instruction attached per rule (a Task must carry at least one).
_RULE_INSTRUCTIONS = {
    "qa_context_as_gold": (
        "Retrieve a passage that answers this question.",
        "answer",
        "passage",
    ),
    "summarization_target_as_gold": (
        "Find the summary of this text.",
        "summary",
        "summary",
    ),
    "simplification_target_as_gold": (
        "Find a simplified version of this text.",
        "simplification",
        "sentence",
    ),
    "code_comment_as_query": (
        "Retrieve the code that implements this description.",
        "code",
        "snippet",
    ),
    "question_duplicate_as_gold": (
        "Find a question that duplicates this question.",
        "duplicate_question",
        "question",
    ),
}


def unify_dataset(
    pairs: Sequence[tuple[str, str]],
    rule: str,
    task_id: str | None = None,
) -> Task:
    """Cast (source_text, target_text) pairs into a retrieval task.

    Source texts become queries and target texts become gold documents,
    deduplicated by exact text match so one target shared by several pairs
    yields a single document.  Each query maps to its pair partner with
    grade 1.
    """
    if rule not in UNIFICATION_RULES:
        raise DataError("unknown_rule", f"unification rule {rule!r}")
    if not pairs:
        raise DataError("empty_pairs", "no pairs to unify")
    task_id = task_id or f"unified-{rule}"

    doc_id_by_text: dict[str, str] = {}
    corpus: list[Document] = []
    queries: list[Query] = []
    entries: dict[tuple[str, str], int] = {}
    for idx, (source, target) in enumerate(pairs):
        if not source.strip() or not target.strip():
            raise DataError("empty_pair_side", f"pair {idx} has an empty side")
        if target not in doc_id_by_text:
            doc_id = f"d{len(doc_id_by_text):05d}"
            doc_id_by_text[target] = doc_id
            corpus.append(Document(id=doc_id, text=target, corpus_id=task_id))
        query = Query(id=f"q{idx:05d}", text=source, task_id=task_id)
        queries.append(query)
        entries[(query.id, doc_id_by_text[target])] = 1

    text, intent, unit = _RULE_INSTRUCTIONS[rule]
    instruction = Instruction(
        text=text, intent=intent, domain="unified", unit=unit, paraphrase_group=task_id
    )
    return Task(
        id=task_id,
        corpus=tuple(corpus),
        queries=tuple(queries),
        qrels=Qrels(entries),
        instructions=(instruction,),
    )


@dataclass
class ValidationReport:
    """Accumulated invariant violations; empty report means the task is valid."""

    issues: list[tuple[str, str]] = field(default_factory=list)

    def add(self, code: str, detail: str) -> None:
        self.issues.append((code, detail))

    def codes(self) -> list[str]:
        return [code for code, _ in self.issues]

    def ok(self) -> bool:
        return not self.issues

    def __bool__(self) -> bool:  # truthy when problems exist
        return bool(self.issues)


def validate_task(task: Task) -> ValidationReport:
    """Check every task-level invariant; problems are report items, not errors."""
    report = ValidationReport()
    if not task.instructions:
        report.add("missing_instruction", f"task {task.id} has no instructions")

    doc_ids: set[str] = set()
    for doc in task.corpus:
        if doc.id in doc_ids:
            report.add("duplicate_doc_id", doc.id)
        doc_ids.add(doc.id)
        if doc.corpus_id != task.id:
            report.add("foreign_corpus_doc", f"{doc.id} has corpus_id {doc.corpus_id}")

    query_ids: set[str] = set()
    for query in task.queries:
        if query.id in query_ids:
            report.add("duplicate_query_id", query.id)
        query_ids.add(query.id)
        if query.task_id != task.id:
            report.add("foreign_task_query", query.id)

    for (qid, did), grade in task.qrels.entries.items():
        if qid not in query_ids:
            report.add("dangling_qrel", f"unknown query {qid}")
        if did not in doc_ids:
            report.add("dangling_qrel", f"unknown doc {did}")
        if grade < 0:
            report.add("bad_grade", f"({qid}, {did}) -> {grade}")

    for query in task.queries:
        if not task.qrels.positives(query.id):
            report.add("query_without_positive", query.id)
    return report


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------


def _write_jsonl(path: Path, rows: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False, sort_keys=True))
            fh.write("\n")


def _read_jsonl(path: Path) -> list[dict]:
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise DataError("bad_jsonl", f"{path}:{line_no}: {exc}") from exc
    return rows


def write_corpus(path: str | Path, corpus: Iterable[Document]) -> None:
    rows = []
    for doc in corpus:
        row = {"_id": doc.id, "text": doc.text}
        if doc.title is not None:
            row["title"] = doc.title
        rows.append(row)
    _write_jsonl(Path(path), rows)


def read_corpus(path: str | Path, corpus_id: str) -> tuple[Document, ...]:
    docs = []
    for row in _read_jsonl(Path(path)):
        docs.append(
            Document(
                id=str(row["_id"]),
                text=row["text"],
                corpus_id=corpus_id,
                title=row.get("title"),
            )
        )
    return tuple(docs)


def write_queries(path: str | Path, queries: Iterable[Query]) -> None:
    _write_jsonl(Path(path), [{"_id": q.id, "text": q.text} for q in queries])


def read_queries(path: str | Path, task_id: str) -> tuple[Query, ...]:
    return tuple(
        Query(id=str(row["_id"]), text=row["text"], task_id=task_id)
        for row in _read_jsonl(Path(path))
    )


def write_qrels(path: str | Path, qrels: Qrels) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for (qid, did), grade in sorted(qrels.entries.items()):
            fh.write(f"{qid}\t0\t{did}\t{grade}\n")


def read_qrels(path: str | Path) -> Qrels:
    """Read tab-separated qrels.

    Accepts three columns (query-id, doc-id, grade) or four with a literal
    "0" second column. A header line is detected by a non-integer final
    column and skipped.
    """
    entries: dict[tuple[str, str], int] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            cols = line.split("\t")
            if len(cols) not in (3, 4):
                raise DataError("bad_qrels", f"{path}:{line_no}: expected 3-4 columns")
            try:
                grade = int(cols[-1])
            except ValueError:
                if line_no == 1:
                    continue  # header
                raise DataError(
                    "bad_qrels", f"{path}:{line_no}: non-integer grade {cols[-1]!r}"
                ) from None
            qid = cols[0]
            did = cols[2] if len(cols) == 4 else cols[1]
            entries[(qid, did)] = grade
    return Qrels(entries)


def write_instructions(path: str | Path, task_id: str, instructions: Iterable[Instruction]) -> None:
    rows = []
    for ins in instructions:
        rows.append(
            {
                "task_id": task_id,
                "text": ins.text,
                "intent": ins.intent,
                "domain": ins.domain,
                "unit": ins.unit,
                "paraphrase_group": ins.paraphrase_group,
            }
        )
    _write_jsonl(Path(path), rows)


def read_instructions(path: str | Path) -> tuple[Instruction, ...]:
    out = []
    for row in _read_jsonl(Path(path)):
        out.append(
            Instruction(
                text=row["text"],
                intent=row["intent"],
                domain=row["domain"],
                unit=row["unit"],
                paraphrase_group=row.get("paraphrase_group", ""),
            )
        )
    return tuple(out)


def save_task(task: Task, directory: str | Path) -> Path:
    """Write a task to ``directory/<task id>`` in the standard layout."""
    task_dir = Path(directory) / task.id
    task_dir.mkdir(parents=True, exist_ok=True)
    write_corpus(task_dir / "corpus.jsonl", task.corpus)
    write_queries(task_dir / "queries.jsonl", task.queries)
    write_qrels(task_dir / "qrels.tsv", task.qrels)
    write_instructions(task_dir / "instructions.jsonl", task.id, task.instructions)
    return task_dir


def load_task(task_dir: str | Path) -> Task:
    task_dir = Path(task_dir)
    task_id = task_dir.name
    return Task(
        id=task_id,
        corpus=read_corpus(task_dir / "corpus.jsonl", task_id),
        queries=read_queries(task_dir / "queries.jsonl", task_id),
        qrels=read_qrels(task_dir / "qrels.tsv"),
        instructions=read_instructions(task_dir / "instructions.jsonl"),
    )


def load_benchmark(directory: str | Path) -> list[Task]:
    """Load every task subdirectory, sorted by task id."""
    directory = Path(directory)
    task_dirs = sorted(p for p in directory.iterdir() if (p / "corpus.jsonl").exists())
    if not task_dirs:
        raise DataError("no_tasks", f"no task directories under {directory}")
    return [load_task(p) for p in task_dirs]


def save_benchmark(tasks: Iterable[Task], directory: str | Path) -> None:
    for task in tasks:
        save_task(task, directory)
