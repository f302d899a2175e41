import pytest

from tartan import (
    Document,
    Instruction,
    Qrels,
    Query,
    Task,
    init_cross_params,
    init_dual_params,
)

WORDS = [
    "alpha", "beta", "gamma", "delta", "epsilon", "zeta", "eta", "theta",
    "iota", "kappa", "lam", "mu", "nu", "xi", "omicron", "pi",
]


def random_text(rng, n_tokens: int) -> str:
    return " ".join(WORDS[int(i)] for i in rng.integers(0, len(WORDS), size=n_tokens))


def tiny_task(task_id: str = "toy", n_docs: int = 6) -> Task:
    """Task where doc i answers query i (doc text embeds the query text)."""
    docs = tuple(
        Document(
            id=f"d{i}",
            text=f"{WORDS[i]} {WORDS[i + 1]} body{i}",
            corpus_id=task_id,
        )
        for i in range(n_docs)
    )
    queries = tuple(
        Query(id=f"q{i}", text=f"{WORDS[i]} {WORDS[i + 1]}", task_id=task_id)
        for i in range(n_docs // 2)
    )
    qrels = Qrels({(f"q{i}", f"d{i}"): 1 for i in range(n_docs // 2)})
    instruction = Instruction(
        text=f"retrieve the matching snippet from {task_id}",
        intent="answer",
        domain=task_id,
        unit="snippet",
    )
    return Task(
        id=task_id, corpus=docs, queries=queries, qrels=qrels, instructions=(instruction,)
    )


@pytest.fixture
def small_dual_params():
    return init_dual_params(0, dim=6, num_buckets=48)


@pytest.fixture
def small_cross_params():
    return init_cross_params(0, dim=6, hidden_dim=5, num_buckets=48)


@pytest.fixture
def toy_task():
    return tiny_task()
