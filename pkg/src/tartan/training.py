"""Training losses with exact analytic gradients, the optimization loop and
the cross-to-dual distillation refresh.

The dual encoder trains with a softmax contrastive loss whose denominator
runs over every document in the mini-batch (all items' positives and
explicit negatives); logits are divided by the softmax temperature.  The
cross encoder trains with mean-reduced binary cross entropy.  Both
gradients are exact derivatives, verified against central finite
differences in the test suite.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Literal, Sequence

import numpy as np

from .encoder import (
    CrossParams,
    DualParams,
    cross_forward,
    cross_input,
    document_text,
    featurize,
    init_cross_params,
    init_dual_params,
    zeros_like_params,
    DEFAULT_DIM,
    DEFAULT_HIDDEN_DIM,
    DEFAULT_NUM_BUCKETS,
)
from .errors import DataError
from .hashing import make_rng
from .mining import sample_negatives
from .schema import (
    Document,
    InstructionLike,
    NO_INSTRUCTION,
    Query,
    Task,
    TrainingInstance,
    compose_input,
)

PROB_CLAMP = 1e-12  # probabilities are clamped before logs

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class DualItem:
    instruction: InstructionLike
    query: Query
    positive: Document
    negatives: tuple[Document, ...] = ()


@dataclass(frozen=True)
class DualBatch:
    """Contrastive batch; all documents across items form the in-batch pool."""

    items: tuple[DualItem, ...]

    def __post_init__(self):
        if not self.items:
            raise DataError("empty_batch", "dual batch needs at least one item")
        for item in self.items:
            clash = {
                n.id
                for n in item.negatives
                if n.corpus_id == item.positive.corpus_id and n.id == item.positive.id
            }
            if clash:
                raise DataError(
                    "conflicting_labels",
                    f"query {item.query.id}: positive also listed as negative",
                )


@dataclass(frozen=True)
class CrossItem:
    instruction: InstructionLike
    query: Query
    doc: Document
    label: int

    def __post_init__(self):
        if self.label not in (0, 1):
            raise DataError("bad_label", f"label must be 0 or 1, got {self.label}")


@dataclass(frozen=True)
class CrossBatch:
    items: tuple[CrossItem, ...]

    def __post_init__(self):
        if not self.items:
            raise DataError("empty_batch", "cross batch needs at least one item")


@dataclass
class TrainConfig:
    """Optimization and negative-composition settings.

    The per-positive negative count defaults to 5 with 10% of negatives
    drawn from the hard/unfollowing pools and the rest sampled at random;
    a 7-negative variant is also in circulation, so the count stays a
    plain config knob.
    """

    batch_size: int = 16
    negatives_per_positive: int = 5
    hard_or_uf_fraction: float = 0.1
    pos_neg_ratio_cross: int = 4
    learning_rate: float = 1e-3
    warmup_steps: int = 100
    max_steps: int = 500
    seed: int = 0
    temperature: float = 0.05
    uf_max_fraction: float = 0.2

    def __post_init__(self):
        if not (0.0 <= self.hard_or_uf_fraction <= 1.0):
            raise DataError("bad_fraction", "hard_or_uf_fraction must be in [0, 1]")
        if not (0.0 <= self.uf_max_fraction <= 1.0):
            raise DataError("bad_fraction", "uf_max_fraction must be in [0, 1]")
        if self.batch_size < 1 or self.negatives_per_positive < 1:
            raise DataError("bad_count", "batch size and negative count must be >= 1")
        if self.temperature <= 0:
            raise DataError("bad_temperature", "temperature must be positive")


# ---------------------------------------------------------------------------
# Embedding forward/backward shared by the dual loss
# ---------------------------------------------------------------------------


@dataclass
class _EmbedCache:
    feats: object
    pooled: np.ndarray
    norm: float
    z: np.ndarray


def _embed_with_cache(params: DualParams, text: str) -> _EmbedCache:
    feats = featurize(text, num_buckets=params.num_buckets)
    if len(feats) == 0:
        pooled = params.empty_row
    else:
        weights = feats.counts / feats.counts.sum()
        pooled = weights @ params.embedding_table[feats.ids]
    projected = pooled @ params.projection
    norm = float(np.linalg.norm(projected))
    if not np.isfinite(norm) or norm == 0.0:
        from .errors import NumericError

        raise NumericError("numeric_overflow", "embedding norm is zero or non-finite")
    return _EmbedCache(feats=feats, pooled=pooled, norm=norm, z=projected / norm)


def _backprop_embed(
    params: DualParams, cache: _EmbedCache, g_z: np.ndarray, grads: DualParams
) -> None:
    # z = (u @ P) / ||u @ P||; pull g_z back through normalize, project, pool.
    g_p = (g_z - (g_z @ cache.z) * cache.z) / cache.norm
    grads.projection += np.outer(cache.pooled, g_p)
    g_u = params.projection @ g_p
    feats = cache.feats
    if len(feats) == 0:
        grads.empty_row += g_u
    else:
        weights = feats.counts / feats.counts.sum()
        grads.embedding_table[feats.ids] += np.outer(weights, g_u)


def dual_loss_grad(
    params: DualParams, batch: DualBatch, include_title: bool = False
) -> tuple[float, DualParams]:
    """Mean in-batch softmax cross entropy and its exact gradients.

    For item i the denominator runs over every document in the batch
    (positives and explicit negatives of all items); logits are scores
    divided by the temperature.
    """
    items = batch.items
    pool_texts: list[str] = []
    pos_index: list[int] = []
    for item in items:
        pos_index.append(len(pool_texts))
        pool_texts.append(document_text(item.positive, include_title))
        pool_texts.extend(document_text(n, include_title) for n in item.negatives)

    text_cache: dict[str, _EmbedCache] = {}

    def cached(text: str) -> _EmbedCache:
        hit = text_cache.get(text)
        if hit is None:
            hit = _embed_with_cache(params, text)
            text_cache[text] = hit
        return hit

    q_caches = [
        cached(compose_input(item.instruction, item.query)) for item in items
    ]
    d_caches = [cached(text) for text in pool_texts]

    zq = np.stack([c.z for c in q_caches])  # (b, dim)
    zd = np.stack([c.z for c in d_caches])  # (P, dim)
    logits = (zq @ zd.T) / params.temperature  # (b, P)

    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    softmax = exp / exp.sum(axis=1, keepdims=True)
    log_probs = shifted - np.log(exp.sum(axis=1, keepdims=True))

    b = len(items)
    loss = -float(np.mean([log_probs[i, pos_index[i]] for i in range(b)]))

    d_logits = softmax.copy()
    for i in range(b):
        d_logits[i, pos_index[i]] -= 1.0
    d_scores = d_logits / (params.temperature * b)

    g_zq = d_scores @ zd  # (b, dim)
    g_zd = d_scores.T @ zq  # (P, dim)

    grads = zeros_like_params(params)
    for i, cache in enumerate(q_caches):
        _backprop_embed(params, cache, g_zq[i], grads)
    for j, cache in enumerate(d_caches):
        _backprop_embed(params, cache, g_zd[j], grads)
    return loss, grads


def cross_loss_grad(
    params: CrossParams, batch: CrossBatch, include_title: bool = False
) -> tuple[float, CrossParams]:
    """Mean binary cross entropy over items and its exact gradients."""
    items = batch.items
    n = len(items)
    grads = zeros_like_params(params)
    total = 0.0
    for item in items:
        text = cross_input(item.instruction, item.query, item.doc, include_title)
        prob, (feats, pooled, hidden) = cross_forward(params, text)
        clamped = min(max(prob, PROB_CLAMP), 1.0 - PROB_CLAMP)
        if item.label == 1:
            total -= math.log(clamped)
        else:
            total -= math.log(1.0 - clamped)

        d_logit = (prob - item.label) / n
        grads.output_w += d_logit * hidden
        grads.output_b += d_logit
        g_hidden = d_logit * params.output_w
        g_pre = g_hidden * (1.0 - hidden * hidden)
        grads.hidden_w += np.outer(pooled, g_pre)
        grads.hidden_b += g_pre
        if len(feats) > 0:
            g_pooled = params.hidden_w @ g_pre
            weights = feats.counts / feats.counts.sum()
            grads.embedding_table[feats.ids] += np.outer(weights, g_pooled)
    return total / n, grads


# ---------------------------------------------------------------------------
# Optimizer and training loop
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def for_params(cls, params) -> "AdamState":
        return cls(
            m={k: np.zeros_like(a) for k, a in params.tensors().items()},
            v={k: np.zeros_like(a) for k, a in params.tensors().items()},
        )


def adam_update(params, grads, state: AdamState, lr: float) -> None:
    state.step += 1
    t = state.step
    for name, tensor in params.tensors().items():
        g = getattr(grads, name)
        m = state.m[name]
        v = state.v[name]
        m *= ADAM_BETA1
        m += (1 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1 - ADAM_BETA2) * g * g
        m_hat = m / (1 - ADAM_BETA1**t)
        v_hat = v / (1 - ADAM_BETA2**t)
        tensor -= lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)


def warmup_lr(base_lr: float, step: int, warmup_steps: int) -> float:
    """Linear warmup; ``step`` is 1-based."""
    if warmup_steps <= 0:
        return base_lr
    return base_lr * min(1.0, step / warmup_steps)


@dataclass
class TrainLog:
    entries: list[dict] = field(default_factory=list)
    skipped_instances: int = 0

    def record(self, step: int, loss: float, lr: float) -> None:
        self.entries.append({"step": step, "loss": loss, "lr": lr})


def write_training_log(path: str | Path, log: TrainLog) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for entry in log.entries:
            fh.write(json.dumps(entry, sort_keys=True))
            fh.write("\n")


def _doc_lookup(tasks: Sequence[Task]) -> dict[str, dict[str, Document]]:
    return {task.id: task.doc_map() for task in tasks}


def _pick_instruction(task: Task, use_instructions: bool, rng) -> InstructionLike:
    # Paraphrases of a task's intent are sampled uniformly during training.
    if not use_instructions or not task.instructions:
        return NO_INSTRUCTION
    if len(task.instructions) == 1:
        return task.instructions[0]
    return task.instructions[int(rng.integers(len(task.instructions)))]


def train(
    kind: Literal["dual", "cross"],
    config: TrainConfig,
    data: Sequence[TrainingInstance],
    tasks: Sequence[Task],
    *,
    use_instructions: bool = True,
    init_params: DualParams | CrossParams | None = None,
    dim: int = DEFAULT_DIM,
    num_buckets: int = DEFAULT_NUM_BUCKETS,
    hidden_dim: int = DEFAULT_HIDDEN_DIM,
    include_title: bool = False,
):
    """Seeded mini-batch training; a pure function of (config, data, seed).

    Instances with an empty positive pool are skipped and counted in the
    log.  ``init_params`` continues from an existing checkpoint (used after
    a distillation refresh); otherwise parameters are freshly initialized
    from the config seed.
    """
    if not data:
        raise DataError("empty_data", "no training instances")
    if kind not in ("dual", "cross"):
        raise DataError("bad_kind", f"unknown model kind {kind!r}")

    task_by_id = {task.id: task for task in tasks}
    docs = _doc_lookup(tasks)
    log = TrainLog()

    usable: list[TrainingInstance] = []
    for inst in data:
        if not inst.positives:
            log.skipped_instances += 1
            continue
        if inst.task_id not in task_by_id:
            raise DataError("unknown_task", inst.task_id)
        usable.append(inst)
    if not usable:
        raise DataError("empty_data", "every instance had an empty positive pool")

    if init_params is not None:
        params = _copy_params(init_params)
    elif kind == "dual":
        params = init_dual_params(
            config.seed, dim=dim, num_buckets=num_buckets,
            temperature=config.temperature,
        )
    else:
        params = init_cross_params(
            config.seed, dim=dim, hidden_dim=hidden_dim, num_buckets=num_buckets
        )
    if config.max_steps <= 0:
        return params, log

    rng = make_rng(config.seed, "train", kind)
    state = AdamState.for_params(params)
    order: list[int] = []
    for step in range(1, config.max_steps + 1):
        batch_instances = []
        while len(batch_instances) < config.batch_size:
            if not order:
                order = list(rng.permutation(len(usable)))
            batch_instances.append(usable[order.pop(0)])

        if kind == "dual":
            batch = _make_dual_batch(
                batch_instances, task_by_id, docs, config, use_instructions, rng
            )
            loss, grads = dual_loss_grad(params, batch, include_title)
        else:
            batch = _make_cross_batch(
                batch_instances, task_by_id, docs, config, use_instructions, rng
            )
            loss, grads = cross_loss_grad(params, batch, include_title)

        lr = warmup_lr(config.learning_rate, step, config.warmup_steps)
        adam_update(params, grads, state, lr)
        log.record(step, loss, lr)
    return params, log


def _copy_params(params):
    kwargs = {k: a.copy() for k, a in params.tensors().items()}
    if isinstance(params, DualParams):
        return DualParams(
            num_buckets=params.num_buckets, dim=params.dim,
            temperature=params.temperature, **kwargs,
        )
    return CrossParams(
        num_buckets=params.num_buckets, dim=params.dim,
        hidden_dim=params.hidden_dim, **kwargs,
    )


def _resolve(docs, corpus_id: str, doc_id: str) -> Document:
    try:
        return docs[corpus_id][doc_id]
    except KeyError:
        raise DataError("unknown_doc", f"{corpus_id}::{doc_id}") from None


def _make_dual_batch(
    instances, task_by_id, docs, config: TrainConfig, use_instructions: bool, rng
) -> DualBatch:
    items = []
    for inst in instances:
        task = task_by_id[inst.task_id]
        query = task.query_map()[inst.query_id]
        instruction = _pick_instruction(task, use_instructions, rng)
        pos_id = inst.positives[int(rng.integers(len(inst.positives)))]
        positive = _resolve(docs, inst.task_id, pos_id)
        negatives = sample_negatives(
            inst,
            task,
            docs,
            n_total=config.negatives_per_positive,
            rng=rng,
            hard_fraction=config.hard_or_uf_fraction,
            uf_max_fraction=config.uf_max_fraction,
        )
        items.append(
            DualItem(
                instruction=instruction,
                query=query,
                positive=positive,
                negatives=tuple(negatives),
            )
        )
    return DualBatch(items=tuple(items))


def _make_cross_batch(
    instances, task_by_id, docs, config: TrainConfig, use_instructions: bool, rng
) -> CrossBatch:
    # One positive item plus pos_neg_ratio_cross negative items per instance.
    items = []
    for inst in instances:
        task = task_by_id[inst.task_id]
        query = task.query_map()[inst.query_id]
        instruction = _pick_instruction(task, use_instructions, rng)
        pos_id = inst.positives[int(rng.integers(len(inst.positives)))]
        items.append(
            CrossItem(
                instruction=instruction,
                query=query,
                doc=_resolve(docs, inst.task_id, pos_id),
                label=1,
            )
        )
        negatives = sample_negatives(
            inst,
            task,
            docs,
            n_total=config.pos_neg_ratio_cross,
            rng=rng,
            hard_fraction=config.hard_or_uf_fraction,
            uf_max_fraction=config.uf_max_fraction,
        )
        for neg in negatives:
            items.append(
                CrossItem(instruction=instruction, query=query, doc=neg, label=0)
            )
    return CrossBatch(items=tuple(items))


# ---------------------------------------------------------------------------
# Distillation refresh
# ---------------------------------------------------------------------------


@dataclass
class RefreshReport:
    promoted: int = 0
    demoted: int = 0
    flagged: list[tuple[str, str]] = field(default_factory=list)


def distill_refresh(
    cross_params: CrossParams,
    data: Sequence[TrainingInstance],
    tasks: Sequence[Task],
    threshold: float = 0.1,
    promote_threshold: float = 0.9,
    include_title: bool = False,
) -> tuple[list[TrainingInstance], RefreshReport]:
    """Relabel instance pools with a trained cross encoder.

    Own-corpus candidates (positives, hard negatives and materialized
    random negatives) are rescored with the task's first instruction:
    scores below ``threshold`` land in the hard-negative pool, scores above
    ``promote_threshold`` land in the positive pool (rescuing false
    negatives), everything in between keeps its current membership.
    Unfollowing negatives come from foreign corpora and are left alone.
    A refresh that would empty an instance's positive pool leaves the
    instance unchanged and flags it in the report.
    """
    if not (0.0 < threshold < 1.0):
        raise DataError("bad_threshold", "threshold must be in (0, 1)")
    from .encoder import score_cross

    task_by_id = {task.id: task for task in tasks}
    docs = _doc_lookup(tasks)
    report = RefreshReport()
    refreshed: list[TrainingInstance] = []
    for inst in data:
        task = task_by_id[inst.task_id]
        query = task.query_map()[inst.query_id]
        instruction = task.instructions[0] if task.instructions else NO_INSTRUCTION

        membership: dict[str, str] = {}
        for doc_id in inst.positives:
            membership.setdefault(doc_id, "pos")
        for doc_id in inst.hard_negatives:
            membership.setdefault(doc_id, "hard")
        for doc_id in inst.random_negatives:
            membership.setdefault(doc_id, "random")

        new_pools: dict[str, list[str]] = {"pos": [], "hard": [], "random": []}
        for doc_id, pool in membership.items():
            doc = _resolve(docs, inst.task_id, doc_id)
            score = score_cross(cross_params, instruction, query, doc, include_title)
            if score < threshold:
                target = "hard"
            elif score > promote_threshold:
                target = "pos"
            else:
                target = pool
            if target == "pos" and pool != "pos":
                report.promoted += 1
            if target == "hard" and pool == "pos":
                report.demoted += 1
            new_pools[target].append(doc_id)

        if not new_pools["pos"]:
            report.flagged.append((inst.task_id, inst.query_id))
            refreshed.append(inst)
            continue
        refreshed.append(
            replace(
                inst,
                positives=tuple(new_pools["pos"]),
                hard_negatives=tuple(new_pools["hard"]),
                random_negatives=tuple(new_pools["random"]),
            )
        )
    return refreshed, report
