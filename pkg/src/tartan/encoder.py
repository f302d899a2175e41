"""Text featurization and the two trainable scorers.

Texts are hashed into sparse bag-of-feature vectors (word unigrams and
bigrams, see :func:`featurize`); a dual encoder scores a query against a
document as the inner product of two independently computed unit-norm
embeddings, and a cross encoder jointly featurizes instruction, query and
document and maps the pooled embedding through a small feed-forward network
to a relevance probability.

Parameter containers are immutable during inference; all scoring functions
here are pure, so they can run data-parallel over documents.
"""

from __future__ import annotations

import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np

from .errors import DataError, NumericError
from .hashing import hash64, make_rng
from .schema import Document, InstructionLike, NoInstruction, Query, compose_input

# Defaults for the toy architecture.  Paper-scale pretrained encoders are
# out of scope; these keep the whole stack trainable on a laptop CPU.
DEFAULT_NUM_BUCKETS = 1 << 16
DEFAULT_DIM = 64
DEFAULT_HIDDEN_DIM = 64
DEFAULT_TEMPERATURE = 0.05
DEFAULT_MAX_LEN = 256

# Fixed seed for feature hashing so feature spaces are identical across
# runs, platforms and processes.
FEATURE_HASH_SEED = 0x7A57E1

_TOKEN_RE = re.compile(r"[0-9a-z]+")


@dataclass(frozen=True)
class FeatureIds:
    """Sparse hashed features: strictly ascending bucket ids with counts."""

    ids: np.ndarray  # int64, sorted ascending, unique
    counts: np.ndarray  # int64, all >= 1

    def __len__(self) -> int:
        return int(self.ids.shape[0])


def tokenize(text: str, max_len: int = DEFAULT_MAX_LEN) -> list[str]:
    """Lowercase and split on non-alphanumeric runs, keep first max_len tokens."""
    return _TOKEN_RE.findall(text.lower())[:max_len]


@lru_cache(maxsize=1 << 16)
def _bucket_of(feature: str, num_buckets: int) -> int:
    return hash64(feature.encode("utf-8"), seed=FEATURE_HASH_SEED) % num_buckets


@lru_cache(maxsize=1 << 15)
def _featurize_cached(text: str, max_len: int, num_buckets: int) -> FeatureIds:
    tokens = tokenize(text, max_len)
    hits: dict[int, int] = {}
    for tok in tokens:
        b = _bucket_of(tok, num_buckets)
        hits[b] = hits.get(b, 0) + 1
    for first, second in zip(tokens, tokens[1:]):
        b = _bucket_of(first + "\x1f" + second, num_buckets)
        hits[b] = hits.get(b, 0) + 1
    ids = np.array(sorted(hits), dtype=np.int64)
    counts = np.array([hits[b] for b in ids], dtype=np.int64)
    return FeatureIds(ids=ids, counts=counts)


def featurize(
    text: str,
    max_len: int = DEFAULT_MAX_LEN,
    num_buckets: int = DEFAULT_NUM_BUCKETS,
) -> FeatureIds:
    """Hash a text into bucketed unigram+bigram counts.

    Deterministic in (text, max_len, num_buckets); empty or all-separator
    text yields empty features.
    """
    return _featurize_cached(text, max_len, num_buckets)


@dataclass
class DualParams:
    """Dual-encoder parameters.

    ``empty_row`` is a learned fallback used when a text has no features;
    the zero vector cannot be normalized, so it gets a dedicated row.
    """

    embedding_table: np.ndarray  # (num_buckets, dim) float64
    empty_row: np.ndarray  # (dim,) float64
    projection: np.ndarray  # (dim, dim) float64
    num_buckets: int
    dim: int
    temperature: float = DEFAULT_TEMPERATURE

    TENSOR_FIELDS = ("embedding_table", "empty_row", "projection")

    def tensors(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self.TENSOR_FIELDS}

    def validate(self) -> None:
        if self.temperature <= 0:
            raise DataError("bad_temperature", "temperature must be positive")
        for name, arr in self.tensors().items():
            if not np.isfinite(arr).all():
                raise NumericError("numeric_overflow", f"non-finite values in {name}")


@dataclass
class CrossParams:
    """Cross-encoder parameters: pooled embedding -> tanh hidden -> logistic."""

    embedding_table: np.ndarray  # (num_buckets, dim)
    hidden_w: np.ndarray  # (dim, hidden_dim)
    hidden_b: np.ndarray  # (hidden_dim,)
    output_w: np.ndarray  # (hidden_dim,)
    output_b: np.ndarray  # () scalar
    num_buckets: int
    dim: int
    hidden_dim: int

    TENSOR_FIELDS = ("embedding_table", "hidden_w", "hidden_b", "output_w", "output_b")

    def tensors(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self.TENSOR_FIELDS}

    def validate(self) -> None:
        if self.hidden_dim < 1:
            raise DataError("bad_hidden_dim", "hidden_dim must be >= 1")
        for name, arr in self.tensors().items():
            if not np.isfinite(arr).all():
                raise NumericError("numeric_overflow", f"non-finite values in {name}")


@dataclass(frozen=True)
class Embedding:
    """Unit-norm embedding vector."""

    values: np.ndarray

    def dot(self, other: "Embedding") -> float:
        return float(self.values @ other.values)


def init_dual_params(
    seed: int,
    dim: int = DEFAULT_DIM,
    num_buckets: int = DEFAULT_NUM_BUCKETS,
    temperature: float = DEFAULT_TEMPERATURE,
) -> DualParams:
    """Uniform init in +-1/sqrt(dim) from the derived stream (seed, "dual")."""
    rng = make_rng(seed, "init", "dual")
    bound = 1.0 / np.sqrt(dim)
    return DualParams(
        embedding_table=rng.uniform(-bound, bound, size=(num_buckets, dim)),
        empty_row=rng.uniform(-bound, bound, size=dim),
        projection=rng.uniform(-bound, bound, size=(dim, dim)),
        num_buckets=num_buckets,
        dim=dim,
        temperature=temperature,
    )


def init_cross_params(
    seed: int,
    dim: int = DEFAULT_DIM,
    hidden_dim: int = DEFAULT_HIDDEN_DIM,
    num_buckets: int = DEFAULT_NUM_BUCKETS,
) -> CrossParams:
    rng = make_rng(seed, "init", "cross")
    bound = 1.0 / np.sqrt(dim)
    out_bound = 1.0 / np.sqrt(hidden_dim)
    return CrossParams(
        embedding_table=rng.uniform(-bound, bound, size=(num_buckets, dim)),
        hidden_w=rng.uniform(-bound, bound, size=(dim, hidden_dim)),
        hidden_b=np.zeros(hidden_dim),
        output_w=rng.uniform(-out_bound, out_bound, size=hidden_dim),
        output_b=np.zeros(()),
        num_buckets=num_buckets,
        dim=dim,
        hidden_dim=hidden_dim,
    )


def zeros_like_params(params):
    """A same-shaped parameter container with all tensors zeroed."""
    kwargs = {name: np.zeros_like(arr) for name, arr in params.tensors().items()}
    if isinstance(params, DualParams):
        return DualParams(
            num_buckets=params.num_buckets,
            dim=params.dim,
            temperature=params.temperature,
            **kwargs,
        )
    return CrossParams(
        num_buckets=params.num_buckets,
        dim=params.dim,
        hidden_dim=params.hidden_dim,
        **kwargs,
    )


def document_text(doc: Document, include_title: bool = False) -> str:
    """Scoring text for a document; the title participates only when enabled."""
    if include_title and doc.title:
        return doc.title + " " + doc.text
    return doc.text


def _mean_features(table: np.ndarray, feats: FeatureIds) -> np.ndarray:
    weights = feats.counts / feats.counts.sum()
    return weights @ table[feats.ids]


def embed(params: DualParams, text: str, max_len: int = DEFAULT_MAX_LEN) -> Embedding:
    """Count-weighted mean of feature rows, projected and L2-normalized."""
    feats = featurize(text, max_len, params.num_buckets)
    if len(feats) == 0:
        pooled = params.empty_row
    else:
        pooled = _mean_features(params.embedding_table, feats)
    projected = pooled @ params.projection
    norm = float(np.linalg.norm(projected))
    if not np.isfinite(norm) or norm == 0.0:
        raise NumericError("numeric_overflow", "embedding norm is zero or non-finite")
    return Embedding(values=projected / norm)


def embed_texts(
    params: DualParams,
    texts: Sequence[str],
    threads: int = 1,
    max_len: int = DEFAULT_MAX_LEN,
) -> np.ndarray:
    """Embed many texts into an (N, dim) matrix.

    Rows follow input order regardless of thread count, so results are
    byte-identical across --threads settings.
    """
    if threads <= 1 or len(texts) < 2:
        rows = [embed(params, t, max_len).values for t in texts]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(lambda t: embed(params, t, max_len).values, texts))
    if not rows:
        return np.zeros((0, params.dim))
    return np.stack(rows)


def embed_query(
    params: DualParams, instruction: InstructionLike, query: Query | str
) -> Embedding:
    """Embedding of the instruction-conditioned query."""
    return embed(params, compose_input(instruction, query))


def score_dual(
    params: DualParams,
    instruction: InstructionLike,
    query: Query | str,
    doc: Document,
    include_title: bool = False,
) -> float:
    """Inner product of the conditioned query and document embeddings.

    Both embeddings are unit-norm, so the score lies in [-1, 1].
    """
    zq = embed_query(params, instruction, query)
    zd = embed(params, document_text(doc, include_title))
    return zq.dot(zd)


def _sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + np.exp(-x))
    e = np.exp(x)
    return float(e / (1.0 + e))


def cross_forward(params: CrossParams, text: str, max_len: int = DEFAULT_MAX_LEN):
    """Forward pass returning (prob, cache) for gradient reuse.

    A featureless text pools to the zero vector; the cross path has no
    normalization, so no fallback row is needed.
    """
    feats = featurize(text, max_len, params.num_buckets)
    if len(feats) == 0:
        pooled = np.zeros(params.dim)
    else:
        pooled = _mean_features(params.embedding_table, feats)
    pre_hidden = pooled @ params.hidden_w + params.hidden_b
    hidden = np.tanh(pre_hidden)
    logit = float(hidden @ params.output_w + params.output_b)
    if not np.isfinite(logit):
        raise NumericError("numeric_overflow", "non-finite cross-encoder logit")
    prob = _sigmoid(logit)
    cache = (feats, pooled, hidden)
    return prob, cache


def cross_input(
    instruction: InstructionLike, query: Query | str, doc: Document,
    include_title: bool = False,
) -> str:
    """Single-space concatenation of instruction, query and document text."""
    query_text = query.text if isinstance(query, Query) else query
    parts = []
    if not isinstance(instruction, NoInstruction):
        parts.append(instruction.text)
    parts.append(query_text)
    parts.append(document_text(doc, include_title))
    return " ".join(parts)


def score_cross(
    params: CrossParams,
    instruction: InstructionLike,
    query: Query | str,
    doc: Document,
    include_title: bool = False,
) -> float:
    """Relevance probability in (0, 1) for the (instruction, query, doc) triple."""
    prob, _ = cross_forward(params, cross_input(instruction, query, doc, include_title))
    return prob
