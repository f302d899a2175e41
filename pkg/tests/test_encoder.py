import math

import numpy as np
import pytest

from tartan import (
    Document,
    Instruction,
    NO_INSTRUCTION,
    NumericError,
    Query,
    compose_input,
    embed,
    featurize,
    init_cross_params,
    init_dual_params,
    score_cross,
    score_dual,
    tokenize,
)
from tartan.encoder import cross_input, document_text, embed_texts, zeros_like_params
from tartan.hashing import make_rng

from conftest import WORDS, random_text


class TestFeaturize:
    def test_empty_text(self):
        feats = featurize("", num_buckets=64)
        assert len(feats) == 0

    def test_separator_only_text(self):
        assert len(featurize("  ...  ", num_buckets=64)) == 0

    def test_case_folding_collapses_tokens(self):
        feats = featurize("The THE the", num_buckets=1 << 16)
        # one unigram bucket with count 3; the repeated bigram contributes
        # count 2 to its own bucket
        counts = sorted(feats.counts.tolist())
        assert counts == [2, 3]

    def test_separator_runs_collapse(self):
        a = featurize("a b", num_buckets=64)
        b = featurize("a  b", num_buckets=64)
        assert np.array_equal(a.ids, b.ids)
        assert np.array_equal(a.counts, b.counts)

    def test_ids_sorted_and_counts_positive(self):
        rng = make_rng(0, "featurize")
        for _ in range(50):
            feats = featurize(random_text(rng, 12), num_buckets=256)
            assert np.all(np.diff(feats.ids) > 0)
            assert np.all(feats.counts >= 1)
            assert len(feats.ids) == len(feats.counts)

    def test_max_len_truncates_tokens(self):
        long = " ".join(WORDS[i % len(WORDS)] for i in range(40))
        short = " ".join(WORDS[i % len(WORDS)] for i in range(3))
        truncated = featurize(long, max_len=3, num_buckets=1 << 16)
        direct = featurize(short, num_buckets=1 << 16)
        assert np.array_equal(truncated.ids, direct.ids)
        assert np.array_equal(truncated.counts, direct.counts)

    def test_total_count_matches_unigrams_plus_bigrams(self):
        text = "a b c d"
        feats = featurize(text, num_buckets=1 << 16)
        assert feats.counts.sum() == 4 + 3

    def test_tokenizer_splits_on_non_alphanumeric(self):
        assert tokenize("don't stop-me_now") == ["don", "t", "stop", "me", "now"]


def oracle_embed(params, text):
    """Straight-line scalar recomputation: mean-pool, project, normalize."""
    feats = featurize(text, num_buckets=params.num_buckets)
    dim = params.dim
    if len(feats) == 0:
        pooled = [float(params.empty_row[j]) for j in range(dim)]
    else:
        total = float(sum(int(c) for c in feats.counts))
        pooled = []
        for j in range(dim):
            acc = 0.0
            for fid, count in zip(feats.ids, feats.counts):
                acc += int(count) / total * float(params.embedding_table[int(fid), j])
            pooled.append(acc)
    projected = []
    for k in range(dim):
        acc = 0.0
        for j in range(dim):
            acc += pooled[j] * float(params.projection[j, k])
        projected.append(acc)
    norm = math.sqrt(sum(v * v for v in projected))
    return [v / norm for v in projected]


def oracle_cross(params, text):
    feats = featurize(text, num_buckets=params.num_buckets)
    dim, hidden_dim = params.dim, params.hidden_dim
    if len(feats) == 0:
        pooled = [0.0] * dim
    else:
        total = float(sum(int(c) for c in feats.counts))
        pooled = []
        for j in range(dim):
            acc = 0.0
            for fid, count in zip(feats.ids, feats.counts):
                acc += int(count) / total * float(params.embedding_table[int(fid), j])
            pooled.append(acc)
    hidden = []
    for h in range(hidden_dim):
        acc = float(params.hidden_b[h])
        for j in range(dim):
            acc += pooled[j] * float(params.hidden_w[j, h])
        hidden.append(math.tanh(acc))
    logit = float(params.output_b)
    for h in range(hidden_dim):
        logit += hidden[h] * float(params.output_w[h])
    return 1.0 / (1.0 + math.exp(-logit))


class TestEmbed:
    def test_unit_norm(self, small_dual_params):
        rng = make_rng(1, "texts")
        for _ in range(20):
            emb = embed(small_dual_params, random_text(rng, 8))
            assert abs(np.linalg.norm(emb.values) - 1.0) < 1e-6

    def test_deterministic(self, small_dual_params):
        a = embed(small_dual_params, "alpha beta gamma")
        b = embed(small_dual_params, "alpha beta gamma")
        assert np.array_equal(a.values, b.values)

    def test_identity_projection_single_feature(self):
        params = init_dual_params(0, dim=6, num_buckets=48)
        params.projection = np.eye(6)
        feats = featurize("alpha", num_buckets=48)
        assert len(feats) == 1  # one unigram, no bigram
        row = params.embedding_table[int(feats.ids[0])]
        emb = embed(params, "alpha")
        np.testing.assert_allclose(emb.values, row / np.linalg.norm(row), atol=1e-12)

    def test_empty_text_uses_learned_fallback_row(self, small_dual_params):
        emb = embed(small_dual_params, "")
        expected = small_dual_params.empty_row @ small_dual_params.projection
        expected = expected / np.linalg.norm(expected)
        np.testing.assert_allclose(emb.values, expected, atol=1e-12)

    def test_zero_projection_raises_numeric_error(self, small_dual_params):
        small_dual_params.projection = np.zeros_like(small_dual_params.projection)
        with pytest.raises(NumericError) as exc:
            embed(small_dual_params, "alpha beta")
        assert exc.value.code == "numeric_overflow"

    def test_embed_texts_order_independent_of_threads(self, small_dual_params):
        rng = make_rng(2, "texts")
        texts = [random_text(rng, 6) for _ in range(16)]
        serial = embed_texts(small_dual_params, texts, threads=1)
        threaded = embed_texts(small_dual_params, texts, threads=4)
        assert serial.tobytes() == threaded.tobytes()


class TestScoreDual:
    def test_identical_text_scores_one(self, small_dual_params):
        query = Query(id="q", text="alpha beta", task_id="t")
        doc = Document(id="d", text="alpha beta", corpus_id="t")
        assert score_dual(small_dual_params, NO_INSTRUCTION, query, doc) == pytest.approx(
            1.0, abs=1e-6
        )

    def test_score_bounded(self, small_dual_params):
        rng = make_rng(3, "pairs")
        instruction = Instruction(text="find answer", intent="a", domain="d", unit="u")
        for _ in range(50):
            query = Query(id="q", text=random_text(rng, 5), task_id="t")
            doc = Document(id="d", text=random_text(rng, 9), corpus_id="t")
            score = score_dual(small_dual_params, instruction, query, doc)
            assert -1.0 - 1e-9 <= score <= 1.0 + 1e-9

    def test_matches_scalar_loop_oracle(self):
        params = init_dual_params(0, dim=7, num_buckets=64)
        instruction = Instruction(text="find answer", intent="a", domain="d", unit="u")
        query = Query(id="q", text="x", task_id="t")
        doc = Document(id="d", text="y", corpus_id="t")
        zq = oracle_embed(params, compose_input(instruction, query))
        zd = oracle_embed(params, doc.text)
        expected = sum(a * b for a, b in zip(zq, zd))
        assert score_dual(params, instruction, query, doc) == pytest.approx(
            expected, abs=1e-10
        )

    def test_oracle_agreement_on_many_random_inputs(self):
        rng = make_rng(4, "oracle")
        params = init_dual_params(1, dim=5, num_buckets=32)
        instruction = Instruction(text="look it up", intent="a", domain="d", unit="u")
        for i in range(100):
            query = Query(id="q", text=random_text(rng, 4), task_id="t")
            doc = Document(id="d", text=random_text(rng, 7), corpus_id="t")
            zq = oracle_embed(params, compose_input(instruction, query))
            zd = oracle_embed(params, doc.text)
            expected = sum(a * b for a, b in zip(zq, zd))
            got = score_dual(params, instruction, query, doc)
            assert got == pytest.approx(expected, abs=1e-10), i

    def test_title_ignored_by_default_but_toggleable(self, small_dual_params):
        query = Query(id="q", text="alpha beta", task_id="t")
        plain = Document(id="d", text="gamma delta", corpus_id="t")
        titled = Document(id="d", text="gamma delta", corpus_id="t", title="alpha")
        s_plain = score_dual(small_dual_params, NO_INSTRUCTION, query, plain)
        s_titled = score_dual(small_dual_params, NO_INSTRUCTION, query, titled)
        assert s_plain == s_titled
        s_with_title = score_dual(
            small_dual_params, NO_INSTRUCTION, query, titled, include_title=True
        )
        assert s_with_title != s_plain


class TestScoreCross:
    def test_zero_params_give_exactly_half(self):
        params = zeros_like_params(init_cross_params(0, dim=6, hidden_dim=4, num_buckets=48))
        query = Query(id="q", text="alpha", task_id="t")
        doc = Document(id="d", text="beta", corpus_id="t")
        instruction = Instruction(text="find", intent="a", domain="d", unit="u")
        assert score_cross(params, instruction, query, doc) == 0.5

    def test_open_interval(self, small_cross_params):
        rng = make_rng(5, "cross")
        instruction = Instruction(text="find", intent="a", domain="d", unit="u")
        for _ in range(50):
            query = Query(id="q", text=random_text(rng, 4), task_id="t")
            doc = Document(id="d", text=random_text(rng, 8), corpus_id="t")
            prob = score_cross(small_cross_params, instruction, query, doc)
            assert 0.0 < prob < 1.0

    def test_matches_scalar_loop_oracle(self):
        params = init_cross_params(0, dim=6, hidden_dim=5, num_buckets=64)
        instruction = Instruction(text="find answer", intent="a", domain="d", unit="u")
        query = Query(id="q", text="x", task_id="t")
        doc = Document(id="d", text="y", corpus_id="t")
        expected = oracle_cross(params, cross_input(instruction, query, doc))
        assert score_cross(params, instruction, query, doc) == pytest.approx(
            expected, abs=1e-10
        )

    def test_oracle_agreement_on_many_random_inputs(self):
        rng = make_rng(6, "oracle")
        params = init_cross_params(2, dim=5, hidden_dim=4, num_buckets=32)
        instruction = Instruction(text="match this", intent="a", domain="d", unit="u")
        for i in range(100):
            query = Query(id="q", text=random_text(rng, 4), task_id="t")
            doc = Document(id="d", text=random_text(rng, 6), corpus_id="t")
            expected = oracle_cross(params, cross_input(instruction, query, doc))
            got = score_cross(params, instruction, query, doc)
            assert got == pytest.approx(expected, abs=1e-10), i

    def test_output_bias_increase_raises_probability(self, small_cross_params):
        query = Query(id="q", text="alpha beta", task_id="t")
        doc = Document(id="d", text="gamma", corpus_id="t")
        instruction = Instruction(text="find", intent="a", domain="d", unit="u")
        base = score_cross(small_cross_params, instruction, query, doc)
        small_cross_params.output_b = small_cross_params.output_b + 0.5
        bumped = score_cross(small_cross_params, instruction, query, doc)
        assert bumped > base

    def test_triple_concatenation_single_space(self):
        instruction = Instruction(text="find it", intent="a", domain="d", unit="u")
        query = Query(id="q", text="my query", task_id="t")
        doc = Document(id="d", text="the doc", corpus_id="t")
        assert cross_input(instruction, query, doc) == "find it my query the doc"
        assert cross_input(NO_INSTRUCTION, query, doc) == "my query the doc"


class TestInit:
    def test_seeded_init_reproducible(self):
        a = init_dual_params(7, dim=6, num_buckets=48)
        b = init_dual_params(7, dim=6, num_buckets=48)
        for name in a.TENSOR_FIELDS:
            assert np.array_equal(getattr(a, name), getattr(b, name))

    def test_different_seeds_differ(self):
        a = init_dual_params(7, dim=6, num_buckets=48)
        b = init_dual_params(8, dim=6, num_buckets=48)
        assert not np.array_equal(a.embedding_table, b.embedding_table)

    def test_init_bound(self):
        params = init_dual_params(0, dim=16, num_buckets=128)
        bound = 1.0 / np.sqrt(16)
        assert np.abs(params.embedding_table).max() <= bound
        assert np.abs(params.projection).max() <= bound
