import pytest

from tartan import (
    DataError,
    Document,
    Instruction,
    NO_INSTRUCTION,
    Qrels,
    Query,
    Task,
    TrainingInstance,
    compose_input,
    load_task,
    save_task,
    unify_dataset,
    validate_task,
)
from tartan.schema import read_qrels, write_qrels

from conftest import tiny_task


def make_query(text="who wrote hamlet"):
    return Query(id="q1", text=text, task_id="t1")


class TestTypes:
    def test_instruction_requires_nonempty_text(self):
        with pytest.raises(DataError):
            Instruction(text="   ", intent="a", domain="b", unit="c")

    def test_instruction_requires_all_facets(self):
        with pytest.raises(DataError):
            Instruction(text="find it", intent="a", domain="", unit="c")

    def test_document_requires_text(self):
        with pytest.raises(DataError):
            Document(id="d1", text="", corpus_id="c1")

    def test_query_requires_text(self):
        with pytest.raises(DataError):
            make_query(text="")

    def test_qrels_rejects_negative_grades(self):
        with pytest.raises(DataError):
            Qrels({("q1", "d1"): -1})

    def test_training_instance_rejects_pool_overlap(self):
        with pytest.raises(DataError) as exc:
            TrainingInstance(
                task_id="t1",
                query_id="q1",
                positives=("d1",),
                hard_negatives=("d1", "d2"),
            )
        assert exc.value.code == "positive_negative_overlap"

    def test_training_instance_rejects_own_corpus_unfollowing(self):
        with pytest.raises(DataError) as exc:
            TrainingInstance(
                task_id="t1",
                query_id="q1",
                positives=("d1",),
                unfollowing_negatives=(("t1", "d9"),),
            )
        assert exc.value.code == "uf_same_corpus"


class TestComposeInput:
    def test_single_space_join(self):
        instruction = Instruction(
            text="Retrieve a passage that answers this question.",
            intent="answer",
            domain="general",
            unit="paragraph",
        )
        assert (
            compose_input(instruction, make_query())
            == "Retrieve a passage that answers this question. who wrote hamlet"
        )

    def test_sentinel_is_identity(self):
        assert compose_input(NO_INSTRUCTION, make_query()) == "who wrote hamlet"

    def test_sentinel_is_singleton_and_not_a_string(self):
        from tartan.schema import NoInstruction

        assert NoInstruction() is NO_INSTRUCTION
        assert not isinstance(NO_INSTRUCTION, str)

    def test_injective_on_space_free_texts(self):
        # (instruction, query) pairs of space-free tokens never collide
        texts = ["abc", "abd", "a", "bc", "xyz0"]
        seen = {}
        for ins_text in texts:
            ins = Instruction(text=ins_text, intent="i", domain="d", unit="u")
            for q_text in texts:
                composed = compose_input(ins, make_query(q_text))
                assert composed not in seen, (ins_text, q_text)
                seen[composed] = (ins_text, q_text)


class TestUnifyDataset:
    def test_bijective_pairs(self):
        task = unify_dataset(
            [("long text one", "summary one"), ("long text two", "summary two")],
            rule="summarization_target_as_gold",
        )
        assert len(task.corpus) == 2
        assert len(task.queries) == 2
        assert len(task.qrels.entries) == 2
        assert validate_task(task).ok()

    def test_shared_target_deduplicates(self):
        task = unify_dataset(
            [("text one", "same summary"), ("text two", "same summary")],
            rule="summarization_target_as_gold",
        )
        assert len(task.corpus) == 1
        gold_ids = {task.qrels.positives(q.id)[0] for q in task.queries}
        assert gold_ids == {task.corpus[0].id}

    def test_code_rule_maps_comment_to_query(self):
        task = unify_dataset(
            [("sort a list", "def s(x): return sorted(x)")],
            rule="code_comment_as_query",
        )
        assert task.queries[0].text == "sort a list"
        assert task.corpus[0].text == "def s(x): return sorted(x)"

    def test_empty_pair_side_reports_index(self):
        with pytest.raises(DataError) as exc:
            unify_dataset(
                [("ok", "ok"), ("bad", "")], rule="qa_context_as_gold"
            )
        assert "1" in str(exc.value)

    def test_empty_pairs_rejected(self):
        with pytest.raises(DataError):
            unify_dataset([], rule="qa_context_as_gold")

    def test_unknown_rule_rejected(self):
        with pytest.raises(DataError):
            unify_dataset([("a", "b")], rule="nonsense")

    def test_output_always_validates(self):
        for rule in (
            "qa_context_as_gold",
            "summarization_target_as_gold",
            "simplification_target_as_gold",
            "code_comment_as_query",
            "question_duplicate_as_gold",
        ):
            task = unify_dataset([("src a", "tgt a"), ("src b", "tgt b")], rule=rule)
            assert validate_task(task).ok(), rule


class TestValidateTask:
    def test_well_formed_task_is_clean(self, toy_task):
        assert validate_task(toy_task).ok()

    def test_missing_instruction_reported(self, toy_task):
        from dataclasses import replace

        bad = replace(toy_task, instructions=())
        assert "missing_instruction" in validate_task(bad).codes()

    def test_dangling_qrel_reported(self, toy_task):
        from dataclasses import replace

        bad = replace(
            toy_task, qrels=Qrels({**toy_task.qrels.entries, ("q0", "nope"): 1})
        )
        assert "dangling_qrel" in validate_task(bad).codes()

    def test_query_without_positive_reported(self, toy_task):
        from dataclasses import replace

        entries = dict(toy_task.qrels.entries)
        entries.pop(("q0", "d0"))
        bad = replace(toy_task, qrels=Qrels(entries))
        assert "query_without_positive" in validate_task(bad).codes()


class TestFileFormats:
    def test_task_round_trip(self, tmp_path, toy_task):
        save_task(toy_task, tmp_path)
        loaded = load_task(tmp_path / toy_task.id)
        assert loaded == toy_task

    def test_round_trip_is_byte_identical(self, tmp_path, toy_task):
        dir_a = tmp_path / "a"
        dir_b = tmp_path / "b"
        save_task(toy_task, dir_a)
        save_task(load_task(dir_a / toy_task.id), dir_b)
        for name in ("corpus.jsonl", "queries.jsonl", "qrels.tsv", "instructions.jsonl"):
            assert (dir_a / toy_task.id / name).read_bytes() == (
                dir_b / toy_task.id / name
            ).read_bytes()

    def test_qrels_three_column_form(self, tmp_path):
        path = tmp_path / "qrels.tsv"
        path.write_text("q1\td1\t2\nq2\td2\t0\n")
        qrels = read_qrels(path)
        assert qrels.entries == {("q1", "d1"): 2, ("q2", "d2"): 0}

    def test_qrels_header_detected_and_skipped(self, tmp_path):
        path = tmp_path / "qrels.tsv"
        path.write_text("query-id\t0\tcorpus-id\tscore\nq1\t0\td1\t1\n")
        qrels = read_qrels(path)
        assert qrels.entries == {("q1", "d1"): 1}

    def test_qrels_write_read_round_trip(self, tmp_path):
        qrels = Qrels({("q1", "d1"): 1, ("q2", "d9"): 3})
        path = tmp_path / "qrels.tsv"
        write_qrels(path, qrels)
        assert read_qrels(path).entries == qrels.entries

    def test_corpus_preserves_titles_and_order(self, tmp_path):
        from tartan.schema import read_corpus, write_corpus

        docs = (
            Document(id="b", text="second", corpus_id="t", title="T2"),
            Document(id="a", text="first", corpus_id="t"),
        )
        path = tmp_path / "corpus.jsonl"
        write_corpus(path, docs)
        loaded = read_corpus(path, "t")
        assert loaded == docs

    def test_title_only_present_when_set(self, tmp_path):
        from tartan.schema import write_corpus

        path = tmp_path / "corpus.jsonl"
        write_corpus(path, [Document(id="a", text="x", corpus_id="t")])
        assert '"title"' not in path.read_text()
