import math

import numpy as np
import pytest

from tartan import (
    DataError,
    Document,
    Instruction,
    NO_INSTRUCTION,
    Query,
    TrainConfig,
    cross_loss_grad,
    distill_refresh,
    dual_loss_grad,
    init_cross_params,
    init_dual_params,
    train,
)
from tartan.training import (
    AdamState,
    CrossBatch,
    CrossItem,
    DualBatch,
    DualItem,
    TrainLog,
    adam_update,
    warmup_lr,
)
from tartan import TrainingInstance
from tartan.hashing import make_rng

from conftest import random_text, tiny_task

INSTRUCTION = Instruction(text="find the match", intent="a", domain="d", unit="u")


def make_dual_batch(rng, n_items, n_negs, with_instruction=True):
    items = []
    for i in range(n_items):
        items.append(
            DualItem(
                instruction=INSTRUCTION if with_instruction else NO_INSTRUCTION,
                query=Query(id=f"q{i}", text=random_text(rng, 4), task_id="t"),
                positive=Document(id=f"p{i}", text=random_text(rng, 6), corpus_id="t"),
                negatives=tuple(
                    Document(id=f"n{i}-{j}", text=random_text(rng, 6), corpus_id="t")
                    for j in range(n_negs)
                ),
            )
        )
    return DualBatch(items=tuple(items))


def make_cross_batch(rng, n_items):
    items = []
    for i in range(n_items):
        items.append(
            CrossItem(
                instruction=INSTRUCTION,
                query=Query(id=f"q{i}", text=random_text(rng, 4), task_id="t"),
                doc=Document(id=f"d{i}", text=random_text(rng, 6), corpus_id="t"),
                label=i % 2,
            )
        )
    return CrossBatch(items=tuple(items))


def finite_difference_check(params, loss_fn, h=1e-5, rel_tol=1e-4, max_coords=None):
    """Central finite differences vs analytic gradients, coordinate by
    coordinate; tiny gradients fall back to an absolute comparison."""
    _, grads = loss_fn(params)
    for name in params.TENSOR_FIELDS:
        flat = getattr(params, name).reshape(-1)
        gflat = getattr(grads, name).reshape(-1)
        indices = range(flat.size)
        if max_coords is not None and flat.size > max_coords:
            rng = np.random.default_rng(0)
            indices = rng.choice(flat.size, size=max_coords, replace=False)
        for i in indices:
            original = flat[i]
            flat[i] = original + h
            loss_plus, _ = loss_fn(params)
            flat[i] = original - h
            loss_minus, _ = loss_fn(params)
            flat[i] = original
            fd = (loss_plus - loss_minus) / (2 * h)
            analytic = gflat[i]
            diff = abs(analytic - fd)
            scale = max(abs(analytic), abs(fd))
            assert diff <= max(rel_tol * scale, 1e-9), (
                f"{name}[{i}]: analytic {analytic}, fd {fd}"
            )


class TestDualLoss:
    def test_single_item_no_negatives_is_zero(self, small_dual_params):
        rng = make_rng(0, "b")
        batch = make_dual_batch(rng, n_items=1, n_negs=0)
        loss, grads = dual_loss_grad(small_dual_params, batch)
        assert loss == 0.0
        for name in grads.TENSOR_FIELDS:
            np.testing.assert_allclose(getattr(grads, name), 0.0, atol=1e-12)

    def test_duplicate_text_negative_gives_ln2(self, small_dual_params):
        query = Query(id="q", text="alpha beta", task_id="t")
        positive = Document(id="p", text="gamma delta", corpus_id="t")
        clone = Document(id="n", text="gamma delta", corpus_id="t")
        batch = DualBatch(
            items=(
                DualItem(
                    instruction=NO_INSTRUCTION,
                    query=query,
                    positive=positive,
                    negatives=(clone,),
                ),
            )
        )
        loss, _ = dual_loss_grad(small_dual_params, batch)
        assert loss == pytest.approx(math.log(2.0), abs=1e-12)

    def test_positive_listed_as_own_negative_rejected(self):
        query = Query(id="q", text="alpha", task_id="t")
        doc = Document(id="p", text="gamma", corpus_id="t")
        with pytest.raises(DataError) as exc:
            DualBatch(
                items=(
                    DualItem(
                        instruction=NO_INSTRUCTION,
                        query=query,
                        positive=doc,
                        negatives=(doc,),
                    ),
                )
            )
        assert exc.value.code == "conflicting_labels"

    def test_in_batch_pool_spans_items(self, small_dual_params):
        # two items with identical query+positive: the other item's positive
        # duplicates this item's, so the softmax mass halves -> loss ln 2
        query = Query(id="q", text="alpha beta", task_id="t")
        pos = Document(id="p", text="gamma delta", corpus_id="t")
        items = tuple(
            DualItem(instruction=NO_INSTRUCTION, query=query, positive=pos, negatives=())
            for _ in range(2)
        )
        loss, _ = dual_loss_grad(small_dual_params, DualBatch(items=items))
        assert loss == pytest.approx(math.log(2.0), abs=1e-12)

    def test_temperature_divides_logits(self):
        params_hot = init_dual_params(0, dim=6, num_buckets=48, temperature=1.0)
        params_cold = init_dual_params(0, dim=6, num_buckets=48, temperature=0.05)
        rng = make_rng(1, "b")
        batch = make_dual_batch(rng, n_items=2, n_negs=2)
        loss_hot, _ = dual_loss_grad(params_hot, batch)
        loss_cold, _ = dual_loss_grad(params_cold, batch)
        assert loss_hot != loss_cold

    @pytest.mark.parametrize("seed,n_items,n_negs", [(0, 4, 2), (1, 1, 5), (2, 3, 0)])
    def test_gradients_match_finite_differences(self, seed, n_items, n_negs):
        params = init_dual_params(seed, dim=5, num_buckets=32)
        rng = make_rng(seed, "fd")
        batch = make_dual_batch(rng, n_items=n_items, n_negs=n_negs)
        finite_difference_check(params, lambda p: dual_loss_grad(p, batch))


class TestCrossLoss:
    def test_zero_params_single_positive_is_ln2(self):
        from tartan.encoder import zeros_like_params

        params = zeros_like_params(init_cross_params(0, dim=6, hidden_dim=4, num_buckets=48))
        rng = make_rng(2, "c")
        batch = CrossBatch(items=(make_cross_batch(rng, 2).items[1],))  # label 1
        loss, _ = cross_loss_grad(params, batch)
        assert loss == pytest.approx(math.log(2.0), abs=1e-12)

    def test_zero_params_balanced_pair_is_ln2(self):
        from tartan.encoder import zeros_like_params

        params = zeros_like_params(init_cross_params(0, dim=6, hidden_dim=4, num_buckets=48))
        rng = make_rng(3, "c")
        batch = make_cross_batch(rng, 2)  # one label-0 and one label-1 item
        loss, _ = cross_loss_grad(params, batch)
        assert loss == pytest.approx(math.log(2.0), abs=1e-12)

    def test_label_must_be_binary(self):
        with pytest.raises(DataError):
            CrossItem(
                instruction=INSTRUCTION,
                query=Query(id="q", text="x", task_id="t"),
                doc=Document(id="d", text="y", corpus_id="t"),
                label=2,
            )

    @pytest.mark.parametrize("seed,n_items", [(0, 8), (1, 1), (2, 5)])
    def test_gradients_match_finite_differences(self, seed, n_items):
        params = init_cross_params(seed, dim=5, hidden_dim=4, num_buckets=32)
        rng = make_rng(seed, "fd-cross")
        batch = make_cross_batch(rng, n_items)
        finite_difference_check(params, lambda p: cross_loss_grad(p, batch))


class TestAdamAndWarmup:
    def test_warmup_is_linear_then_flat(self):
        assert warmup_lr(1.0, 1, 4) == 0.25
        assert warmup_lr(1.0, 2, 4) == 0.5
        assert warmup_lr(1.0, 4, 4) == 1.0
        assert warmup_lr(1.0, 9, 4) == 1.0
        assert warmup_lr(0.5, 3, 0) == 0.5

    def test_adam_moves_against_gradient(self):
        params = init_dual_params(0, dim=4, num_buckets=16)
        state = AdamState.for_params(params)
        grads = init_dual_params(0, dim=4, num_buckets=16)
        for name in grads.TENSOR_FIELDS:
            getattr(grads, name)[:] = 1.0
        before = params.projection.copy()
        adam_update(params, grads, state, lr=0.1)
        assert np.all(params.projection < before)


def _instances_for(task):
    return [
        TrainingInstance(
            task_id=task.id,
            query_id=q.id,
            positives=tuple(task.qrels.positives(q.id)),
        )
        for q in task.queries
    ]


class TestTrainLoop:
    def test_zero_steps_returns_initialization_bit_for_bit(self):
        task = tiny_task()
        config = TrainConfig(batch_size=2, max_steps=0, seed=9, negatives_per_positive=2)
        params, log = train("dual", config, _instances_for(task), [task],
                            dim=6, num_buckets=48)
        reference = init_dual_params(9, dim=6, num_buckets=48, temperature=config.temperature)
        for name in params.TENSOR_FIELDS:
            assert getattr(params, name).tobytes() == getattr(reference, name).tobytes()

    def test_same_seed_trains_bit_identically(self):
        task = tiny_task()
        config = TrainConfig(batch_size=2, max_steps=12, warmup_steps=4, seed=3,
                             negatives_per_positive=2)
        runs = [
            train("dual", config, _instances_for(task), [task], dim=6, num_buckets=48)[0]
            for _ in range(2)
        ]
        for name in runs[0].TENSOR_FIELDS:
            assert getattr(runs[0], name).tobytes() == getattr(runs[1], name).tobytes()

    def test_loss_decreases_on_separable_data(self):
        task = tiny_task(n_docs=12)
        config = TrainConfig(batch_size=4, max_steps=120, warmup_steps=10, seed=0,
                             negatives_per_positive=3, learning_rate=2e-3)
        _, log = train("dual", config, _instances_for(task), [task], dim=8, num_buckets=64)
        first = np.mean([e["loss"] for e in log.entries[:10]])
        last = np.mean([e["loss"] for e in log.entries[-10:]])
        assert last < first

    def test_cross_training_runs_and_logs(self):
        task = tiny_task()
        config = TrainConfig(batch_size=2, max_steps=6, warmup_steps=2, seed=1,
                             negatives_per_positive=2, pos_neg_ratio_cross=2)
        params, log = train("cross", config, _instances_for(task), [task],
                            dim=6, num_buckets=48, hidden_dim=5)
        assert len(log.entries) == 6
        assert all(e["lr"] > 0 for e in log.entries)

    def test_empty_positive_instances_skipped_and_counted(self):
        task = tiny_task()
        instances = _instances_for(task) + [
            TrainingInstance(task_id=task.id, query_id="q0", positives=())
        ]
        config = TrainConfig(batch_size=2, max_steps=3, seed=0, negatives_per_positive=2)
        _, log = train("dual", config, instances, [task], dim=6, num_buckets=48)
        assert log.skipped_instances == 1

    def test_resume_continues_from_checkpoint(self):
        task = tiny_task()
        config = TrainConfig(batch_size=2, max_steps=4, seed=5, negatives_per_positive=2)
        first, _ = train("dual", config, _instances_for(task), [task], dim=6, num_buckets=48)
        resumed, _ = train("dual", config, _instances_for(task), [task],
                           init_params=first, dim=6, num_buckets=48)
        assert not np.array_equal(resumed.projection, first.projection)

    def test_empty_data_rejected(self):
        with pytest.raises(DataError):
            train("dual", TrainConfig(max_steps=1), [], [tiny_task()])

    def test_training_log_jsonl_round_trip(self, tmp_path):
        import json

        from tartan.training import write_training_log

        log = TrainLog()
        log.record(1, 0.5, 1e-3)
        log.record(2, 0.25, 2e-3)
        path = tmp_path / "log.jsonl"
        write_training_log(path, log)
        rows = [json.loads(line) for line in path.read_text().splitlines()]
        assert rows == [
            {"step": 1, "loss": 0.5, "lr": 1e-3},
            {"step": 2, "loss": 0.25, "lr": 2e-3},
        ]


class TestDistillRefresh:
    def _setup(self):
        task = tiny_task(n_docs=8)
        instances = [
            TrainingInstance(
                task_id=task.id,
                query_id=q.id,
                positives=tuple(task.qrels.positives(q.id)),
                hard_negatives=(f"d{len(task.corpus) - 1}",),
            )
            for q in task.queries
        ]
        return task, instances

    def _forced_params(self, prob):
        """Cross params whose output is a constant probability."""
        from tartan.encoder import zeros_like_params

        params = zeros_like_params(init_cross_params(0, dim=6, hidden_dim=4, num_buckets=48))
        params.output_b = np.array(math.log(prob / (1 - prob)))
        return params

    def test_low_scores_move_positives_to_hard(self):
        task, instances = self._setup()
        refreshed, report = distill_refresh(self._forced_params(0.05), instances, [task])
        # every candidate scores 0.05 < 0.1: instances would lose all
        # positives, so they are left unchanged and flagged
        assert refreshed == instances
        assert len(report.flagged) == len(instances)

    def test_high_scores_promote_negatives(self):
        task, instances = self._setup()
        refreshed, report = distill_refresh(self._forced_params(0.95), instances, [task])
        assert report.promoted == len(instances)  # each hard negative promoted
        for inst in refreshed:
            assert inst.hard_negatives == ()
            assert f"d{len(task.corpus) - 1}" in inst.positives

    def test_mid_scores_change_nothing(self):
        task, instances = self._setup()
        refreshed, report = distill_refresh(self._forced_params(0.5), instances, [task])
        assert refreshed == instances
        assert report.promoted == 0 and report.demoted == 0

    def test_idempotent(self):
        task, instances = self._setup()
        params = init_cross_params(3, dim=6, hidden_dim=4, num_buckets=48)
        once, _ = distill_refresh(params, instances, [task])
        twice, _ = distill_refresh(params, once, [task])
        assert once == twice

    def test_unfollowing_pools_untouched(self):
        task, instances = self._setup()
        from dataclasses import replace

        instances = [
            replace(inst, unfollowing_negatives=(("other", "d0"),)) for inst in instances
        ]
        refreshed, _ = distill_refresh(self._forced_params(0.95), instances, [task])
        for inst in refreshed:
            assert inst.unfollowing_negatives == (("other", "d0"),)

    def test_threshold_must_be_in_unit_interval(self):
        task, instances = self._setup()
        with pytest.raises(DataError):
            distill_refresh(self._forced_params(0.5), instances, [task], threshold=1.5)
