import numpy as np
import pytest

from conftest import check_gradients
from deskrec.config import ModelConfig, TrainingConfig
from deskrec.domain import EventType
from deskrec.errors import TrainingDivergence
from deskrec.nn import SGD, Adagrad, check_finite, gather, make_optimizer, scatter_add
from deskrec.two_tower import (DayLogs, ItemIndex, PopularityEstimator, TrainingBatch, TrainingSample, TwoTowerModel,
                               UserFeatures, ann_search, build_item_index, build_training_batch, epoch_batches,
                               retrieval_query, subsample_last_n, train_two_tower, user_vectors)

TINY = ModelConfig(embedding_dim=4, tower_hidden=6)


def _batch(labels=(1.0, 0.0, 0.0, 0.0, 0.0)) -> TrainingBatch:
    users = [UserFeatures(u, "active", (20 + u, 30), (1, 2)) for u in range(4)]
    samples = [TrainingSample(users[0], 1, 0, "simple_positive", labels),
               TrainingSample(users[1], 2, 1, "simple_positive", labels),
               TrainingSample(users[2], 3, 0, "impression_positive", (0.3, 0.0, 0.0, 0.0, 0.0)),
               TrainingSample(users[3], 1, 0, "simple_positive", labels),
               TrainingSample(users[0], 7, 2, "simple_negative"),
               TrainingSample(users[1], 8, 1, "hard_negative")]
    return TrainingBatch(samples)


@pytest.fixture
def day_logs(log_state, make_event) -> DayLogs:
    events = [make_event(0, 1, 10, EventType.IMPRESSION, 0), make_event(0, 1, 10, EventType.CLICK),
              make_event(0, 1, 11, EventType.IMPRESSION, 1),
              make_event(0, 2, 12, EventType.IMPRESSION, 0), make_event(0, 2, 12, EventType.CLICK),
              make_event(0, 2, 12, EventType.LIKE)]
    log_state.ingest_many(events)
    hard = [{"day": 0, "request_id": "r", "user_id": 1, "item_ids": [12, 11]}]
    return DayLogs(0, log_state.events_on(0), hard, log_state)


# ---------------------------------------------------------------------------- gradients

@pytest.mark.parametrize("heads", [1, 5])
@pytest.mark.parametrize("corrected", [False, True])
def test_inbatch_gradients(heads, corrected):
    model = TwoTowerModel(TINY, heads=heads, seed=3)
    batch = _batch((1.0, 0.5, 0.0, 1.0, 0.25))
    q_hat = {1: 0.4, 2: 0.1, 3: 0.05} if corrected else None
    model.inbatch_loss(batch, q_hat)
    loss, grads = model.inbatch_loss(batch, q_hat)
    assert np.isfinite(loss)
    check_gradients(lambda: model.inbatch_loss(batch, q_hat)[0], model.parameters(), grads, seed=heads)


def test_inbatch_needs_two_positives():
    model = TwoTowerModel(TINY)
    batch = TrainingBatch(_batch().samples[:1] + _batch().samples[4:])
    with pytest.raises(ValueError):
        model.inbatch_loss(batch)


def test_inbatch_rejects_zero_popularity():
    with pytest.raises(ValueError):
        TwoTowerModel(TINY).inbatch_loss(_batch(), {1: 0.5, 2: 0.0, 3: 0.1})


def test_same_item_rows_are_not_negatives():
    # Rows 0 and 3 share item 1
    model = TwoTowerModel(TINY, seed=1)
    loss, _ = model.inbatch_loss(_batch())
    assert np.isfinite(loss) and loss > 0.0


def test_loss_decreases_with_sgd():
    model = TwoTowerModel(TINY, seed=5)
    batch = _batch()
    optimizer = SGD(0.01)
    first, _ = model.inbatch_loss(batch)
    for _ in range(30):
        _, grads = model.inbatch_loss(batch)
        optimizer.step(model.parameters(), grads)
    assert model.inbatch_loss(batch)[0] < first


# ---------------------------------------------------------------------------- samples

def test_batch_composition(day_logs):
    batch = build_training_batch(day_logs, (1, 1, 3, 1), seed=0)
    assert batch.composition() == {"simple_positive": 1, "impression_positive": 1, "simple_negative": 3, "hard_negative": 1}


def test_scarce_kinds_are_truncated(day_logs):
    batch = build_training_batch(day_logs, (5, 5, 2, 5), seed=0)
    assert batch.composition() == {"simple_positive": 2, "impression_positive": 1, "simple_negative": 2, "hard_negative": 1}
    labels = {(s.user.user_id, s.item_id): s.labels for s in batch.samples if s.is_positive}
    assert labels[(2, 12)] == (1.0, 1.0, 0.0, 0.0, 0.0)
    assert labels[(1, 11)] == (0.3, 0.0, 0.0, 0.0, 0.0)
    hard = [s for s in batch.samples if s.label_kind == "hard_negative"]
    assert [(s.user.user_id, s.item_id) for s in hard] == [(1, 12)]


def test_target_item_is_not_in_its_own_history(day_logs):
    batch = build_training_batch(day_logs, (5, 0, 0, 0), seed=0)
    for sample in batch.samples: assert sample.item_id not in sample.user.last_n


def test_bad_mix_rejected(day_logs):
    with pytest.raises(ValueError):
        build_training_batch(day_logs, (0, 0, 0, 0), seed=0)
    with pytest.raises(ValueError):
        build_training_batch(day_logs, (1, 1, -1, 0), seed=0)


def test_epoch_covers_every_positive_once(day_logs):
    batches = list(epoch_batches(day_logs, (1, 1, 1, 1), seed=4))
    positives = [(s.user.user_id, s.item_id) for b in batches for s in b.samples if s.label_kind == "simple_positive"]
    assert sorted(positives) == [(1, 10), (2, 12)]
    assert len(batches) == 2


def test_popularity_estimator():
    estimator = PopularityEstimator(decay=0.5)
    assert estimator.probability(1) == 0.0
    estimator.observe([1, 1, 2])
    assert estimator.probability(1) == pytest.approx(2 / 3)
    estimator.observe([2])
    assert estimator.probability(2) == pytest.approx(1.5 / 2.5)
    assert estimator.q_hat([1, 9]) == {1: pytest.approx(1.0 / 2.5), 9: 0.0}
    with pytest.raises(ValueError):
        PopularityEstimator(decay=0.0)


# ---------------------------------------------------------------------------- training

def test_zero_learning_rate_keeps_weights(day_logs):
    model = TwoTowerModel(TINY, seed=2)
    dense = {k: v.copy() for k, v in model.parameters().items() if k.startswith(("W", "b"))}
    train_two_tower(model, day_logs, TrainingConfig(learning_rate=0.0, mix=(8, 4, 16, 4)), PopularityEstimator(), SGD(0.0))
    for name, value in dense.items(): np.testing.assert_array_equal(model.parameters()[name], value)
    assert model.day == 0


def test_training_writes_checkpoint(day_logs, tmp_path):
    model = TwoTowerModel(TINY, seed=2)
    train_two_tower(model, day_logs, TrainingConfig(mix=(8, 4, 16, 4)), PopularityEstimator(), SGD(0.05),
                    checkpoint_dir=str(tmp_path))
    restored = TwoTowerModel.load(str(tmp_path / "two_tower_day0.json"))
    assert restored.day == 0
    assert model.loss_history and model.loss_history[0][0] == 0


def test_checkpoint_round_trip(tmp_path):
    model = TwoTowerModel(TINY, heads=5, seed=8)
    model.inbatch_loss(_batch())
    path = str(tmp_path / "towers.json")
    model.save(path)
    restored = TwoTowerModel.load(path)
    user = UserFeatures(0, "active", (20, 30), (1, 2))
    np.testing.assert_allclose(restored.forward_users([user], grow=False)[0], model.forward_users([user], grow=False)[0])
    np.testing.assert_allclose(restored.forward_items([1, 2], [0, 1], grow=False)[0], model.forward_items([1, 2], [0, 1], grow=False)[0])
    with pytest.raises(ValueError):
        TwoTowerModel.load(path, kind="prerank")


def test_unknown_ids_do_not_grow_tables_when_serving():
    model = TwoTowerModel(TINY)
    model.forward_items([5], [0], grow=False)
    assert 5 not in model.item_emb
    model.forward_items([5], [0])
    assert 5 in model.item_emb


def test_embedding_rows_do_not_depend_on_order():
    a, b = TwoTowerModel(TINY, seed=4), TwoTowerModel(TINY, seed=4)
    a.forward_items([1, 2, 3], [0, 0, 0])
    b.forward_items([3, 1, 2], [0, 0, 0])
    np.testing.assert_array_equal(gather(a.item_emb.weight, a.item_emb.rows([2], False)),
                                  gather(b.item_emb.weight, b.item_emb.rows([2], False)))


# ---------------------------------------------------------------------------- serving

def test_ann_search_ties_to_lower_id():
    index = ItemIndex(np.array([7, 3, 5]), np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]]))
    assert ann_search(index, np.array([1.0, 0.0]), 2) == [(3, 1.0), (7, 1.0)]
    assert [i for i, _ in ann_search(index, np.array([0.0, 1.0]), 10)] == [5, 3, 7]


def test_ann_search_errors():
    with pytest.raises(ValueError):
        ann_search(ItemIndex(np.zeros(0, dtype=np.int64), np.zeros((0, 2))), np.ones(2), 1)
    with pytest.raises(ValueError):
        ann_search(ItemIndex(np.array([1]), np.ones((1, 2))), np.ones(2), 0)


def test_item_index_matches_tower():
    model = TwoTowerModel(TINY, seed=6)
    model.forward_items([4, 2], [1, 0])
    index = build_item_index(model, [(4, 1), (2, 0)], "recent_7d")
    assert list(index.ids) == [2, 4] and index.pool_id == "recent_7d"
    assert len(build_item_index(model, [])) == 0


def test_subsample_last_n():
    history = (1, 2, 3, 4, 5, 6)
    picked = subsample_last_n(history, 2, 2, seed=1)
    assert picked[:2] == (1, 2) and len(picked) == 4
    assert list(picked) == sorted(picked, key=history.index)
    assert subsample_last_n(history, 2, 10, seed=1) == history
    assert subsample_last_n(history, 2, 2, seed=1) == picked
    with pytest.raises(ValueError):
        subsample_last_n(history, -1, 2, seed=1)


def test_noise_shrinks_with_taxonomy_breadth():
    model = TwoTowerModel(TINY, seed=9)
    narrow = UserFeatures(1, "active", (10, 11, 12, 13), (0, 0, 0, 0))
    broad = UserFeatures(1, "active", (10, 11, 12, 13), (0, 1, 2, 3))
    model.forward_users([narrow])
    base = user_vectors(model, narrow)
    np.testing.assert_array_equal(base, user_vectors(model, broad))
    narrow_noise = user_vectors(model, narrow, (0.5, True), seed=3) - base
    broad_noise = user_vectors(model, broad, (0.5, True), seed=3) - base
    np.testing.assert_allclose(narrow_noise, 4.0 * broad_noise, atol=1e-12)
    assert np.abs(narrow_noise).sum() > 0.0


def test_retrieval_query():
    single = np.array([[1.0, 2.0]])
    np.testing.assert_array_equal(retrieval_query(single), [1.0, 2.0])
    heads = np.array([[1.0, 0.0], [0.0, 1.0]])
    np.testing.assert_array_equal(retrieval_query(heads, [2.0, 3.0]), [2.0, 3.0])


# ---------------------------------------------------------------------------- numerics

def test_gather_and_scatter_skip_missing_rows():
    weight = np.arange(6.0).reshape(3, 2)
    rows = np.array([2, -1, 2])
    np.testing.assert_array_equal(gather(weight, rows), [[4.0, 5.0], [0.0, 0.0], [4.0, 5.0]])
    grad = np.zeros_like(weight)
    scatter_add(grad, rows, np.ones((3, 2)))
    np.testing.assert_array_equal(grad, [[0.0, 0.0], [0.0, 0.0], [2.0, 2.0]])


def test_adagrad_handles_grown_tables():
    params = {"w": np.zeros(2)}
    optimizer = Adagrad(0.1)
    optimizer.step(params, {"w": np.array([1.0, -1.0])})
    params["w"] = np.concatenate([params["w"], [0.0]])
    optimizer.step(params, {"w": np.array([1.0, 0.0, 2.0])})
    assert params["w"].shape == (3,)
    assert params["w"][2] == pytest.approx(-0.1, rel=1e-6)
    with pytest.raises(ValueError):
        make_optimizer("adam", 0.1)


def test_divergence_is_reported():
    with pytest.raises(TrainingDivergence) as info:
        check_finite("ranker", 3, 7, float("nan"), {"W0": np.ones(2)})
    assert info.value.day == 3 and info.value.batch == 7
