import json
import pickle

import pytest

from deskrec.cache import CacheState
from deskrec.config import Config, config_from_dict, load_config
from deskrec.domain import EngagementStats, EventType, InteractionEvent, Item, PoolSpec, PredictionVector, engagement_rates
from deskrec.errors import ConfigError, InvariantViolation, UnknownEntityError
from deskrec.eventlog import LogState, kol_ema, read_events_jsonl, write_events_jsonl
from deskrec.index import ActivityIndex, CatalogIndex
from deskrec.logger import SideChannelLogger
from deskrec.pools import build_pool, default_pool_specs, group_stats_for


# ---------------------------------------------------------------------------- config

def test_defaults_validate():
    config = load_config(None)
    assert config.sizes.retrieval >= config.sizes.prerank >= config.sizes.rank >= config.sizes.slate
    assert config.model.embedding_dim == 16
    assert config.utility.weights["new"].click == 2.0


def test_toml_overrides(tmp_path):
    path = tmp_path / "arm.toml"
    path.write_text('seed = 3\n[sim]\ninitial_users = 12\n[diversity]\nmethod = "dpp"\n[utility.weights.new]\nfollow = 4\n')
    config = load_config(str(path))
    assert config.seed == 3
    assert config.sim.initial_users == 12
    assert config.diversity.method == "dpp"
    assert config.utility.weights["new"].follow == 4.0
    assert config.utility.weights["new"].click == 2.0


@pytest.mark.parametrize("document", [
    {"sim": {"no_such_key": 1}},
    {"nonsense": {}},
    {"sizes": {"retrieval": 5, "prerank": 10}},
    {"diversity": {"method": "greedy"}},
    {"sim": {"position_decay": 1.5}},
    {"sim": {"initial_users": "many"}},
    {"sizes": {"slate": 8}},
    {"sim": {"slate_size": 12}},
    {"channels": [{"channel_id": "a", "kind": "two_tower", "priority": 0, "quota": 0.9},
                  {"channel_id": "b", "kind": "itemcf", "priority": 1, "quota": 0.5}]},
    {"channels": [{"channel_id": "a", "kind": "two_tower", "priority": 0, "quota": 0.5},
                  {"channel_id": "b", "kind": "itemcf", "priority": 0, "quota": 0.5}]},
    {"channels": [{"channel_id": "a", "kind": "pool_direct", "priority": 0, "quota": 0.5}]},
    {"channels": [{"channel_id": "a", "kind": "two_tower", "priority": 0, "quota": 0.5, "colour": "red"}]},
])
def test_bad_config_rejected(document):
    with pytest.raises(ConfigError):
        config_from_dict(document)


def test_slate_size_set_in_both_sections():
    config = config_from_dict({"sim": {"slate_size": 8}, "sizes": {"slate": 8}})
    assert config.sim.slate_size == config.sizes.slate == 8


def test_quota_sum_per_group():
    # A group override can break the cap on its own
    document = {"channels": [
        {"channel_id": "a", "kind": "two_tower", "priority": 0, "quota": 0.5, "group_quotas": {"new": 1.0}},
        {"channel_id": "b", "kind": "itemcf", "priority": 1, "quota": 0.5},
    ]}
    with pytest.raises(ConfigError):
        config_from_dict(document)


def test_missing_and_broken_files(tmp_path):
    with pytest.raises(ConfigError):
        load_config(str(tmp_path / "absent.toml"))
    broken = tmp_path / "broken.toml"
    broken.write_text("[sim\n")
    with pytest.raises(ConfigError):
        load_config(str(broken))


def test_overrides_leave_base_untouched():
    base = Config().validate()
    derived = config_from_dict({"diversity": {"theta": 0.0}}, base)
    assert derived.diversity.theta == 0.0
    assert base.diversity.theta == 0.5


# ---------------------------------------------------------------------------- domain

def test_rates_without_counters_are_half():
    rates = engagement_rates(EngagementStats())
    assert rates.click_rate == pytest.approx(0.5)
    assert all(v == pytest.approx(0.5) for v in rates.per_click.values())


def test_rates_examples():
    rates = engagement_rates(EngagementStats(impressions=10, clicks=5, follows=5))
    assert rates.click_rate == pytest.approx(6 / 12)
    assert rates.get("follow_per_click") == pytest.approx(6 / 7)
    assert rates.get("follow_per_impression") == pytest.approx(6 / 12)
    with pytest.raises(KeyError):
        rates.get("follow_per_day")


def test_rates_stay_inside_unit_interval():
    for n in (0, 1, 5, 1000):
        for x in (0, n):
            rate = engagement_rates(EngagementStats(impressions=n, clicks=x)).click_rate
            assert 0.0 < rate < 1.0


def test_rates_need_positive_pseudo_counts():
    with pytest.raises(ValueError):
        engagement_rates(EngagementStats(), a=0.0)


def test_prediction_vector_bounds():
    PredictionVector(0.1, 0.2, 0.3, 0.4, 0.5)
    with pytest.raises(ValueError):
        PredictionVector(0.0, 0.2, 0.3, 0.4, 0.5)
    with pytest.raises(ValueError):
        PredictionVector(0.1, 0.2, 0.3, 0.4, 1.0)


def test_event_position_only_on_impressions():
    InteractionEvent(0, 0, 1, 10, EventType.IMPRESSION, 0).validate()
    with pytest.raises(ValueError):
        InteractionEvent(0, 0, 1, 10, EventType.IMPRESSION).validate()
    with pytest.raises(ValueError):
        InteractionEvent(0, 1, 1, 10, EventType.CLICK, 3).validate()


def test_event_json(tmp_path, make_event):
    events = [make_event(0, 1, 10, EventType.IMPRESSION, 2), make_event(0, 1, 10, EventType.CLICK)]
    path = str(tmp_path / "events.jsonl")
    write_events_jsonl(path, events, append=False)
    assert read_events_jsonl(path) == events
    with open(path, "a") as f: f.write("{not json}\n")
    with pytest.raises(InvariantViolation):
        read_events_jsonl(path)


# ---------------------------------------------------------------------------- event log

def test_ingest_impression_then_click(log_state, make_event):
    log_state.ingest(make_event(0, 1, 10, EventType.IMPRESSION))
    log_state.ingest(make_event(0, 1, 10, EventType.CLICK))
    stats = log_state.items[10].quality_stats
    assert (stats.impressions, stats.clicks) == (1, 1)
    assert log_state.user_stats[1].clicks == 1
    assert log_state.users[1].recent_items() == [10]
    assert log_state.activity.is_active(1, 0)


def test_duplicate_event_is_ignored(log_state, make_event):
    impression = make_event(0, 1, 10, EventType.IMPRESSION)
    log_state.ingest(impression)
    before = log_state.snapshot(0)
    log_state.ingest(impression)
    assert log_state.snapshot(0) == before
    assert len(log_state.events_on(0)) == 1


def test_click_without_impression_rejected(log_state, make_event):
    with pytest.raises(InvariantViolation):
        log_state.ingest(make_event(0, 1, 10, EventType.CLICK))
    assert log_state.items[10].quality_stats.clicks == 0


def test_impression_must_come_first_the_same_day(log_state, make_event):
    log_state.ingest(make_event(0, 1, 10, EventType.IMPRESSION))
    with pytest.raises(InvariantViolation):
        log_state.ingest(make_event(1, 1, 10, EventType.LIKE))


def test_unknown_entities_rejected(log_state, make_event):
    with pytest.raises(UnknownEntityError):
        log_state.ingest(make_event(0, 99, 10, EventType.IMPRESSION))
    with pytest.raises(UnknownEntityError):
        log_state.ingest(make_event(0, 1, 99, EventType.IMPRESSION))


def test_follow_updates_graph_and_counters(log_state, make_event):
    log_state.ingest_many([make_event(0, 1, 12, EventType.IMPRESSION), make_event(0, 1, 12, EventType.CLICK),
                           make_event(0, 1, 12, EventType.FOLLOW)])
    assert log_state.users[1].followed_authors == {200}
    assert log_state.follower_count(200) == 1
    assert log_state.group_stats[("g0", 12)].follows == 1
    assert group_stats_for(log_state.group_stats, "g0")[12].follows == 1
    assert group_stats_for(log_state.group_stats, "g1") == {}


def test_events_between_is_ordered(log_state, make_event):
    log_state.ingest(make_event(2, 1, 10, EventType.IMPRESSION))
    log_state.ingest(make_event(0, 2, 11, EventType.IMPRESSION))
    log_state.ingest(make_event(1, 1, 12, EventType.IMPRESSION))
    assert [e.day for e in log_state.events_between(0, 2)] == [0, 1, 2]
    assert [e.day for e in log_state.events_between(1, 1)] == [1]
    assert log_state.events_between(2, 1) == []


def test_kol_ema():
    assert kol_ema(None, 10, 0.8, 10.0) == pytest.approx(1.0)
    assert kol_ema(1.0, 0, 0.8, 10.0) == pytest.approx(0.8)


def test_kol_scores_from_external_visits(log_state, make_event):
    events = [make_event(0, 1, 10, EventType.IMPRESSION), make_event(0, 1, 10, EventType.CLICK),
              make_event(0, 1, 10, EventType.SHARE)]
    events += [make_event(0, 1, 10, EventType.EXTERNAL_VISIT) for _ in range(10)]
    log_state.ingest_many(events)
    log_state.update_kol_scores(0, 0.8, 10.0)
    assert log_state.users[1].kol_score == pytest.approx(1.0)
    log_state.update_kol_scores(1, 0.8, 10.0)
    assert log_state.users[1].kol_score == pytest.approx(0.8)


def test_log_state_pickles(log_state, make_event):
    log_state.ingest(make_event(0, 1, 10, EventType.IMPRESSION))
    restored = pickle.loads(pickle.dumps(log_state))
    assert restored.snapshot(0) == log_state.snapshot(0)
    assert restored.catalog.published_between(0, 0) == [10, 11, 12]


# ---------------------------------------------------------------------------- indices

def test_activity_index():
    activity = ActivityIndex()
    activity.mark_many(5, [3, 1, 4, 1])
    assert activity.active_days(5) == [1, 3, 4]
    assert activity.count_between(5, 2, 4) == 2
    assert activity.users_active_on(1) == [5]
    assert activity.last_active(5) == 4
    assert activity.last_active(6) is None
    assert not activity.is_active(6, 1)


def test_catalog_index_ranges():
    catalog = CatalogIndex()
    for item_id, author_id, day in [(1, 7, 2), (2, 7, 4), (3, 8, 9), (4, 7, 9)]: catalog.add(item_id, author_id, day)
    assert catalog.published_between(4, 9) == [2, 3, 4]
    assert catalog.author_items_between(7, 3, 10) == [2, 4]
    assert catalog.author_items_between(9, 0, 10) == []


# ---------------------------------------------------------------------------- pools

def _catalog():
    return {i: Item(i, author_id=1, publish_day=day, taxonomy=0) for i, day in [(1, 2), (2, 4), (3, 9), (4, 11)]}


def test_recent_pool_window():
    pool = build_pool("recent_7d", PoolSpec("recent", window_days=7), _catalog(), 10)
    assert pool.member_ids == {2, 3}
    assert 4 not in pool


def test_follow_rate_pool():
    catalog = _catalog()
    catalog[1].quality_stats = EngagementStats(impressions=3, clicks=3, follows=3)
    pool = build_pool("high_follow", PoolSpec("rate_threshold", rate="follow_per_click", threshold=0.5), catalog, 10)
    assert 1 in pool
    # Untouched items sit at 0.5 and also pass
    assert pool.member_ids == {1, 2, 3}


def test_quality_pool_excludes_flagged_items():
    catalog = _catalog()
    catalog[2].is_low_quality = True
    pool = build_pool("quality", default_pool_specs()["quality"], catalog, 10)
    assert 2 not in pool


def test_group_quality_pool_uses_group_counters():
    catalog = _catalog()
    stats = {1: EngagementStats(impressions=20, clicks=0)}
    spec = PoolSpec("group_quality", rate="click_rate", threshold=0.3, demographic_group="g1")
    assert 1 not in build_pool("g1", spec, catalog, 10, stats)
    assert 1 in build_pool("all_users", spec, catalog, 10)
    assert "among g1" in spec.describe()


def test_pool_errors():
    with pytest.raises(ValueError):
        build_pool("x", PoolSpec("all"), {}, 0)
    with pytest.raises(ValueError):
        build_pool("x", PoolSpec("bogus"), _catalog(), 0)


def test_empty_pool_is_legal():
    pool = build_pool("recent", PoolSpec("recent", window_days=1), _catalog(), 100)
    assert len(pool) == 0


# ---------------------------------------------------------------------------- cache

def test_cache_lru_capacity():
    cache = CacheState(ttl=5, capacity=2)
    cache.put(1, 10, 0.5)
    cache.put(1, 11, 0.9)
    cache.put(1, 10, 0.6)
    assert cache.put(1, 12, 0.1) == [11]
    assert cache.peek(1) == [(10, 0.6), (12, 0.1)]


def test_cache_ttl_and_display():
    cache = CacheState(ttl=2, capacity=10)
    cache.put(1, 10, 1.0)
    cache.put(1, 11, 2.0)
    assert cache.evict_displayed(1, [11, 99]) == [11]
    assert cache.tick(1) == []
    assert cache.tick(1) == [10]
    assert len(cache) == 0
    assert cache.peek(2) == []


def test_cache_pickles():
    cache = CacheState()
    cache.put(3, 4, 0.5)
    restored = pickle.loads(pickle.dumps(cache))
    assert restored.peek(3) == [(4, 0.5)]
    restored.put(3, 5, 0.7)


# ---------------------------------------------------------------------------- side channels

def test_side_channels_round_trip(tmp_path):
    side = SideChannelLogger(str(tmp_path / "logs"))
    side.log_hard_negatives(0, "r", 1, [5, 6])
    side.log_hard_negatives(0, "r", 1, [])
    side.log_teacher_predictions(1, "r2", 1, [5], [[0.1, 0.2, 0.3, 0.4, 0.5]], [1.5])
    assert len(side.since("hard_negatives", 0)) == 1
    assert side.since("teacher_predictions", 0, 0) == []

    # Torn trailing line is skipped on reload
    with open(side.path("teacher_predictions"), "a") as f: f.write('{"day": 2')
    loaded = SideChannelLogger.load(str(tmp_path / "logs"))
    assert loaded.since("teacher_predictions", 0)[0]["item_ids"] == [5]
    assert json.loads(open(side.path("hard_negatives")).readline())["item_ids"] == [5, 6]


def test_side_channel_rejects_unknown_channel():
    with pytest.raises(KeyError):
        SideChannelLogger().append("metrics", [{}])


def test_side_channel_clear(tmp_path):
    side = SideChannelLogger(str(tmp_path))
    side.log_cache_event(0, 1, 2, "put", 0.3)
    side.clear()
    assert side.since("cache_events", 0) == []
