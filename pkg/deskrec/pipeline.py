import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple, Union

import numpy as np

from deskrec.cache import CacheState
from deskrec.config import (GROUP_ACTIVE, GROUP_INACTIVE, GROUP_NEW, SPECIAL_GROUPS, ChannelConfig, Config,
                            SpecialGroupConfig, UtilityConfig)
from deskrec.domain import EventType, InteractionEvent, ItemPool, PredictionVector, ScoredCandidate, Source
from deskrec.errors import ConfigError
from deskrec.eventlog import LogState
from deskrec.i2i import (CoInteractionState, FollowGraph, SimilarityIndex, author_similarity, build_follow_graph,
                         click_pairs, itemcf_similarity, swing_similarity, u2a2a2i_retrieve, u2a2i_retrieve,
                         u2i2i_retrieve, u2u2i_retrieve, user_similarity)
from deskrec.logger import SideChannelLogger
from deskrec.nn import make_optimizer
from deskrec.pools import build_pool, default_pool_specs
from deskrec.ranking import (CALIBRATION_EPS, DistillationGuard, PrerankModel, RankerModel, ResidualModel,
                             calibrated_probabilities, candidate_lists, attach_teacher, impression_samples,
                             serve_samples, teacher_index, train_prerank, train_ranker, train_residual)
from deskrec.rerank import (cosine_matrix, dpp_rerank, hard_scatter, inject_exploration, kmeans_clusters, mmr_order,
                            mmr_rerank)
from deskrec.two_tower import (DayLogs, ItemIndex, PopularityEstimator, TwoTowerModel, UserFeatures, ann_search,
                               build_item_index, retrieval_query, train_two_tower, user_features, user_vectors)

logger = logging.getLogger(__name__)

# Days of clicks behind the daily batch similarity indices
SIMILARITY_WINDOW_DAYS = 30
EXPLORATION_POOL = "recent_7d"
FALLBACK_POOL = "quality"
# Training order within a day
STAGES = ("two_tower", "rank", "prerank", "residual")

Candidates = Sequence[Union[Tuple[int, float], int]]


# ---------------------------------------------------------------------------- quota merge

def merge_channels(outputs: Sequence[Tuple[str, float, Candidates]], target_size: int) -> List[ScoredCandidate]:
    """
    Merge channel outputs given in priority order. Each channel first gets
    floor(quota * target) slots filled from its top items (duplicates are
    skipped), then leftover slots are backfilled in priority order.
    """
    if target_size < 0: raise ValueError("target size must be >= 0")
    lists = [(channel_id, quota, [entry if isinstance(entry, tuple) else (entry, 0.0) for entry in items])
             for channel_id, quota, items in outputs]
    if any(quota < 0.0 for _, quota, _ in lists): raise ValueError("quotas must be >= 0")
    merged: List[ScoredCandidate] = []
    seen: Set[int] = set()
    cursor = [0] * len(lists)

    # Take up to n fresh items from channel k
    def take(k: int, n: int) -> None:
        channel_id, _, items = lists[k]
        taken = 0
        while taken < n and cursor[k] < len(items) and len(merged) < target_size:
            item_id, score = items[cursor[k]]
            cursor[k] += 1
            if item_id in seen: continue
            seen.add(item_id)
            merged.append(ScoredCandidate(int(item_id), float(score), channel_id=channel_id))
            taken += 1

    # Quota pass, then backfill
    for k, (_, quota, _) in enumerate(lists): take(k, int(math.floor(quota * target_size + 1e-9)))
    for k in range(len(lists)): take(k, target_size)
    return merged


# ---------------------------------------------------------------------------- utility

def follow_term(follow_count: int, w0: float) -> float:
    """
    w(f) = w0 / (1 + f)
    """
    if follow_count < 0: raise ValueError("follow count must be >= 0")
    return w0 / (1.0 + follow_count)


def kol_share_weight(kol_score: float, base: float, kappa: float) -> float:
    """
    w_share * (1 + kappa * min(kol, 1))
    """
    if kol_score < 0.0: raise ValueError("kol score must be >= 0")
    return base * (1.0 + kappa * min(kol_score, 1.0))


def comment_boost(likes_shares: int, comments: int, boost: float, trigger: int) -> float:
    """
    `boost` for an item with enough likes and shares but no comment yet, else 1
    """
    return boost if likes_shares >= trigger and comments == 0 else 1.0


@dataclass(frozen=True)
class UtilityContext:
    group: str = GROUP_ACTIVE
    follow_count: int = 0
    kol_score: float = 0.0
    author_followers: int = 0
    likes_shares: int = 0
    comments: int = 0
    item_age: int = 1_000_000


def utility_terms(context: UtilityContext, weights: UtilityConfig) -> Tuple[np.ndarray, float]:
    """
    Per-target weights and the additive new-item term for one (user, item)
    """
    base = weights.weights[context.group]
    follow = base.follow + follow_term(context.follow_count, weights.follow_w0.get(context.group, 0.0))
    if context.author_followers < weights.small_author_followers: follow *= weights.small_author_follow_boost
    w = np.array([
        base.click,
        base.like,
        kol_share_weight(context.kol_score, base.share, weights.kol_kappa),
        follow,
        base.comment * comment_boost(context.likes_shares, context.comments, weights.comment_boost, weights.comment_trigger),
    ])
    fresh = context.item_age < weights.new_item_days and not weights.suppress_new_item_boost.get(context.group, False)
    return w, (weights.new_item_boost if fresh else 0.0)


def utility(predictions: Union[PredictionVector, Sequence[float]], context: UtilityContext, weights: UtilityConfig) -> float:
    """
    s = sum_h w_h p_h with the follow, share and comment weights adjusted for
    the user and item, plus the new-item boost
    """
    p = predictions.as_array() if isinstance(predictions, PredictionVector) else np.asarray(predictions, dtype=float)
    w, bonus = utility_terms(context, weights)
    return float(w @ p + bonus)


def utility_scores(p: np.ndarray, contexts: Sequence[UtilityContext], weights: UtilityConfig) -> np.ndarray:
    if len(contexts) == 0: return np.zeros(0)
    terms = [utility_terms(c, weights) for c in contexts]
    return np.sum(np.stack([w for w, _ in terms]) * p, axis=1) + np.array([b for _, b in terms])


def utility_contexts(log_state: LogState, user_id: int, group: str, item_ids: Sequence[int], day: int) -> List[UtilityContext]:
    user = log_state.users[user_id]
    contexts = []
    for item_id in item_ids:
        item = log_state.items[item_id]
        stats = item.quality_stats
        contexts.append(UtilityContext(group, user.follow_count, user.kol_score, log_state.follower_count(item.author_id),
                                       stats.likes + stats.shares, stats.comments, day - item.publish_day))
    return contexts


# ---------------------------------------------------------------------------- user groups

def assign_group(log_state: LogState, user_id: int, day: int, special: SpecialGroupConfig = SpecialGroupConfig()) -> str:
    """
    new: signed up within the last `new_user_days`; inactive: at most
    `inactive_max_days` active days in the trailing window; else active
    """
    user = log_state.users[user_id]
    if user.signup_day > day - special.new_user_days: return GROUP_NEW
    active = log_state.activity.count_between(user_id, day - special.inactive_window, day - 1)
    return GROUP_INACTIVE if active <= special.inactive_max_days else GROUP_ACTIVE


def tag_groups(log_state: LogState, day: int, special: SpecialGroupConfig) -> Dict[str, int]:
    """
    Refresh every user's group tag for the day; returns group sizes
    """
    sizes = {GROUP_NEW: 0, GROUP_INACTIVE: 0, GROUP_ACTIVE: 0}
    for user_id, user in log_state.users.items():
        user.group_tag = assign_group(log_state, user_id, day, special)
        sizes[user.group_tag] += 1
    return sizes


def is_commenter(log_state: LogState, user_id: int, threshold: float) -> bool:
    return log_state.user_stats[user_id].rates().per_click["comment"] >= threshold


def audience_matches(audience: str, group: str, commenter: bool) -> bool:
    if audience == "all": return True
    if audience == "special": return group in SPECIAL_GROUPS
    if audience == "commenters": return commenter
    return audience == group


# ---------------------------------------------------------------------------- models

class ModelSuite:
    """
    The models and streaming state shared by every experiment arm
    """

    def __init__(self, config: Config, seed: int = 0):
        model, training = config.model, config.training
        self.retrieval = TwoTowerModel(model, seed=seed)
        self.prerank = PrerankModel(model, seed=seed)
        self.ranker = RankerModel(model, seed=seed)
        self.residual = ResidualModel(model, seed=seed)
        self.residual_trained = False
        self.popularity = PopularityEstimator(training.popularity_decay)
        self.optimizers = {name: make_optimizer(training.optimizer, training.learning_rate) for name in ("retrieval", "prerank", "ranker", "residual")}
        self.guard = DistillationGuard(training.contamination_ratio, training.contamination_guard)
        self.online = CoInteractionState()
        self.training = training
        self.score_weights = config.utility.weights[GROUP_ACTIVE].as_tuple()
        self.seed = seed

    def observe(self, events: Iterable[InteractionEvent]) -> None:
        """
        Stream clicks into the online co-interaction state
        """
        for event in events:
            if event.event_type == EventType.CLICK: self.online.add_click(event.user_id, event.item_id)

    def train_day(self, log_state: LogState, side_logger: SideChannelLogger, day: int, checkpoint_dir: Optional[str] = None) -> Dict[str, str]:
        """
        One incremental epoch of every model on the day's logs
        """
        done = {}
        for stage in STAGES: done[stage] = self.train_stage(stage, log_state, side_logger, day, checkpoint_dir)
        return done

    def train_stage(self, stage: str, log_state: LogState, side_logger: SideChannelLogger, day: int,
                    checkpoint_dir: Optional[str] = None) -> str:
        """
        Train one model on a day's logs; returns what was done
        """
        if stage not in STAGES: raise ValueError(f"unknown stage {stage}")
        logs = DayLogs.from_state(log_state, side_logger, day)
        if not logs.events: return "skipped"
        training, seed = self.training, self.seed

        # Retrieval towers
        if stage == "two_tower":
            train_two_tower(self.retrieval, logs, training, self.popularity, self.optimizers["retrieval"], seed, checkpoint_dir)
            return "trained"

        samples = impression_samples(logs)
        if not samples: return "skipped"

        # Ranker
        if stage == "rank":
            train_ranker(self.ranker, samples, training, self.optimizers["ranker"], day, seed, checkpoint_dir)
            return "trained"

        # Preranker, distilled from the ranker's logged predictions
        if stage == "prerank":
            mode = training.prerank_mode
            records = side_logger.since("teacher_predictions", day, day)
            if mode != "plain":
                teacher_p = [p[0] for record in records for p in record["p"]]
                if not teacher_p or not self.guard.allow(day, float(np.mean(teacher_p))): mode = "plain"
            prerank_samples = samples if mode == "plain" else attach_teacher(samples, teacher_index(records), drop_missing=True)
            lists = candidate_lists(records, log_state, training.listwise_cap) if mode == "listwise" else []
            if not prerank_samples: return "skipped"
            train_prerank(self.prerank, prerank_samples, mode, training, self.optimizers["prerank"], day, lists,
                          self.score_weights, seed, checkpoint_dir)
            return mode

        # Residual calibrator on special-group impressions
        special = [s for s in samples if s.user.group in SPECIAL_GROUPS]
        if not special: return "skipped"
        base = np.clip(self.ranker.predict(special), CALIBRATION_EPS, 1.0 - CALIBRATION_EPS)
        train_residual(self.residual, [s.user.group for s in special], base, np.array([s.dense for s in special]),
                       np.array([s.labels for s in special]), training, self.optimizers["residual"], day,
                       seed=seed, checkpoint_dir=checkpoint_dir)
        self.residual_trained = True
        return "trained"


# ---------------------------------------------------------------------------- daily snapshot

@dataclass
class DailyState:
    """
    Read-only serving snapshot built at the start of a day
    """
    day: int
    pools: Dict[str, ItemPool]
    item_indices: Dict[str, ItemIndex]
    similarity: Dict[str, SimilarityIndex]
    follow_graph: FollowGraph
    authors: SimilarityIndex
    users: Optional[SimilarityIndex]
    vectors: Dict[int, np.ndarray] = field(default_factory=dict)
    clusters: Dict[int, int] = field(default_factory=dict)


def build_daily_state(log_state: LogState, suite: ModelSuite, config: Config, day: int, pool_ids: Iterable[str] = ()) -> DailyState:
    """
    Pools, item-tower index, similarity indices, follow graph and clusters
    from everything logged before `day`
    """
    published = {i: item for i, item in log_state.items.items() if item.publish_day <= day}
    if not published: raise ValueError(f"no published items on day {day}")

    # Pools
    specs = default_pool_specs()
    unknown = set(pool_ids) - set(specs)
    if unknown: raise ConfigError(f"unknown pool ids {sorted(unknown)}")
    pools = {pool_id: build_pool(pool_id, spec, published, day) for pool_id, spec in specs.items()}

    # Item-tower vectors and per-pool indices
    everything = build_item_index(suite.retrieval, [(i, item.taxonomy) for i, item in published.items()], "all")
    vectors = {int(i): everything.vectors[k] for k, i in enumerate(everything.ids)}
    indices = {"all": everything}
    for pool_id, pool in pools.items():
        if pool_id == "all": continue
        keep = np.array([int(i) in pool for i in everything.ids], dtype=bool)
        indices[pool_id] = ItemIndex(everything.ids[keep], everything.vectors[keep], pool_id)

    # Similarity indices
    clicks = click_pairs(log_state.events_between(day - SIMILARITY_WINDOW_DAYS, day - 1))
    kinds = {c.kind for c in config.channels if c.enabled}
    similarity = {
        "itemcf": itemcf_similarity(clicks),
        "swing": swing_similarity(clicks) if "swing" in kinds else SimilarityIndex("swing", 0, {}),
        "online_itemcf": suite.online.similarity_index("itemcf"),
        "online_swing": suite.online.similarity_index("swing") if "online_swing" in kinds else SimilarityIndex("swing", 0, {}),
    }

    # Follow graph
    special = config.special_groups
    graph = build_follow_graph(log_state, day - 1, special.author_recency_days, special.implicit_min_clicks, special.implicit_min_rate,
                               special.explicit_weight, special.implicit_weight)
    users = user_similarity(clicks) if "u2u2i" in kinds else None

    # Offline clusters
    diversity = config.diversity
    labels = kmeans_clusters(everything.vectors, min(diversity.clusters, len(everything)), config.seed + day, diversity.kmeans_iters)
    clusters = {int(i): int(c) for i, c in zip(everything.ids, labels)}
    for item_id, cluster_id in clusters.items(): log_state.items[item_id].cluster_id = cluster_id

    logger.info("day %d snapshot: %d published, %d itemcf pairs", day, len(published), len(similarity["itemcf"]))
    return DailyState(day, pools, indices, similarity, graph, author_similarity(graph), users, vectors, clusters)


# ---------------------------------------------------------------------------- serving

@dataclass
class ServeStats:
    requests: int = 0
    fallbacks: int = 0
    scatter_violations: int = 0
    exploration_warnings: int = 0
    cache_hits: int = 0
    distinct_taxonomies: int = 0

    def to_dict(self) -> Dict[str, int]:
        return dict(self.__dict__)


class Pipeline:
    """
    One arm's serving pipeline: retrieval channels, quota merge, preranking,
    ranking, utility, scattering and exploration
    """

    def __init__(self, config: Config, suite: ModelSuite, log_state: LogState, side_logger: SideChannelLogger,
                 arm_id: str = "control", seed: int = 0):
        self.config = config
        self.suite = suite
        self.log_state = log_state
        self.side_logger = side_logger
        self.arm_id = arm_id
        self.seed = seed
        self.cache = CacheState()
        self.state: Optional[DailyState] = None
        self.stats = ServeStats()
        self.channels = sorted((c for c in config.channels if c.enabled), key=lambda c: c.priority)
        pools = set(default_pool_specs())
        for channel in self.channels:
            if channel.pool_id is not None and channel.pool_id not in pools: raise ConfigError(f"channel {channel.channel_id}: unknown pool {channel.pool_id}")

    def pool_ids(self) -> Set[str]:
        return {c.pool_id for c in self.channels if c.pool_id is not None}

    def refresh(self, state: DailyState) -> None:
        self.state = state

    # ------------------------------------------------------------------ retrieval

    def _allowed(self, user_id: int, group: str, day: int) -> Set[int]:
        """
        Items this user may be served: published, not yet impressed, and not
        low quality for special groups when filtering
        """
        state = self.state
        allowed = set(state.pools["all"].member_ids) - self.log_state.impressed.get(user_id, set())
        if group in SPECIAL_GROUPS and self.config.special_groups.filter_low_quality:
            allowed = {i for i in allowed if not self.log_state.items[i].is_low_quality}
        return allowed

    def _channel(self, channel: ChannelConfig, user: UserFeatures, allowed: Set[int], quota: int, seed) -> List[Tuple[int, float]]:
        state, log_state, day = self.state, self.log_state, self.state.day
        pool = state.pools[channel.pool_id] if channel.pool_id else None
        blocked = set(state.pools["all"].member_ids) - allowed

        # Filter to the channel pool and the allowed set
        def keep(items: Sequence[Tuple[int, float]]) -> List[Tuple[int, float]]:
            return [(i, s) for i, s in items if i in allowed and (pool is None or i in pool)][:quota]

        kind, want = channel.kind, quota * 2
        if kind == "two_tower":
            index = state.item_indices[channel.pool_id or "all"]
            if len(index) == 0: return []
            diversity = self.config.diversity
            vectors = user_vectors(self.suite.retrieval, user, (diversity.noise_sigma0, diversity.noise_enabled),
                                   (diversity.subsample_recent, diversity.subsample_extra, diversity.subsample_enabled), seed)
            query = retrieval_query(vectors, self.suite.score_weights if vectors.shape[0] > 1 else None)
            return keep(ann_search(index, query, min(len(index), want + len(blocked))))
        if kind in ("itemcf", "swing", "online_itemcf", "online_swing"):
            last_n = list(zip(user.last_n, user.last_n_taxonomies))
            items = u2i2i_retrieve(last_n, state.similarity[kind], want + len(blocked), seed, self.config.diversity.taxonomy_seed_cap)
            return keep(items)
        if kind == "u2a2i":
            return keep(u2a2i_retrieve(user.user_id, state.follow_graph, log_state, day, want, seed,
                                       self.config.special_groups.author_recency_days, blocked))
        if kind == "u2a2a2i":
            return keep(u2a2a2i_retrieve(user.user_id, state.follow_graph, state.authors, log_state, day, want, seed,
                                         self.config.special_groups.author_recency_days, blocked))
        if kind == "u2u2i":
            if state.users is None: return []
            return keep(u2u2i_retrieve(user.user_id, state.users, log_state, want, seed, exclude=blocked))
        if kind == "cache":
            return keep(self.cache.peek(user.user_id))
        if kind == "pool_direct":
            members = [i for i in pool.member_ids if i in allowed]
            ranked = sorted(((i, log_state.items[i].quality_stats.rates().click_rate) for i in members), key=lambda e: (-e[1], e[0]))
            return ranked[:quota]
        raise ConfigError(f"unknown channel kind {kind}")

    def retrieve(self, user: UserFeatures, group: str, allowed: Set[int], seed) -> List[ScoredCandidate]:
        """
        Run every channel open to the user's group and merge by quota
        """
        target = self.config.sizes.retrieval
        commenter = is_commenter(self.log_state, user.user_id, self.config.special_groups.commenter_rate)
        outputs = []
        for number, channel in enumerate(self.channels):
            quota = channel.quota_for(group)
            if quota <= 0.0 or not audience_matches(channel.audience, group, commenter): continue
            slots = max(1, int(math.floor(quota * target + 1e-9)))
            outputs.append((channel.channel_id, quota, self._channel(channel, user, allowed, slots, [*seed, number])))
        return merge_channels(outputs, target)

    def _fallback(self, allowed: Set[int]) -> List[ScoredCandidate]:
        state = self.state
        pool = [i for i in state.pools[FALLBACK_POOL].member_ids if i in allowed] or sorted(allowed)
        ranked = sorted(pool, key=lambda i: (-self.log_state.items[i].quality_stats.rates().click_rate, i))
        return [ScoredCandidate(i, 0.0, channel_id="fallback") for i in ranked[:self.config.sizes.retrieval]]

    # ------------------------------------------------------------------ scoring

    def _similarity(self, candidates: Sequence[ScoredCandidate]) -> np.ndarray:
        zero = np.zeros(self.suite.retrieval.dim)
        return cosine_matrix(np.stack([self.state.vectors.get(c.item_id, zero) for c in candidates]))

    def _decorate(self, candidates: Sequence[ScoredCandidate]) -> None:
        for c in candidates:
            item = self.log_state.items[c.item_id]
            c.taxonomy, c.cluster_id = item.taxonomy, self.state.clusters.get(c.item_id, item.cluster_id)

    def prerank(self, user: UserFeatures, group: str, candidates: List[ScoredCandidate]) -> List[ScoredCandidate]:
        """
        Keep the prerank survivors: the head by utility, the tail by MMR
        """
        ids = [c.item_id for c in candidates]
        p = np.clip(self.suite.prerank.predict(user, ids, [c.taxonomy for c in candidates]), CALIBRATION_EPS, 1.0 - CALIBRATION_EPS)
        scores = utility_scores(p, utility_contexts(self.log_state, user.user_id, group, ids, self.state.day), self.config.utility)
        for c, score, row in zip(candidates, scores, p):
            c.score, c.predictions = float(score), PredictionVector.from_array(row, Source.PRERANK)

        # Phase one by score, phase two by score plus diversity
        survivors = min(self.config.sizes.prerank, len(candidates))
        head_size = int(math.ceil(self.config.diversity.prerank_split * survivors))
        by_score = sorted(range(len(candidates)), key=lambda k: (-scores[k], ids[k]))
        head = by_score[:head_size]
        tail, _ = mmr_order(scores, self._similarity(candidates), ids, self.config.diversity.theta, None,
                            survivors - head_size, head) if survivors > head_size else ([], [])
        return [candidates[k] for k in head + tail]

    def rank(self, user: UserFeatures, group: str, candidates: List[ScoredCandidate]) -> np.ndarray:
        """
        Ranker probabilities, residual-calibrated for special groups; fills scores
        """
        samples = serve_samples(self.log_state, user, [c.item_id for c in candidates], self.state.day)
        p = np.clip(self.suite.ranker.predict(samples), CALIBRATION_EPS, 1.0 - CALIBRATION_EPS)
        source = Source.RANK
        if group in SPECIAL_GROUPS and self.config.special_groups.residual_calibration and self.suite.residual_trained:
            r = self.suite.residual.predict([group] * len(samples), p, np.array([s.dense for s in samples]))
            p, source = calibrated_probabilities(p, r), Source.RANK_CALIBRATED
        ids = [c.item_id for c in candidates]
        scores = utility_scores(p, utility_contexts(self.log_state, user.user_id, group, ids, self.state.day), self.config.utility)
        for c, score, row in zip(candidates, scores, p):
            c.score, c.predictions, c.diversity = float(score), PredictionVector.from_array(row, source), 0.0
        return p

    def scatter(self, candidates: List[ScoredCandidate]) -> List[ScoredCandidate]:
        """
        Soft scattering (MMR or DPP with a window) then hard scattering
        """
        diversity = self.config.diversity
        ordered = sorted(candidates, key=lambda c: (-c.score, c.item_id))
        if diversity.soft_scatter and ordered:
            similarity = self._similarity(ordered)
            if diversity.method == "dpp": ordered = dpp_rerank(ordered, similarity, diversity.window)
            else: ordered = mmr_rerank(ordered, similarity, diversity.theta, diversity.window)
        if diversity.hard_scatter:
            ordered, violations = hard_scatter(ordered, diversity.taxonomy_gap, diversity.cluster_gap, diversity.gap_semantics)
            self.stats.scatter_violations += violations
        return ordered

    # ------------------------------------------------------------------ request

    def serve_request(self, user_id: int, day: int, request: int = 0) -> List[ScoredCandidate]:
        """
        Serve one slate and write the side channels that feed training
        """
        if self.state is None or self.state.day != day: raise ValueError(f"pipeline snapshot is not for day {day}")
        sizes, log_state = self.config.sizes, self.log_state
        seed = [self.seed, day, user_id, request]
        request_id = f"{self.arm_id}:{day}:{user_id}:{request}"
        user = user_features(log_state, user_id)
        group = log_state.users[user_id].group_tag
        allowed = self._allowed(user_id, group, day)
        self.stats.requests += 1

        # Retrieval
        candidates = self.retrieve(user, group, allowed, seed)
        if not candidates:
            self.stats.fallbacks += 1
            candidates = self._fallback(allowed)
            if not candidates: return []
        self._decorate(candidates)

        # Preranking; the cut items are hard negatives
        survivors = self.prerank(user, group, candidates)
        kept = {c.item_id for c in survivors}
        self.side_logger.log_hard_negatives(day, request_id, user_id, [c.item_id for c in candidates if c.item_id not in kept])

        # Ranking; the survivors' predictions are the preranker's teacher
        p = self.rank(user, group, survivors)
        self.side_logger.log_teacher_predictions(day, request_id, user_id, [c.item_id for c in survivors], p.tolist(),
                                                 [c.score for c in survivors], "rank")
        ranked = sorted(survivors, key=lambda c: (-c.score, c.item_id))[:sizes.rank]

        # Scattering
        ordered = self.scatter(ranked)
        slate = ordered[:sizes.slate]

        # Exploration
        if self.config.diversity.exploration > 0.0 and slate:
            pool_ids = self.state.pools.get(EXPLORATION_POOL, self.state.pools["all"]).member_ids
            shown = {c.item_id for c in slate}
            pool = [ScoredCandidate(i, 0.0) for i in sorted(pool_ids) if i in allowed and i not in shown]
            self._decorate(pool)
            slate, warnings = inject_exploration(slate, pool, self.config.diversity.exploration, [*seed, 7])
            self.stats.exploration_warnings += warnings

        # Cache: drop what was shown, age the rest, keep cut high scorers
        shown = [c.item_id for c in slate]
        self.stats.cache_hits += sum(1 for c in slate if c.channel_id == "cache")
        for item_id in self.cache.evict_displayed(user_id, shown): self.side_logger.log_cache_event(day, user_id, item_id, "displayed", 0.0)
        for item_id in self.cache.tick(user_id): self.side_logger.log_cache_event(day, user_id, item_id, "expired", 0.0)
        if slate:
            median = float(np.median([c.score for c in slate]))
            for c in ordered[sizes.slate:]:
                if c.score > median and c.item_id not in shown:
                    self.cache.put(user_id, c.item_id, c.score)
                    self.side_logger.log_cache_event(day, user_id, c.item_id, "put", c.score)
        self.stats.distinct_taxonomies += len({c.taxonomy for c in slate})
        return slate

    def serve_fn(self):
        """
        Adapter to the simulator's serve function signature
        """
        def serve(user_id: int, view) -> List[ScoredCandidate]:
            return self.serve_request(user_id, view.day, view.request)
        return serve
