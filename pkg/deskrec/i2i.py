import json
import logging
import math
from collections import OrderedDict, defaultdict
from dataclasses import dataclass, field
from itertools import combinations
from typing import Dict, Iterable, List, Mapping, Sequence, Set, Tuple

import numpy as np

from deskrec.config import (AUTHOR_RECENCY_DAYS, EXPLICIT_EDGE_WEIGHT, IMPLICIT_EDGE_WEIGHT, IMPLICIT_MIN_CLICKS,
                            IMPLICIT_MIN_RATE, INTERACTION_WINDOW, SIMILARITY_TOP_M, SWING_ALPHA, TAXONOMY_SEED_CAP)
from deskrec.domain import EventType, InteractionEvent
from deskrec.eventlog import LogState

logger = logging.getLogger(__name__)

SIMILARITY_KINDS = ("itemcf", "swing", "embedding")

Candidates = List[Tuple[int, float]]


@dataclass
class SimilarityIndex:
    """
    Sparse item -> top-M neighbours, sorted by descending similarity then id
    """
    kind: str
    top_m: int = SIMILARITY_TOP_M
    neighbors: Dict[int, List[Tuple[int, float]]] = field(default_factory=dict)

    def get(self, item_id: int) -> List[Tuple[int, float]]:
        return self.neighbors.get(item_id, [])

    def sim(self, i: int, j: int) -> float:
        for k, value in self.get(i):
            if k == j: return value
        return 0.0

    def pairs(self) -> Dict[Tuple[int, int], float]:
        return {(i, j): s for i, row in self.neighbors.items() for j, s in row}

    def __len__(self) -> int:
        return len(self.neighbors)

    def to_json(self) -> dict:
        return {"kind": self.kind, "top_m": self.top_m,
                "neighbors": {str(i): [[j, s] for j, s in row] for i, row in sorted(self.neighbors.items())}}


def write_similarity_snapshot(path: str, index: SimilarityIndex) -> None:
    with open(path, "w") as f: json.dump(index.to_json(), f, sort_keys=True)


def _top_m(kind: str, scores: Mapping[Tuple[int, int], float], top_m: int) -> SimilarityIndex:
    """
    Symmetric pair scores (i < j) -> per-item sorted neighbour lists
    """
    rows: Dict[int, List[Tuple[int, float]]] = defaultdict(list)
    for (i, j), value in scores.items():
        if value <= 0.0 or i == j: continue
        rows[i].append((j, value))
        rows[j].append((i, value))
    neighbors = {i: sorted(row, key=lambda e: (-e[1], e[0]))[:top_m] for i, row in rows.items()}
    return SimilarityIndex(kind, top_m, dict(sorted(neighbors.items())))


def _supports(interactions: Iterable[Tuple[int, int]]) -> Tuple[Dict[int, Set[int]], Dict[int, Set[int]]]:
    users_of: Dict[int, Set[int]] = defaultdict(set)
    items_of: Dict[int, Set[int]] = defaultdict(set)
    for user_id, item_id in interactions:
        users_of[item_id].add(user_id)
        items_of[user_id].add(item_id)
    return users_of, items_of


def _co_counts(items_of: Mapping[int, Set[int]]) -> Dict[Tuple[int, int], int]:
    co: Dict[Tuple[int, int], int] = defaultdict(int)
    for items in items_of.values():
        for i, j in combinations(sorted(items), 2): co[(i, j)] += 1
    return co


def _itemcf_scores(co: Mapping[Tuple[int, int], int], users_of: Mapping[int, Set[int]]) -> Dict[Tuple[int, int], float]:
    """
    |U_i & U_j| / sqrt(|U_i| * |U_j|)
    """
    return {(i, j): count / math.sqrt(len(users_of[i]) * len(users_of[j])) for (i, j), count in co.items() if count > 0}


def _swing_scores(co: Mapping[Tuple[int, int], int], users_of: Mapping[int, Set[int]],
                  items_of: Mapping[int, Set[int]], alpha: float) -> Dict[Tuple[int, int], float]:
    """
    Sum over user pairs {u, v} in U_i & U_j of 1 / (alpha + |I_u & I_v|),
    accumulated in ascending (u, v) order
    """
    overlap: Dict[Tuple[int, int], int] = {}
    scores = {}
    for (i, j), count in co.items():
        if count < 2: continue
        total = 0.0
        for u, v in combinations(sorted(users_of[i] & users_of[j]), 2):
            if (u, v) not in overlap: overlap[(u, v)] = len(items_of[u] & items_of[v])
            total += 1.0 / (alpha + overlap[(u, v)])
        scores[(i, j)] = total
    return scores


def itemcf_similarity(interactions: Iterable[Tuple[int, int]], top_m: int = SIMILARITY_TOP_M) -> SimilarityIndex:
    """
    Cosine-normalized co-click similarity over (user, item) click pairs
    """
    users_of, items_of = _supports(interactions)
    return _top_m("itemcf", _itemcf_scores(_co_counts(items_of), users_of), top_m)


def swing_similarity(interactions: Iterable[Tuple[int, int]], alpha: float = SWING_ALPHA,
                     top_m: int = SIMILARITY_TOP_M) -> SimilarityIndex:
    """
    Swing: co-clicking user pairs weighted down by how much else they share
    """
    if alpha <= 0: raise ValueError("swing alpha must be > 0")
    users_of, items_of = _supports(interactions)
    return _top_m("swing", _swing_scores(_co_counts(items_of), users_of, items_of, alpha), top_m)


def embedding_similarity(item_ids: Sequence[int], vectors: np.ndarray, top_m: int = SIMILARITY_TOP_M) -> SimilarityIndex:
    """
    Cosine of item vectors, non-positive similarities dropped
    """
    if len(item_ids) == 0: return SimilarityIndex("embedding", top_m)
    ids = np.asarray(item_ids, dtype=np.int64)
    norms = np.linalg.norm(vectors, axis=1, keepdims=True)
    unit = vectors / np.where(norms > 0, norms, 1.0)

    # Row-wise top-M, one block of rows at a time
    neighbors = {}
    for start in range(0, len(ids), 512):
        cosine = unit[start:start + 512] @ unit.T
        for offset, row in enumerate(cosine):
            a = start + offset
            row[a] = 0.0
            order = np.lexsort((ids, -row))[:top_m]
            entries = [(int(ids[b]), float(row[b])) for b in order if row[b] > 0.0]
            if entries: neighbors[int(ids[a])] = entries
    return SimilarityIndex("embedding", top_m, dict(sorted(neighbors.items())))


def click_pairs(events: Iterable[InteractionEvent]) -> List[Tuple[int, int]]:
    return [(e.user_id, e.item_id) for e in events if e.event_type == EventType.CLICK]


def window_truncate(clicks: Iterable[Tuple[int, int]], window: int = INTERACTION_WINDOW) -> List[Tuple[int, int]]:
    """
    Each user's `window` most recent distinct clicked items; a repeat click
    refreshes recency
    """
    recent: Dict[int, "OrderedDict[int, None]"] = defaultdict(OrderedDict)
    for user_id, item_id in clicks:
        items = recent[user_id]
        items[item_id] = None
        items.move_to_end(item_id)
        while len(items) > window: items.popitem(last=False)
    return [(u, i) for u, items in sorted(recent.items()) for i in items]


class CoInteractionState:
    """
    Online co-click counters over a bounded per-user window of recent clicks
    """

    def __init__(self, window: int = INTERACTION_WINDOW, alpha: float = SWING_ALPHA):
        if window < 1: raise ValueError("window must be >= 1")
        self.window = window
        self.alpha = alpha
        self.recent: Dict[int, "OrderedDict[int, None]"] = defaultdict(OrderedDict)
        self.users_of: Dict[int, Set[int]] = defaultdict(set)
        self.co: Dict[Tuple[int, int], int] = defaultdict(int)
        self.touched: Set[int] = set()

    def items_of(self) -> Dict[int, Set[int]]:
        return {u: set(items) for u, items in self.recent.items() if items}

    def _pair(self, i: int, j: int) -> Tuple[int, int]:
        return (i, j) if i < j else (j, i)

    def add_click(self, user_id: int, item_id: int) -> None:
        items = self.recent[user_id]

        # Repeat click only refreshes recency
        if item_id in items: items.move_to_end(item_id); return
        for other in items: self.co[self._pair(item_id, other)] += 1
        items[item_id] = None
        self.users_of[item_id].add(user_id)
        self.touched.add(item_id)

        # Evict the oldest interaction beyond the window
        while len(items) > self.window:
            oldest, _ = items.popitem(last=False)
            for other in items:
                key = self._pair(oldest, other)
                self.co[key] -= 1
                if self.co[key] == 0: del self.co[key]
            self.users_of[oldest].discard(user_id)
            if not self.users_of[oldest]: del self.users_of[oldest]
            self.touched.add(oldest)

    def similarity_index(self, kind: str, top_m: int = SIMILARITY_TOP_M) -> SimilarityIndex:
        """
        Index derived from the current counters
        """
        if kind == "itemcf": return _top_m("online_itemcf", _itemcf_scores(self.co, self.users_of), top_m)
        if kind == "swing": return _top_m("online_swing", _swing_scores(self.co, self.users_of, self.items_of(), self.alpha), top_m)
        raise ValueError(f"unknown online similarity kind {kind}")


def online_update(state: CoInteractionState, event: InteractionEvent) -> CoInteractionState:
    """
    Fold one event into the online counters; non-click events are ignored
    """
    if event.event_type == EventType.CLICK: state.add_click(event.user_id, event.item_id)
    return state


def downsample_by_taxonomy(last_n: Sequence[Tuple[int, int]], cap: int = TAXONOMY_SEED_CAP, seed=0) -> List[int]:
    """
    Uniform per-taxonomy sample of at most `cap` (item, taxonomy) seeds;
    input order is kept
    """
    if cap < 1: raise ValueError("cap must be >= 1")
    groups: Dict[int, List[int]] = defaultdict(list)
    for position, (_, taxonomy) in enumerate(last_n): groups[taxonomy].append(position)

    # Sample oversized taxonomies in taxonomy order
    rng = np.random.default_rng(seed)
    keep: Set[int] = set()
    for taxonomy in sorted(groups):
        positions = groups[taxonomy]
        if len(positions) <= cap: keep.update(positions)
        else: keep.update(positions[k] for k in rng.choice(len(positions), size=cap, replace=False))
    return [last_n[p][0] for p in sorted(keep)]


def _rank(scores: Mapping[int, float], quota: int) -> Candidates:
    return sorted(((i, float(s)) for i, s in scores.items() if s > 0.0), key=lambda e: (-e[1], e[0]))[:quota]


def u2i2i_retrieve(last_n: Sequence[Tuple[int, int]], index: SimilarityIndex, quota: int, seed=0,
                   cap: int = TAXONOMY_SEED_CAP, exclude: Iterable[int] = ()) -> Candidates:
    """
    user -> item -> item: summed neighbour similarity over taxonomy-downsampled seeds
    """
    if quota < 1: raise ValueError("quota must be >= 1")
    if not last_n: return []
    seeds = downsample_by_taxonomy(last_n, cap, seed)
    blocked = {i for i, _ in last_n} | set(exclude)
    scores: Dict[int, float] = defaultdict(float)
    for seed_item in seeds:
        for j, value in index.get(seed_item):
            if j not in blocked: scores[j] += value
    return _rank(scores, quota)


@dataclass
class FollowGraph:
    """
    Explicit (follow events) and implicit (inferred) user -> author edges
    """
    explicit: Dict[int, Set[int]] = field(default_factory=dict)
    implicit: Dict[int, Set[int]] = field(default_factory=dict)
    explicit_weight: float = EXPLICIT_EDGE_WEIGHT
    implicit_weight: float = IMPLICIT_EDGE_WEIGHT

    def edges(self, user_id: int) -> Dict[int, float]:
        weights = {a: self.implicit_weight for a in self.implicit.get(user_id, ())}
        weights.update({a: self.explicit_weight for a in self.explicit.get(user_id, ())})
        return weights

    def followers(self) -> List[Tuple[int, int]]:
        """
        Explicit (user, author) pairs
        """
        return [(u, a) for u, authors in sorted(self.explicit.items()) for a in sorted(authors)]


def implicit_follow_edges(events: Iterable[InteractionEvent], explicit: Mapping[int, Set[int]], item_author: Mapping[int, int],
                          m_min: int = IMPLICIT_MIN_CLICKS, tau: float = IMPLICIT_MIN_RATE) -> Dict[int, Set[int]]:
    """
    user -> author iff >= m_min clicks on the author's items, click rate over
    impressions of them >= tau, and no explicit follow
    """
    if m_min < 1 or not 0.0 < tau <= 1.0: raise ValueError("m_min must be >= 1 and tau in (0, 1]")
    clicks: Dict[Tuple[int, int], int] = defaultdict(int)
    impressions: Dict[Tuple[int, int], int] = defaultdict(int)
    for event in events:
        key = (event.user_id, item_author[event.item_id])
        if event.event_type == EventType.IMPRESSION: impressions[key] += 1
        elif event.event_type == EventType.CLICK: clicks[key] += 1

    # Threshold rules
    edges: Dict[int, Set[int]] = defaultdict(set)
    for (user_id, author_id), count in sorted(clicks.items()):
        if count < m_min or author_id in explicit.get(user_id, ()): continue
        if count / max(1, impressions[(user_id, author_id)]) >= tau: edges[user_id].add(author_id)
    return dict(edges)


def build_follow_graph(log_state: LogState, day: int, window_days: int = AUTHOR_RECENCY_DAYS,
                       m_min: int = IMPLICIT_MIN_CLICKS, tau: float = IMPLICIT_MIN_RATE,
                       explicit_weight: float = EXPLICIT_EDGE_WEIGHT, implicit_weight: float = IMPLICIT_EDGE_WEIGHT) -> FollowGraph:
    """
    Follow graph at the end of `day`; implicit edges come from the trailing window
    """
    explicit = {u: set(user.followed_authors) for u, user in log_state.users.items() if user.followed_authors}
    item_author = {i: item.author_id for i, item in log_state.items.items()}
    events = log_state.events_between(day - window_days + 1, day)
    implicit = implicit_follow_edges(events, explicit, item_author, m_min, tau)
    return FollowGraph(explicit, implicit, explicit_weight, implicit_weight)


def _author_items(log_state: LogState, scores: Mapping[int, float], day: int, recency_days: int,
                  blocked: Set[int], quota: int) -> Candidates:
    """
    Recent items of scored authors, weighted by the item's smoothed click rate
    """
    items: Dict[int, float] = {}
    for author_id, weight in scores.items():
        for item_id in log_state.catalog.author_items_between(author_id, day - recency_days + 1, day):
            if item_id in blocked: continue
            items[item_id] = max(items.get(item_id, 0.0), weight * log_state.items[item_id].quality_stats.rates().click_rate)
    return _rank(items, quota)


def _blocked(log_state: LogState, user_id: int, exclude: Iterable[int]) -> Set[int]:
    user = log_state.users[user_id]
    return set(log_state.impressed.get(user_id, ())) | set(user.recent_items()) | set(exclude)


def u2a2i_retrieve(user_id: int, graph: FollowGraph, log_state: LogState, day: int, quota: int, seed=0,
                   recency_days: int = AUTHOR_RECENCY_DAYS, exclude: Iterable[int] = ()) -> Candidates:
    """
    user -> followed author (explicit or implicit) -> recent item
    """
    if quota < 1: raise ValueError("quota must be >= 1")
    authors = graph.edges(user_id)
    if not authors: return []
    return _author_items(log_state, authors, day, recency_days, _blocked(log_state, user_id, exclude), quota)


def author_similarity(graph: FollowGraph, top_m: int = SIMILARITY_TOP_M) -> SimilarityIndex:
    """
    ItemCF-form similarity of authors over shared explicit followers
    """
    index = itemcf_similarity(graph.followers(), top_m)
    index.kind = "author_itemcf"
    return index


def u2a2a2i_retrieve(user_id: int, graph: FollowGraph, authors: SimilarityIndex, log_state: LogState, day: int, quota: int,
                     seed=0, recency_days: int = AUTHOR_RECENCY_DAYS, exclude: Iterable[int] = ()) -> Candidates:
    """
    user -> followed author -> similar author -> recent item
    """
    if quota < 1: raise ValueError("quota must be >= 1")
    followed = graph.edges(user_id)
    if not followed: return []
    scores: Dict[int, float] = defaultdict(float)
    for author_id, weight in followed.items():
        for similar, value in authors.get(author_id):
            if similar not in followed: scores[similar] += weight * value
    return _author_items(log_state, scores, day, recency_days, _blocked(log_state, user_id, exclude), quota)


def user_similarity(clicks: Iterable[Tuple[int, int]], top_m: int = SIMILARITY_TOP_M) -> SimilarityIndex:
    """
    ItemCF-form similarity of users over shared clicked items
    """
    index = itemcf_similarity(((item_id, user_id) for user_id, item_id in clicks), top_m)
    index.kind = "user_itemcf"
    return index


def u2u2i_retrieve(user_id: int, users: SimilarityIndex, log_state: LogState, quota: int, seed=0,
                   per_user: int = 10, exclude: Iterable[int] = ()) -> Candidates:
    """
    user -> similar user -> their recent clicks
    """
    if quota < 1: raise ValueError("quota must be >= 1")
    blocked = _blocked(log_state, user_id, exclude)
    scores: Dict[int, float] = defaultdict(float)
    for other, value in users.get(user_id):
        if other not in log_state.users: continue
        for item_id in log_state.users[other].recent_items(per_user):
            if item_id not in blocked: scores[item_id] += value
    return _rank(scores, quota)
