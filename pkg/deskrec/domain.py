from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Deque, Dict, List, Optional, Set, Tuple

import numpy as np

from deskrec.config import LAST_N, TARGETS, GROUP_ACTIVE, SMOOTHING_A, SMOOTHING_B


class EventType(str, Enum):
    IMPRESSION = "impression"
    CLICK = "click"
    LIKE = "like"
    SHARE = "share"
    FOLLOW = "follow"
    COMMENT = "comment"
    EXTERNAL_VISIT = "external_visit"


# Engagements must follow an impression of the same (user, item, day)
NEEDS_IMPRESSION = frozenset({EventType.CLICK, EventType.LIKE, EventType.SHARE, EventType.FOLLOW, EventType.COMMENT})

# Counter name per event type
COUNTER_OF = {
    EventType.IMPRESSION: "impressions",
    EventType.CLICK: "clicks",
    EventType.LIKE: "likes",
    EventType.SHARE: "shares",
    EventType.FOLLOW: "follows",
    EventType.COMMENT: "comments",
}


@dataclass
class User:
    user_id: int
    signup_day: int
    demographic_group: str = "g0"
    group_tag: str = GROUP_ACTIVE
    followed_authors: Set[int] = field(default_factory=set)
    kol_score: float = 0.0
    last_n: Deque[Tuple[int, str, int]] = field(default_factory=lambda: deque(maxlen=LAST_N))

    @property
    def follow_count(self) -> int:
        return len(self.followed_authors)

    def recent_items(self, limit: Optional[int] = None) -> List[int]:
        """
        Distinct item ids of last-n, most recent first
        """
        seen, items = set(), []
        for item_id, _, _ in reversed(self.last_n):
            if item_id in seen: continue
            seen.add(item_id); items.append(item_id)
            if limit is not None and len(items) >= limit: break
        return items


@dataclass
class EngagementStats:
    impressions: int = 0
    clicks: int = 0
    likes: int = 0
    shares: int = 0
    follows: int = 0
    comments: int = 0

    def bump(self, counter: str, amount: int = 1) -> None:
        setattr(self, counter, getattr(self, counter) + amount)

    def rates(self, a: float = SMOOTHING_A, b: float = SMOOTHING_B) -> "RateRecord":
        return engagement_rates(self, a, b)

    def to_dict(self) -> Dict[str, int]:
        return {"impressions": self.impressions, "clicks": self.clicks, "likes": self.likes,
                "shares": self.shares, "follows": self.follows, "comments": self.comments}


@dataclass(frozen=True)
class RateRecord:
    """
    Smoothed rates: (x + a) / (n + a + b), per impression and per click
    """
    click_rate: float
    per_impression: Dict[str, float]
    per_click: Dict[str, float]

    def get(self, name: str) -> float:
        """
        Look a rate up by name, e.g. "click_rate", "follow_per_click", "like_per_impression"
        """
        if name == "click_rate": return self.click_rate
        target, _, base = name.partition("_per_")
        table = self.per_click if base == "click" else self.per_impression if base == "impression" else None
        if table is None or target not in table: raise KeyError(f"unknown rate {name}")
        return table[target]


def engagement_rates(stats: EngagementStats, a: float = SMOOTHING_A, b: float = SMOOTHING_B) -> RateRecord:
    """
    Smoothed per-impression and per-click rates for every engagement type
    """
    if a <= 0 or b <= 0: raise ValueError("smoothing pseudo-counts must be > 0")

    # Smoothed ratio keeps every rate strictly inside (0, 1)
    def smooth(x: int, n: int) -> float: return (x + a) / (n + a + b)

    per_impression, per_click = {}, {}
    for target in TARGETS[1:]:
        count = getattr(stats, target + "s")
        per_impression[target] = smooth(count, stats.impressions)
        per_click[target] = smooth(count, stats.clicks)
    return RateRecord(smooth(stats.clicks, stats.impressions), per_impression, per_click)


@dataclass
class Item:
    item_id: int
    author_id: int
    publish_day: int
    taxonomy: int
    cluster_id: int = 0
    quality_stats: EngagementStats = field(default_factory=EngagementStats)
    is_low_quality: bool = False


@dataclass(frozen=True)
class InteractionEvent:
    day: int
    seq: int
    user_id: int
    item_id: int
    event_type: EventType
    position: Optional[int] = None
    channel_id: Optional[str] = None
    arm_id: str = "control"

    def key(self) -> Tuple[int, int, int, int, str]:
        return (self.day, self.seq, self.user_id, self.item_id, self.event_type.value)

    def validate(self) -> None:
        """
        Check the field-level invariants of the event schema
        """
        if (self.event_type == EventType.IMPRESSION) != (self.position is not None):
            raise ValueError(f"position must be present iff impression: {self}")
        if self.position is not None and self.position < 0: raise ValueError(f"negative position: {self}")
        if self.seq < 0: raise ValueError(f"negative seq: {self}")

    def to_json(self) -> dict:
        return {"day": self.day, "seq": self.seq, "user_id": self.user_id, "item_id": self.item_id,
                "event_type": self.event_type.value, "position": self.position,
                "channel_id": self.channel_id, "arm_id": self.arm_id}

    @classmethod
    def from_json(cls, record: dict) -> "InteractionEvent":
        return cls(day=record["day"], seq=record["seq"], user_id=record["user_id"], item_id=record["item_id"],
                   event_type=EventType(record["event_type"]), position=record.get("position"),
                   channel_id=record.get("channel_id"), arm_id=record.get("arm_id", "control"))


@dataclass(frozen=True)
class PoolSpec:
    """
    Predicate describing an item pool; `kind` picks the rule
    """
    kind: str                           # all | recent | rate_threshold | quality | group_quality
    window_days: int = 7
    rate: str = "follow_per_click"
    threshold: float = 0.5
    a: float = SMOOTHING_A
    b: float = SMOOTHING_B
    demographic_group: Optional[str] = None
    exclude_low_quality: bool = False

    def describe(self) -> str:
        if self.kind == "recent": return f"published within past {self.window_days} days"
        if self.kind in ("rate_threshold", "group_quality"):
            scope = f" among {self.demographic_group}" if self.demographic_group else ""
            return f"{self.rate} >= {self.threshold} smoothed{scope}"
        if self.kind == "quality": return f"click_rate >= {self.threshold}, not low quality"
        return "all items"


@dataclass
class ItemPool:
    pool_id: str
    member_ids: frozenset
    spec: PoolSpec
    day: int = 0

    def __len__(self) -> int:
        return len(self.member_ids)

    def __contains__(self, item_id: int) -> bool:
        return item_id in self.member_ids


class Source(str, Enum):
    PRERANK = "prerank"
    RANK = "rank"
    RANK_CALIBRATED = "rank_calibrated"


@dataclass(frozen=True)
class PredictionVector:
    p_click: float
    p_like: float
    p_share: float
    p_follow: float
    p_comment: float
    source: Source = Source.RANK

    def __post_init__(self):
        for value in self.as_array():
            if not 0.0 < value < 1.0: raise ValueError(f"prediction outside (0, 1): {self}")

    def as_array(self) -> np.ndarray:
        return np.array([self.p_click, self.p_like, self.p_share, self.p_follow, self.p_comment])

    @classmethod
    def from_array(cls, values, source: Source = Source.RANK) -> "PredictionVector":
        return cls(*(float(v) for v in values), source=source)

    def get(self, target: str) -> float:
        return getattr(self, "p_" + target)


@dataclass
class ScoredCandidate:
    item_id: int
    score: float = 0.0
    diversity: float = 0.0
    predictions: Optional[PredictionVector] = None
    channel_id: Optional[str] = None
    taxonomy: int = 0
    cluster_id: int = 0
