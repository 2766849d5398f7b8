import logging
from collections import defaultdict
from dataclasses import asdict, dataclass
from typing import Dict, Iterable, Mapping, Optional, Sequence, Set

import numpy as np

from deskrec.domain import EventType, InteractionEvent
from deskrec.index import ActivityIndex

logger = logging.getLogger(__name__)

MAU_WINDOW = 30


def lt_k(activity: ActivityIndex, user_id: int, day: int, k: int, last_day: int) -> Optional[int]:
    """
    Distinct active days of the user in [day, day + k - 1]; None while the
    window is not fully simulated
    """
    if k < 1: raise ValueError("k must be >= 1")
    if not activity.is_active(user_id, day): raise ValueError(f"user {user_id} not active on day {day}")
    if day + k - 1 > last_day: return None
    return activity.count_between(user_id, day, day + k - 1)


def mean_lt(activity: ActivityIndex, users: Iterable[int], day: int, k: int, last_day: int) -> Optional[float]:
    """
    Mean LT-k over the given users active on `day`
    """
    values = [lt_k(activity, u, day, k, last_day) for u in users if activity.is_active(u, day)]
    values = [v for v in values if v is not None]
    return float(np.mean(values)) if values else None


def mau(activity: ActivityIndex, users: Iterable[int], day: int, window: int = MAU_WINDOW) -> int:
    return sum(1 for u in users if activity.count_between(u, day - window + 1, day) > 0)


@dataclass
class DailyRow:
    day: int
    arm_id: str
    dau: int = 0
    mau: int = 0
    duration: float = 0.0
    impressions: int = 0
    clicks: int = 0
    likes: int = 0
    shares: int = 0
    follows: int = 0
    comments: int = 0
    ctr: float = 0.0
    like_rate: float = 0.0
    share_rate: float = 0.0
    follow_rate: float = 0.0
    comment_rate: float = 0.0
    participation: float = 0.0
    published_items: int = 0
    slate_taxonomies: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


def daily_metrics(events: Sequence[InteractionEvent], day: int, arm_id: str, minutes: Mapping[int, float] = None,
                  publishing_users: Set[int] = frozenset(), published_items: int = 0, mau_value: int = 0,
                  taxonomy_of: Optional[Mapping[int, int]] = None) -> DailyRow:
    """
    One arm's row for a fully simulated day. Active means at least one impression.
    """
    row = DailyRow(day, arm_id, mau=mau_value, published_items=published_items)
    counts: Dict[EventType, int] = defaultdict(int)
    active: Set[int] = set()
    slates: Dict[int, Set[int]] = defaultdict(set)
    for event in events:
        if event.day != day or event.arm_id != arm_id: continue
        counts[event.event_type] += 1
        if event.event_type == EventType.IMPRESSION:
            active.add(event.user_id)
            if taxonomy_of is not None: slates[event.user_id].add(taxonomy_of[event.item_id])
    if not active: return row

    # Counts and rates
    row.dau = len(active)
    row.impressions, row.clicks = counts[EventType.IMPRESSION], counts[EventType.CLICK]
    row.likes, row.shares, row.follows, row.comments = (counts[EventType.LIKE], counts[EventType.SHARE],
                                                        counts[EventType.FOLLOW], counts[EventType.COMMENT])
    row.ctr = row.clicks / row.impressions
    if row.clicks:
        row.like_rate, row.share_rate = row.likes / row.clicks, row.shares / row.clicks
        row.follow_rate, row.comment_rate = row.follows / row.clicks, row.comments / row.clicks

    # Duration and participation per DAU
    row.duration = sum((minutes or {}).get(u, 0.0) for u in active) / row.dau
    row.participation = len(set(publishing_users)) / row.dau
    if slates: row.slate_taxonomies = float(np.mean([len(t) for t in slates.values()]))
    return row


def expected_calibration_error(p: Sequence[float], y: Sequence[float], bins: int = 10) -> float:
    """
    Weighted mean |mean(y) - mean(p)| over equal-width probability bins
    """
    p = np.asarray(p, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(p) != len(y): raise ValueError("p and y must have the same length")
    if len(p) == 0: return 0.0
    which = np.minimum((p * bins).astype(int), bins - 1)
    error = 0.0
    for b in range(bins):
        members = which == b
        if members.any(): error += members.sum() / len(p) * abs(y[members].mean() - p[members].mean())
    return float(error)
