import json
import logging
from typing import Dict, Mapping, Optional

from deskrec.domain import EngagementStats, Item, ItemPool, PoolSpec, engagement_rates

logger = logging.getLogger(__name__)

POOL_KINDS = ("all", "recent", "rate_threshold", "quality", "group_quality")


def default_pool_specs(quality_threshold: float = 0.3) -> Dict[str, PoolSpec]:
    """
    Pools the default channel registry refers to
    """
    return {
        "all": PoolSpec("all"),
        "recent_7d": PoolSpec("recent", window_days=7),
        "high_follow": PoolSpec("rate_threshold", rate="follow_per_click", threshold=0.2),
        "high_comment": PoolSpec("rate_threshold", rate="comment_per_click", threshold=0.2),
        "quality": PoolSpec("quality", threshold=quality_threshold, exclude_low_quality=True),
    }


def build_pool(pool_id: str, spec: PoolSpec, catalog: Mapping[int, Item], day: int,
               stats: Optional[Mapping[int, EngagementStats]] = None) -> ItemPool:
    """
    Items satisfying `spec` at `day`. `stats` overrides the items' own
    counters (e.g. per-demographic-group counters); an empty pool is legal.
    """
    if not catalog: raise ValueError("catalog must not be empty")
    if spec.kind not in POOL_KINDS: raise ValueError(f"unknown pool kind {spec.kind}")

    # Evaluate the predicate per item
    members = []
    for item_id, item in catalog.items():

        # Not yet published
        if item.publish_day > day: continue
        if spec.exclude_low_quality and item.is_low_quality: continue

        # Recency window (day - window, day]
        if spec.kind == "recent":
            if item.publish_day > day - spec.window_days: members.append(item_id)
            continue

        # Rate predicates
        if spec.kind in ("rate_threshold", "group_quality", "quality"):
            counters = item.quality_stats if stats is None else stats.get(item_id, EngagementStats())
            rates = engagement_rates(counters, spec.a, spec.b)
            name = "click_rate" if spec.kind == "quality" else spec.rate
            if rates.get(name) >= spec.threshold: members.append(item_id)
            continue

        # Everything published
        members.append(item_id)

    # Return the pool
    return ItemPool(pool_id, frozenset(members), spec, day)


def group_stats_for(group_stats: Mapping, demographic_group: str) -> Dict[int, EngagementStats]:
    """
    Per-item counters restricted to one demographic group
    """
    return {item_id: counters for (group, item_id), counters in group_stats.items() if group == demographic_group}


def write_pools_snapshot(path: str, pools: Mapping[str, ItemPool]) -> None:
    """
    Persist pool memberships keyed by pool id
    """
    data = {pool_id: {"day": pool.day, "spec": pool.spec.describe(), "members": sorted(pool.member_ids)}
            for pool_id, pool in sorted(pools.items())}
    with open(path, "w") as f: json.dump(data, f, sort_keys=True)
