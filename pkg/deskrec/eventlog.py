import json
import logging
from collections import defaultdict, deque
from typing import Dict, Iterable, Iterator, List, Optional, Set, Tuple

from BTrees.OOBTree import OOBTree

from deskrec.config import LAST_N, SMOOTHING_A, SMOOTHING_B
from deskrec.domain import (COUNTER_OF, NEEDS_IMPRESSION, EngagementStats, EventType, InteractionEvent, Item, User)
from deskrec.errors import InvariantViolation, UnknownEntityError
from deskrec.index import ActivityIndex, CatalogIndex

logger = logging.getLogger(__name__)


class LogState:
    """
    Single-writer state derived from the event log: users, items, follow
    graph, engagement counters and ordered indices. Readers take snapshots
    between days.
    """

    def __init__(self, last_n: int = LAST_N):
        self.last_n = last_n
        self.users: Dict[int, User] = {}
        self.items: Dict[int, Item] = {}
        self.events = OOBTree()
        self.followers: Dict[int, Set[int]] = defaultdict(set)
        self.user_stats: Dict[int, EngagementStats] = defaultdict(EngagementStats)
        self.group_stats: Dict[Tuple[str, int], EngagementStats] = defaultdict(EngagementStats)
        self.impressed: Dict[int, Set[int]] = defaultdict(set)
        self.share_visits: Dict[Tuple[int, int], int] = defaultdict(int)
        self.kol_observed: Set[int] = set()
        self.catalog = CatalogIndex()
        self.activity = ActivityIndex()
        self._first_impression: Dict[Tuple[int, int, int], int] = {}

    # ------------------------------------------------------------------ catalog

    def register_user(self, user_id: int, signup_day: int, demographic_group: str = "g0", prior_active_days: Iterable[int] = ()) -> User:
        """
        Add a user to the catalog; prior active days seed the group history
        """
        if user_id in self.users: return self.users[user_id]
        user = User(user_id, signup_day, demographic_group, last_n=deque(maxlen=self.last_n))
        self.users[user_id] = user
        self.activity.mark_many(user_id, prior_active_days)
        return user

    def register_item(self, item: Item) -> Item:
        """
        Add an item to the catalog and the publish-day index
        """
        if item.item_id in self.items: return self.items[item.item_id]
        self.items[item.item_id] = item
        self.catalog.add(item.item_id, item.author_id, item.publish_day)
        return item

    # ------------------------------------------------------------------ ingestion

    def ingest(self, event: InteractionEvent) -> "LogState":
        """
        Apply one event; exact duplicates are ignored
        """

        # Field-level checks
        event.validate()
        if event.user_id not in self.users: raise UnknownEntityError(f"unknown user {event.user_id}")
        if event.item_id not in self.items: raise UnknownEntityError(f"unknown item {event.item_id}")

        # Idempotence on exact duplicates
        key = event.key()
        if key in self.events: return self

        # Engagements need an earlier impression of the same (user, item, day)
        triple = (event.user_id, event.item_id, event.day)
        if event.event_type in NEEDS_IMPRESSION:
            first = self._first_impression.get(triple)
            if first is None or first >= event.seq:
                raise InvariantViolation(f"{event.event_type.value} without prior impression: {event.to_json()}")

        # Record the event
        self.events[key] = event
        user, item = self.users[event.user_id], self.items[event.item_id]

        # Impressions: counters, activity and the seen set
        if event.event_type == EventType.IMPRESSION:
            if triple not in self._first_impression or event.seq < self._first_impression[triple]: self._first_impression[triple] = event.seq
            self.activity.mark(event.user_id, event.day)
            self.impressed[event.user_id].add(event.item_id)

        # External visits only feed the KOL score
        elif event.event_type == EventType.EXTERNAL_VISIT:
            self.share_visits[(event.user_id, event.day)] += 1
            return self

        # Positive interactions enter last-n
        else: user.last_n.append((event.item_id, event.event_type.value, event.day))

        # Follow graph
        if event.event_type == EventType.FOLLOW:
            user.followed_authors.add(item.author_id)
            self.followers[item.author_id].add(event.user_id)

        # Counters
        counter = COUNTER_OF[event.event_type]
        item.quality_stats.bump(counter)
        self.user_stats[event.user_id].bump(counter)
        self.group_stats[(user.demographic_group, event.item_id)].bump(counter)
        return self

    def ingest_many(self, events: Iterable[InteractionEvent]) -> "LogState":
        for event in events: self.ingest(event)
        return self

    # ------------------------------------------------------------------ reads

    def events_between(self, first_day: int, last_day: int) -> List[InteractionEvent]:
        """
        Events with first_day <= day <= last_day in (day, seq) order
        """
        if first_day > last_day: return []
        return list(self.events.values(min=(first_day,), max=(last_day + 1,), excludemax=True))

    def events_on(self, day: int) -> List[InteractionEvent]:
        return self.events_between(day, day)

    def all_events(self) -> Iterator[InteractionEvent]:
        return iter(self.events.values())

    def follower_count(self, author_id: int) -> int:
        return len(self.followers.get(author_id, ()))

    def update_kol_scores(self, day: int, decay: float, scale: float) -> None:
        """
        Daily EMA of external visits attributed to each user's shares
        """
        visitors = {u for (u, d) in self.share_visits if d == day} | self.kol_observed
        for user_id in sorted(visitors):
            if user_id not in self.users: continue
            visits = self.share_visits.get((user_id, day), 0)
            previous = self.users[user_id].kol_score if user_id in self.kol_observed else None
            self.users[user_id].kol_score = kol_ema(previous, visits, decay, scale)
            self.kol_observed.add(user_id)

    def snapshot(self, day: int, a: float = SMOOTHING_A, b: float = SMOOTHING_B) -> dict:
        """
        JSON-ready dump of counters and user state at the end of `day`
        """
        return {
            "day": day,
            "items": {str(i): {**item.quality_stats.to_dict(), "click_rate": item.quality_stats.rates(a, b).click_rate,
                               "cluster_id": item.cluster_id} for i, item in sorted(self.items.items())},
            "users": {str(u): {"follow_count": user.follow_count, "kol_score": user.kol_score, "group_tag": user.group_tag}
                      for u, user in sorted(self.users.items())},
        }


def kol_ema(previous: Optional[float], visits: int, decay: float, scale: float) -> float:
    """
    EMA of scaled external visits; the first observation initializes the score
    """
    value = visits / scale
    if previous is None: return value
    return decay * previous + (1.0 - decay) * value


def ingest_event(log_state: LogState, event: InteractionEvent) -> LogState:
    """
    Append one event to the log state and update the derived counters
    """
    return log_state.ingest(event)


def write_events_jsonl(path: str, events: Iterable[InteractionEvent], append: bool = True) -> None:
    """
    Write events as line-delimited JSON, one event per line
    """
    with open(path, "a" if append else "w") as f:
        for event in events: f.write(json.dumps(event.to_json()) + "\n")


def read_events_jsonl(path: str) -> List[InteractionEvent]:
    """
    Read a JSONL event log
    """
    events = []
    with open(path, "r") as f:
        for number, line in enumerate(f, start=1):
            if not line.strip(): continue
            try: events.append(InteractionEvent.from_json(json.loads(line)))
            except (json.JSONDecodeError, KeyError, ValueError) as e: raise InvariantViolation(f"{path}:{number}: bad event record ({e})") from e
    return events
