import hashlib
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Set, Tuple

import numpy as np
from scipy.special import expit

from deskrec.config import SimConfig
from deskrec.domain import EventType, InteractionEvent, Item
from deskrec.errors import ConfigError, InvariantViolation

logger = logging.getLogger(__name__)

# Random stream tags, mixed into every seed tuple
STREAM_INIT = 1
STREAM_SIGNUP = 2
STREAM_PUBLISH = 3
STREAM_SERVE = 4
STREAM_RETURN = 5

# Days of history given to the initial cohort
INITIAL_SIGNUP_SPAN = 60
INITIAL_PUBLISH_SPAN = 30
INITIAL_HISTORY_DAYS = 14
INITIAL_ACTIVE_RATE = 0.5

# Dirichlet-like concentration of latent topic vectors
TOPIC_CONCENTRATION = 0.5

# Bound on the publish exponent; only keeps exp and the Poisson draw finite, the daily cap still applies
MAX_PUBLISH_EXPONENT = math.log(1e6)

# Daily decay of a returning-user's satisfaction while away
SATISFACTION_DECAY = 0.8

# Beta priors of the per-user engagement propensities (given a click)
PROPENSITY_PRIORS = {"like": (2.0, 8.0), "share": (1.0, 19.0), "follow": (1.0, 9.0), "comment": (1.0, 14.0)}
KOL_PRIOR = (0.5, 4.0)


def _unit(vector: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(vector)
    return vector / norm if norm > 0 else np.full_like(vector, 1.0 / np.sqrt(len(vector)))


def _topic_vector(rng: np.random.Generator, topics: int) -> np.ndarray:
    return _unit(rng.gamma(TOPIC_CONCENTRATION, 1.0, topics) + 1e-12)


@dataclass
class SimUser:
    user_id: int
    signup_day: int
    demographic_group: str
    z: np.ndarray
    propensities: Dict[str, float]
    kol_factor: float
    followed: Set[int] = field(default_factory=set)
    active_today: bool = False
    churned: bool = False
    satisfaction: float = 0.0
    inactive_streak: int = 0
    author_id: Optional[int] = None
    prior_active_days: Tuple[int, ...] = ()


@dataclass
class SimItem:
    item_id: int
    author_id: int
    publish_day: int
    z: np.ndarray
    taxonomy: int
    quality: float
    is_low_quality: bool

    def to_item(self) -> Item:
        return Item(self.item_id, self.author_id, self.publish_day, self.taxonomy, is_low_quality=self.is_low_quality)


@dataclass
class SimAuthor:
    author_id: int
    z: np.ndarray
    energy: float = 0.0
    user_id: Optional[int] = None


@dataclass(frozen=True)
class AuthorFeedback:
    new_followers: int = 0
    new_comments: int = 0


@dataclass
class DaySummary:
    satisfaction: float
    follow_count: int


@dataclass
class DayLedger:
    """
    Per-day quantities that are not events: consumption minutes and publishing
    """
    day: int
    minutes: Dict[int, float] = field(default_factory=dict)
    publishing_authors: Set[int] = field(default_factory=set)
    publishing_users: Set[int] = field(default_factory=set)
    published_items: int = 0
    # Items per publishing author-user; authors without an account count only in the total
    published_by_user: Dict[int, int] = field(default_factory=dict)


@dataclass
class DayStart:
    day: int
    new_users: List[SimUser]
    new_items: List[Item]


@dataclass
class DayResult:
    day: int
    events: List[InteractionEvent]
    new_users: List[SimUser]
    new_items: List[Item]
    ledger: DayLedger
    arms: Dict[int, str] = field(default_factory=dict)


class WorldView:
    """
    What a serving function may see: the published catalog and the day
    """

    def __init__(self, world: "World", request: int = 0):
        self.world = world
        self.day = world.day
        self.request = request

    def published_items(self) -> List[int]:
        return self.world.published_ids()

    def item_taxonomy(self, item_id: int) -> int:
        return self.world.items[item_id].taxonomy


# serve_fn(user_id, view) -> ordered slate (ScoredCandidate objects or item ids)
ServeFn = Callable[[int, WorldView], Sequence]


class World:
    """
    Latent state of the synthetic population. Users and items carry unit
    topic vectors over `topics` latent topics; authors publish daily and
    users return with a probability driven by yesterday's satisfaction.
    """

    def __init__(self, config: SimConfig, seed: int):
        self.config = config
        self.seed = seed
        self.day = 0
        self.users: Dict[int, SimUser] = {}
        self.items: Dict[int, SimItem] = {}
        self.authors: Dict[int, SimAuthor] = {}
        self.next_user_id = 0
        self.next_item_id = 0
        self.next_author_id = 0
        self.feedback: Dict[int, AuthorFeedback] = {}
        self.ledgers: Dict[int, DayLedger] = {}
        self.started: Optional[DayStart] = None
        self._published_cache: Tuple[int, int, List[int]] = (-1, -1, [])
        self._matrix_cache: Optional[Tuple[int, int, np.ndarray, np.ndarray]] = None

    def rng(self, *tags: int) -> np.random.Generator:
        """
        Independent stream for (seed, *tags); negative tags are folded into range
        """
        return np.random.default_rng([self.seed & 0xFFFFFFFF] + [int(t) % (1 << 32) for t in tags])

    # ------------------------------------------------------------------ population

    def new_user(self, signup_day: int, rng: np.random.Generator) -> SimUser:
        config = self.config
        user = SimUser(
            user_id=self.next_user_id, signup_day=signup_day,
            demographic_group=f"g{int(rng.integers(config.demographic_groups))}",
            z=_topic_vector(rng, config.topics),
            propensities={name: float(rng.beta(*prior)) for name, prior in PROPENSITY_PRIORS.items()},
            kol_factor=float(rng.beta(*KOL_PRIOR)),
        )
        self.users[user.user_id] = user
        self.next_user_id += 1
        return user

    def new_author(self, rng: np.random.Generator, user_id: Optional[int] = None) -> SimAuthor:
        author = SimAuthor(self.next_author_id, _topic_vector(rng, self.config.topics), float(rng.normal(0.0, 0.3)), user_id)
        self.authors[author.author_id] = author
        if user_id is not None: self.users[user_id].author_id = author.author_id
        self.next_author_id += 1
        return author

    def new_item(self, author: SimAuthor, publish_day: int, rng: np.random.Generator) -> SimItem:
        config = self.config
        z = _unit(np.abs(author.z + config.item_noise * rng.normal(0.0, 1.0, config.topics)))
        low = bool(rng.random() < config.low_quality_fraction)
        quality = float(rng.uniform(0.5, 1.5)) * (0.5 if low else 1.0)
        item = SimItem(self.next_item_id, author.author_id, publish_day, z, int(np.argmax(z)), quality, low)
        self.items[item.item_id] = item
        self.next_item_id += 1
        return item

    # ------------------------------------------------------------------ catalog reads

    def published_ids(self) -> List[int]:
        """
        Ids of items published on or before the current day, ascending
        """
        day, count, ids = self._published_cache
        if day != self.day or count != len(self.items):
            ids = sorted(i for i, item in self.items.items() if item.publish_day <= self.day)
            self._published_cache = (self.day, len(self.items), ids)
        return ids

    def item_matrix(self) -> Tuple[np.ndarray, np.ndarray]:
        """
        (ids, topic matrix) of the published catalog
        """
        ids = self.published_ids()
        if self._matrix_cache is None or self._matrix_cache[:2] != (self.day, len(ids)):
            matrix = np.stack([self.items[i].z for i in ids]) if ids else np.zeros((0, self.config.topics))
            self._matrix_cache = (self.day, len(ids), np.array(ids, dtype=np.int64), matrix)
        return self._matrix_cache[2], self._matrix_cache[3]

    def active_users(self) -> List[int]:
        return sorted(u for u, user in self.users.items() if user.active_today and not user.churned)

    # ------------------------------------------------------------------ day start

    def begin_day(self) -> DayStart:
        """
        Sign-ups, new authors and publishing for the current day. Idempotent
        within a day so the runner can register the catalog before serving.
        """
        if self.started is not None and self.started.day == self.day: return self.started
        config, day = self.config, self.day
        rng = self.rng(STREAM_SIGNUP, day)

        # Sign-ups are active on their first day
        new_users = []
        for _ in range(config.daily_new_users):
            user = self.new_user(day, rng)
            user.active_today = True
            new_users.append(user)

        # New authors; some are also today's new users
        for _ in range(config.daily_new_authors):
            candidates = [u.user_id for u in new_users if u.author_id is None]
            user_id = candidates[0] if candidates and rng.random() < config.author_user_fraction else None
            self.new_author(rng, user_id)

        # Publishing from yesterday's feedback
        ledger = DayLedger(day)
        new_items = []
        for author_id in sorted(self.authors):
            author = self.authors[author_id]

            # Author-users publish only on days they show up
            if author.user_id is not None and not self.users[author.user_id].active_today: continue
            items = author_publish(self, author, self.feedback.get(author_id, AuthorFeedback()))
            if not items: continue
            ledger.publishing_authors.add(author_id)
            if author.user_id is not None:
                ledger.publishing_users.add(author.user_id)
                ledger.published_by_user[author.user_id] = ledger.published_by_user.get(author.user_id, 0) + len(items)
            ledger.published_items += len(items)
            new_items.extend(item.to_item() for item in items)
        self.feedback = {}
        self.ledgers[day] = ledger

        # Remember the start of this day
        self.started = DayStart(day, new_users, new_items)
        return self.started

    def state_digest(self) -> str:
        """
        SHA-256 over the latent state, for determinism checks
        """
        digest = hashlib.sha256()
        digest.update(repr((self.seed, self.day, self.next_user_id, self.next_item_id, self.next_author_id)).encode())
        for user_id in sorted(self.users):
            user = self.users[user_id]
            digest.update(user.z.tobytes())
            digest.update(repr((user_id, user.signup_day, user.demographic_group, sorted(user.propensities.items()), user.kol_factor,
                                sorted(user.followed), user.active_today, user.churned, user.satisfaction, user.author_id)).encode())
        for item_id in sorted(self.items):
            item = self.items[item_id]
            digest.update(item.z.tobytes())
            digest.update(repr((item_id, item.author_id, item.publish_day, item.taxonomy, item.quality, item.is_low_quality)).encode())
        for author_id in sorted(self.authors):
            author = self.authors[author_id]
            digest.update(author.z.tobytes())
            digest.update(repr((author_id, author.energy, author.user_id)).encode())
        return digest.hexdigest()


def init_world(config: SimConfig, seed: int) -> World:
    """
    Deterministic world for (config, seed): initial users with seeded
    history, initial authors and a back-catalog published before day 0
    """
    config.validate()
    if not isinstance(seed, int): raise ConfigError("seed must be an integer")
    world = World(config, seed)
    rng = world.rng(STREAM_INIT)

    # Initial users with signup days and a few weeks of prior activity
    for _ in range(config.initial_users):
        user = world.new_user(-int(rng.integers(0, INITIAL_SIGNUP_SPAN + 1)), rng)
        history = [d for d in range(-INITIAL_HISTORY_DAYS, 0) if d >= user.signup_day and rng.random() < INITIAL_ACTIVE_RATE]
        user.prior_active_days = tuple(history)
        user.active_today = bool(rng.random() < INITIAL_ACTIVE_RATE + 0.25)

    # Initial authors; the first share of them are also users
    author_users = min(config.initial_users, int(round(config.author_user_fraction * config.initial_authors)))
    for index in range(config.initial_authors):
        world.new_author(rng, index if index < author_users else None)

    # Back-catalog
    author_ids = sorted(world.authors)
    for _ in range(config.initial_items):
        author = world.authors[author_ids[int(rng.integers(len(author_ids)))]]
        world.new_item(author, -int(rng.integers(0, INITIAL_PUBLISH_SPAN + 1)), rng)

    logger.info("world seed=%d: %d users, %d authors, %d items", seed, len(world.users), len(world.authors), len(world.items))
    return world


def affinity(user: SimUser, item: SimItem) -> float:
    """
    Cosine of the unit topic vectors
    """
    return float(np.dot(user.z, item.z))


def fatigue_multiplier(session_history: Mapping[int, int], taxonomy: int, fatigue: float, floor: float) -> float:
    return max(floor, (1.0 - fatigue) ** session_history.get(taxonomy, 0))


def click_probability(user: SimUser, item: SimItem, slate_position: int, session_history: Mapping[int, int], config: SimConfig) -> float:
    """
    gamma^position * sigmoid(a*cos + b [+ beta if the author is followed]) * fatigue
    """
    if slate_position < 0: raise ValueError("slate position must be >= 0")
    logit = config.click_a * affinity(user, item) + config.click_b
    if item.author_id in user.followed: logit += config.follow_bonus
    fatigue = fatigue_multiplier(session_history, item.taxonomy, config.fatigue, config.fatigue_floor)
    return float(config.position_decay ** slate_position * expit(logit) * fatigue)


def return_probability(user: SimUser, day_summary: DaySummary, config: SimConfig) -> float:
    """
    sigmoid(c0 + c1*satisfaction + c_f*log(1 + f))
    """
    return float(expit(config.c0 + config.c1 * day_summary.satisfaction + config.c_f * math.log1p(day_summary.follow_count)))


def publish_mean(config: SimConfig, feedback: AuthorFeedback, energy: float = 0.0) -> float:
    exponent = config.publish_base + energy + config.publish_followers * feedback.new_followers + config.publish_comments * feedback.new_comments
    return math.exp(min(exponent, MAX_PUBLISH_EXPONENT))


def author_publish(world: World, author: SimAuthor, yesterday_feedback: AuthorFeedback) -> List[SimItem]:
    """
    Poisson publish count driven by yesterday's new followers and comments,
    capped per day; items inherit the author's topic with noise
    """
    config = world.config
    rng = world.rng(STREAM_PUBLISH, world.day, author.author_id)
    count = min(config.publish_cap, int(rng.poisson(publish_mean(config, yesterday_feedback, author.energy))))
    return [world.new_item(author, world.day, rng) for _ in range(count)]


def _slate_ids(slate: Sequence) -> List[Tuple[int, Optional[str]]]:
    return [(int(getattr(entry, "item_id", entry)), getattr(entry, "channel_id", None)) for entry in slate]


def simulate_day(world: World, serve_fns: Mapping[str, ServeFn], arm_of: Optional[Callable[[int], str]] = None) -> DayResult:
    """
    Serve every active user, sample behavior, then sample who returns tomorrow
    """
    config, day = world.config, world.day
    start = world.begin_day()
    ledger = world.ledgers[day]
    arms = sorted(serve_fns)
    if not arms: raise ValueError("at least one serve function is required")
    if arm_of is None: arm_of = lambda user_id: arms[0]

    # Serve active users in user_id order; seq is global within the day
    events: List[InteractionEvent] = []
    feedback: Dict[int, List[int]] = defaultdict(lambda: [0, 0])
    summaries: Dict[int, DaySummary] = {}
    user_arms: Dict[int, str] = {}
    for user_id in world.active_users():
        user = world.users[user_id]
        arm = arm_of(user_id)
        if arm not in serve_fns: raise InvariantViolation(f"user {user_id} assigned to unknown arm {arm}")
        user_arms[user_id] = arm
        rng = world.rng(STREAM_SERVE, day, user_id)

        # Per-user day accumulators
        impressions, low_quality, clicked_affinity, clicked_taxonomies = 0, 0, [], set()
        minutes = 0.0
        for request in range(config.requests_per_day):
            slate = _slate_ids(serve_fns[arm](user_id, WorldView(world, request)))
            ids = [item_id for item_id, _ in slate]
            if len(ids) != len(set(ids)): raise InvariantViolation(f"duplicate items in slate for user {user_id} on day {day}: {ids}")

            # Fatigue is slate-local
            session: Dict[int, int] = defaultdict(int)
            for position, (item_id, channel_id) in enumerate(slate):
                item = world.items.get(item_id)
                if item is None or item.publish_day > day: raise InvariantViolation(f"slate item {item_id} not published on day {day}")

                # Impression
                events.append(InteractionEvent(day, len(events), user_id, item_id, EventType.IMPRESSION, position, channel_id, arm))
                impressions += 1
                low_quality += item.is_low_quality
                minutes += config.minutes_per_impression

                # Click
                if rng.random() >= click_probability(user, item, position, session, config): continue
                events.append(InteractionEvent(day, len(events), user_id, item_id, EventType.CLICK, None, channel_id, arm))
                session[item.taxonomy] += 1
                clicked_affinity.append(float(expit(config.click_a * affinity(user, item) + config.click_b)))
                clicked_taxonomies.add(item.taxonomy)
                minutes += config.minutes_per_click

                # Engagements given a click
                for name, event_type in (("like", EventType.LIKE), ("share", EventType.SHARE), ("follow", EventType.FOLLOW), ("comment", EventType.COMMENT)):
                    if event_type == EventType.FOLLOW and (item.author_id in user.followed or item.author_id == user.author_id): continue
                    if rng.random() >= min(1.0, user.propensities[name] * item.quality): continue
                    events.append(InteractionEvent(day, len(events), user_id, item_id, event_type, None, channel_id, arm))
                    if event_type == EventType.FOLLOW: user.followed.add(item.author_id); feedback[item.author_id][0] += 1
                    if event_type == EventType.COMMENT: feedback[item.author_id][1] += 1

                    # Shares bring external traffic in proportion to influence
                    if event_type == EventType.SHARE:
                        for _ in range(int(rng.poisson(user.kol_factor * config.share_visit_scale))):
                            events.append(InteractionEvent(day, len(events), user_id, item_id, EventType.EXTERNAL_VISIT, None, channel_id, arm))

        # Satisfaction: click affinity, taxonomy coverage, low-quality exposure
        satisfaction = float(np.mean(clicked_affinity)) if clicked_affinity else 0.0
        total = config.slate_size * config.requests_per_day
        satisfaction += config.coverage_bonus * len(clicked_taxonomies) / max(1, min(config.topics, total))
        if impressions: satisfaction -= config.low_quality_penalty * low_quality / impressions
        summaries[user_id] = DaySummary(satisfaction, len(user.followed))
        ledger.minutes[user_id] = minutes

    # Yesterday's feedback for tomorrow's publishing
    world.feedback = {author_id: AuthorFeedback(f, c) for author_id, (f, c) in feedback.items()}

    # Sample tomorrow's visitors
    for user_id in sorted(world.users):
        user = world.users[user_id]
        if user.churned: continue
        if user_id in summaries:
            user.satisfaction, user.inactive_streak = summaries[user_id].satisfaction, 0
        else:
            user.satisfaction *= SATISFACTION_DECAY
            user.inactive_streak += 1
            if user.inactive_streak >= config.churn_after_days: user.churned, user.active_today = True, False; continue
        r = return_probability(user, DaySummary(user.satisfaction, len(user.followed)), config)
        user.active_today = bool(world.rng(STREAM_RETURN, day, user_id).random() < r)

    # Advance the clock
    logger.debug("day %d: %d active users, %d events", day, len(summaries), len(events))
    world.day += 1
    return DayResult(day, events, start.new_users, start.new_items, ledger, user_arms)


def oracle_serve_fn(world: World, slate_size: Optional[int] = None) -> ServeFn:
    """
    Ranks the catalog by true affinity, skipping items the user has seen
    """
    seen: Dict[int, Set[int]] = defaultdict(set)
    size = slate_size or world.config.slate_size

    def serve(user_id: int, view: WorldView) -> List[int]:
        user = world.users[user_id]
        ids, matrix = world.item_matrix()
        scores = matrix @ user.z
        if user.followed:
            followed = np.array([world.items[int(i)].author_id in user.followed for i in ids])
            scores = scores + world.config.follow_bonus / max(world.config.click_a, 1e-9) * followed
        slate = []
        for index in np.lexsort((ids, -scores)):
            item_id = int(ids[index])
            if item_id in seen[user_id]: continue
            slate.append(item_id)
            if len(slate) == size: break
        seen[user_id].update(slate)
        return slate

    return serve


def random_serve_fn(world: World, seed: int, slate_size: Optional[int] = None) -> ServeFn:
    """
    Uniform sample of the published catalog
    """
    size = slate_size or world.config.slate_size

    def serve(user_id: int, view: WorldView) -> List[int]:
        ids = world.published_ids()
        if not ids: return []
        rng = np.random.default_rng([seed, view.day, user_id, view.request])
        return [int(i) for i in rng.choice(ids, size=min(size, len(ids)), replace=False)]

    return serve
