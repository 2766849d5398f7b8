import math
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import dataclass, field, fields, asdict
from typing import Any, Dict, List, Optional, Tuple

from deskrec.errors import ConfigError

# Prediction targets, in head order
TARGETS = ("click", "like", "share", "follow", "comment")
ENGAGEMENTS = TARGETS[1:]

# User groups
GROUP_NEW = "new"
GROUP_INACTIVE = "inactive"
GROUP_ACTIVE = "active"
USER_GROUPS = (GROUP_NEW, GROUP_INACTIVE, GROUP_ACTIVE)
SPECIAL_GROUPS = (GROUP_NEW, GROUP_INACTIVE)

# History configuration
LAST_N = 50                     # Max length of a user's last-n history
NEW_USER_DAYS = 7               # Signed up within this many days -> new
INACTIVE_WINDOW_DAYS = 14       # Lookback window for the inactive test
INACTIVE_MAX_ACTIVE_DAYS = 2    # At most this many active days in the window -> inactive

# Rate smoothing
SMOOTHING_A = 1.0               # Pseudo-count added to the numerator
SMOOTHING_B = 1.0               # Extra pseudo-count added to the denominator

# Simulator configuration
SIM_TOPICS = 8                  # Latent topic count T
SIM_INITIAL_USERS = 300         # Users in the initial cohort
SIM_INITIAL_AUTHORS = 60        # Authors in the initial roster
SIM_INITIAL_ITEMS = 1500        # Items published before day 0
SIM_DAILY_NEW_USERS = 10        # Sign-ups per day
SIM_DAILY_NEW_AUTHORS = 1       # New authors per day
SIM_REQUESTS_PER_DAY = 1        # Slate requests per active user per day
POSITION_DECAY = 0.9            # gamma, click decay per slate position
CLICK_AFFINITY_A = 4.0          # Slope of the logistic click affinity
CLICK_AFFINITY_B = -2.0         # Offset of the logistic click affinity
FATIGUE_PENALTY = 0.2           # phi, per same-taxonomy click already consumed
FATIGUE_FLOOR = 0.1             # Lowest fatigue multiplier
FOLLOW_AFFINITY_BONUS = 0.5     # beta, logit bonus for followed authors
RETENTION_C0 = -0.5             # Retention intercept
RETENTION_C1 = 3.0              # Retention weight of satisfaction
RETENTION_CF = 0.5              # Retention weight of log(1 + follows)
COVERAGE_BONUS = 0.3            # Satisfaction bonus for taxonomy coverage
LOW_QUALITY_PENALTY = 0.5       # Satisfaction penalty for an all-low-quality day
LOW_QUALITY_FRACTION = 0.1      # Share of items flagged low quality
PUBLISH_BASE = math.log(0.5)    # Log of the feedback-free mean daily publish count
PUBLISH_FOLLOWERS = 0.1         # Log-mean increase per new follower
PUBLISH_COMMENTS = 0.05         # Log-mean increase per new comment
PUBLISH_CAP = 5                 # Max items per author per day
ITEM_TOPIC_NOISE = 0.3          # Noise around the author topic for new items
AUTHOR_USER_FRACTION = 0.5      # Share of authors who are also users
CHURN_AFTER_DAYS = 14           # Consecutive inactive days before permanent churn
MINUTES_PER_IMPRESSION = 0.2    # Consumption minutes per impression
MINUTES_PER_CLICK = 1.5         # Consumption minutes per click
SHARE_VISIT_SCALE = 5.0         # Mean external visits per share at kol_factor 1

# Model configuration
EMBEDDING_DIM = 16              # d
TOWER_HIDDEN = 32               # Hidden width of both towers
RANKER_LAYERS = (64, 32)        # Shared trunk widths (1 to 3 layers)
RESIDUAL_HIDDEN = 16            # Hidden width of the residual calibrator
SIM_LAST_N_CAP = 32             # n' for taxonomy-filtered last-n

# Training configuration
LEARNING_RATE = 0.05
IMPRESSION_POSITIVE_WEIGHT = 0.3
POPULARITY_DECAY = 0.99         # rho of the streaming popularity estimate
LISTWISE_WEIGHT = 0.5           # lambda_lw
LISTWISE_CAP = 64               # Max candidates per logged list
CONTAMINATION_RATIO = 3.0       # Day-over-day mean p_click drift that freezes distillation
TRAINING_MIX = (32, 16, 64, 16) # simple pos, impression pos, simple neg, hard neg

# Pipeline sizes
RETRIEVAL_SIZE = 500
PRERANK_SURVIVORS = 64
RANK_SURVIVORS = 50
SLATE_SIZE = 10

# Diversity configuration
MMR_THETA = 0.5
SOFT_WINDOW = 10
TAXONOMY_GAP = 5
CLUSTER_GAP = 5
PRERANK_SPLIT = 0.5             # Share of prerank survivors chosen by pure score
EXPLORATION_RATE = 0.02
CLUSTER_COUNT = 50
KMEANS_ITERS = 20
TAXONOMY_SEED_CAP = 10          # Per-taxonomy cap on U2I2I seeds

# Cache channel configuration
CACHE_TTL = 3                   # Requests an entry survives without display
CACHE_CAPACITY = 50             # Entries per user

# Following
IMPLICIT_MIN_CLICKS = 3
IMPLICIT_MIN_RATE = 0.5
EXPLICIT_EDGE_WEIGHT = 1.0
IMPLICIT_EDGE_WEIGHT = 0.5
AUTHOR_RECENCY_DAYS = 14

# Utility configuration
KOL_KAPPA = 1.0
KOL_DECAY = 0.8
KOL_SCALE = 10.0
COMMENT_BOOST = 2.0
COMMENT_TRIGGER = 3             # likes + shares needed before the comment boost fires
NEW_ITEM_BOOST = 0.1
NEW_ITEM_DAYS = 3
SMALL_AUTHOR_FOLLOWERS = 10
SMALL_AUTHOR_FOLLOW_BOOST = 1.5
COMMENTER_RATE = 0.2            # Smoothed comment-per-click rate marking a commenter

# I2I configuration
SIMILARITY_TOP_M = 50
INTERACTION_WINDOW = 50
SWING_ALPHA = 1.0

# Quota constraint
MAX_QUOTA_SUM = 1.2

CHANNEL_KINDS = (
    "two_tower", "itemcf", "swing", "online_itemcf", "online_swing",
    "u2a2i", "u2a2a2i", "u2u2i", "cache", "pool_direct",
)
AUDIENCES = ("all", "new", "inactive", "active", "special", "commenters")


@dataclass
class SimConfig:
    topics: int = SIM_TOPICS
    initial_users: int = SIM_INITIAL_USERS
    initial_authors: int = SIM_INITIAL_AUTHORS
    initial_items: int = SIM_INITIAL_ITEMS
    daily_new_users: int = SIM_DAILY_NEW_USERS
    daily_new_authors: int = SIM_DAILY_NEW_AUTHORS
    slate_size: int = SLATE_SIZE
    requests_per_day: int = SIM_REQUESTS_PER_DAY
    position_decay: float = POSITION_DECAY
    click_a: float = CLICK_AFFINITY_A
    click_b: float = CLICK_AFFINITY_B
    fatigue: float = FATIGUE_PENALTY
    fatigue_floor: float = FATIGUE_FLOOR
    follow_bonus: float = FOLLOW_AFFINITY_BONUS
    c0: float = RETENTION_C0
    c1: float = RETENTION_C1
    c_f: float = RETENTION_CF
    coverage_bonus: float = COVERAGE_BONUS
    low_quality_penalty: float = LOW_QUALITY_PENALTY
    low_quality_fraction: float = LOW_QUALITY_FRACTION
    publish_base: float = PUBLISH_BASE
    publish_followers: float = PUBLISH_FOLLOWERS
    publish_comments: float = PUBLISH_COMMENTS
    publish_cap: int = PUBLISH_CAP
    item_noise: float = ITEM_TOPIC_NOISE
    author_user_fraction: float = AUTHOR_USER_FRACTION
    churn_after_days: int = CHURN_AFTER_DAYS
    minutes_per_impression: float = MINUTES_PER_IMPRESSION
    minutes_per_click: float = MINUTES_PER_CLICK
    share_visit_scale: float = SHARE_VISIT_SCALE
    demographic_groups: int = 4
    last_n: int = LAST_N

    def validate(self) -> None:
        """
        Check the simulator invariants
        """
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, float) and not math.isfinite(value): raise ConfigError(f"sim.{f.name} must be finite")
        if self.topics < 1: raise ConfigError("sim.topics must be >= 1")
        if not 0.0 < self.position_decay <= 1.0: raise ConfigError("sim.position_decay must be in (0, 1]")
        if self.fatigue < 0.0: raise ConfigError("sim.fatigue must be >= 0")
        if self.slate_size < 1 or self.requests_per_day < 1: raise ConfigError("sim.slate_size and sim.requests_per_day must be >= 1")
        if min(self.initial_users, self.initial_authors, self.daily_new_users, self.daily_new_authors) < 0:
            raise ConfigError("sim population sizes must be >= 0")
        if self.initial_authors == 0 and self.initial_items > 0: raise ConfigError("sim.initial_items needs at least one author")
        if not 0.0 <= self.low_quality_fraction <= 1.0: raise ConfigError("sim.low_quality_fraction must be in [0, 1]")
        if not 0.0 <= self.author_user_fraction <= 1.0: raise ConfigError("sim.author_user_fraction must be in [0, 1]")
        if self.publish_cap < 0: raise ConfigError("sim.publish_cap must be >= 0")


@dataclass
class ModelConfig:
    embedding_dim: int = EMBEDDING_DIM
    tower_hidden: int = TOWER_HIDDEN
    retrieval_heads: int = 1
    ranker_layers: Tuple[int, ...] = RANKER_LAYERS
    residual_hidden: int = RESIDUAL_HIDDEN
    pooling: str = "din"
    sim_cap: int = SIM_LAST_N_CAP

    def validate(self) -> None:
        if self.embedding_dim < 1 or self.tower_hidden < 1: raise ConfigError("model dims must be >= 1")
        if self.retrieval_heads not in (1, len(TARGETS)): raise ConfigError("model.retrieval_heads must be 1 or 5")
        if not 1 <= len(self.ranker_layers) <= 3: raise ConfigError("model.ranker_layers needs 1 to 3 layers")
        if self.pooling not in ("average", "din", "sim"): raise ConfigError("model.pooling must be average, din or sim")
        if self.sim_cap < 1: raise ConfigError("model.sim_cap must be >= 1")


@dataclass
class TrainingConfig:
    learning_rate: float = LEARNING_RATE
    optimizer: str = "sgd"
    mix: Tuple[int, int, int, int] = TRAINING_MIX
    impression_positive_weight: float = IMPRESSION_POSITIVE_WEIGHT
    popularity_decay: float = POPULARITY_DECAY
    logq_correction: bool = True
    rank_batch_size: int = 128
    prerank_mode: str = "pointwise_distill"
    listwise_weight: float = LISTWISE_WEIGHT
    listwise_cap: int = LISTWISE_CAP
    distill_heads: str = "all"
    contamination_guard: bool = True
    contamination_ratio: float = CONTAMINATION_RATIO
    residual_epochs: int = 3

    def validate(self) -> None:
        if self.learning_rate < 0.0: raise ConfigError("training.learning_rate must be >= 0")
        if self.optimizer not in ("sgd", "adagrad"): raise ConfigError("training.optimizer must be sgd or adagrad")
        if len(self.mix) != 4 or min(self.mix) < 0 or sum(self.mix) == 0: raise ConfigError("training.mix needs four non-negative counts, not all zero")
        if self.prerank_mode not in ("plain", "pointwise_distill", "listwise"): raise ConfigError("training.prerank_mode is unknown")
        if self.distill_heads not in ("all", "click"): raise ConfigError("training.distill_heads must be all or click")
        if not 0.0 < self.popularity_decay <= 1.0: raise ConfigError("training.popularity_decay must be in (0, 1]")


@dataclass
class PipelineSizes:
    retrieval: int = RETRIEVAL_SIZE
    prerank: int = PRERANK_SURVIVORS
    rank: int = RANK_SURVIVORS
    slate: int = SLATE_SIZE

    def validate(self) -> None:
        if not self.retrieval >= self.prerank >= self.rank >= self.slate >= 1:
            raise ConfigError("sizes must satisfy retrieval >= prerank >= rank >= slate >= 1")


@dataclass
class DiversityConfig:
    method: str = "mmr"
    theta: float = MMR_THETA
    window: int = SOFT_WINDOW
    taxonomy_gap: int = TAXONOMY_GAP
    cluster_gap: int = CLUSTER_GAP
    gap_semantics: str = "difference"
    prerank_split: float = PRERANK_SPLIT
    exploration: float = EXPLORATION_RATE
    clusters: int = CLUSTER_COUNT
    kmeans_iters: int = KMEANS_ITERS
    hard_scatter: bool = True
    soft_scatter: bool = True
    noise_sigma0: float = 0.0
    noise_enabled: bool = False
    subsample_recent: int = 10
    subsample_extra: int = 10
    subsample_enabled: bool = False
    taxonomy_seed_cap: int = TAXONOMY_SEED_CAP

    def validate(self) -> None:
        if self.method not in ("mmr", "dpp"): raise ConfigError("diversity.method must be mmr or dpp")
        if self.theta < 0.0 or self.window < 0: raise ConfigError("diversity.theta and diversity.window must be >= 0")
        if self.taxonomy_gap < 1 or self.cluster_gap < 1: raise ConfigError("diversity gaps must be >= 1")
        if self.gap_semantics not in ("difference", "between"): raise ConfigError("diversity.gap_semantics must be difference or between")
        if not 0.0 <= self.prerank_split <= 1.0: raise ConfigError("diversity.prerank_split must be in [0, 1]")
        if not 0.0 <= self.exploration <= 1.0: raise ConfigError("diversity.exploration must be in [0, 1]")
        if self.clusters < 1 or self.taxonomy_seed_cap < 1: raise ConfigError("diversity.clusters and taxonomy_seed_cap must be >= 1")
        if self.noise_sigma0 < 0.0: raise ConfigError("diversity.noise_sigma0 must be >= 0")


@dataclass
class SpecialGroupConfig:
    new_user_days: int = NEW_USER_DAYS
    inactive_window: int = INACTIVE_WINDOW_DAYS
    inactive_max_days: int = INACTIVE_MAX_ACTIVE_DAYS
    filter_low_quality: bool = True
    residual_calibration: bool = True
    implicit_min_clicks: int = IMPLICIT_MIN_CLICKS
    implicit_min_rate: float = IMPLICIT_MIN_RATE
    explicit_weight: float = EXPLICIT_EDGE_WEIGHT
    implicit_weight: float = IMPLICIT_EDGE_WEIGHT
    author_recency_days: int = AUTHOR_RECENCY_DAYS
    commenter_rate: float = COMMENTER_RATE

    def validate(self) -> None:
        if self.new_user_days < 0 or self.inactive_window < 1: raise ConfigError("special_groups windows out of range")
        if self.implicit_min_clicks < 1 or not 0.0 < self.implicit_min_rate <= 1.0: raise ConfigError("special_groups implicit thresholds out of range")


@dataclass
class TargetWeights:
    click: float = 1.0
    like: float = 1.0
    share: float = 1.0
    follow: float = 1.0
    comment: float = 1.0

    def as_tuple(self) -> Tuple[float, ...]:
        return tuple(getattr(self, t) for t in TARGETS)


def _default_group_weights() -> Dict[str, TargetWeights]:
    return {
        GROUP_NEW: TargetWeights(click=2.0),
        GROUP_INACTIVE: TargetWeights(click=2.0),
        GROUP_ACTIVE: TargetWeights(),
    }


@dataclass
class UtilityConfig:
    weights: Dict[str, TargetWeights] = field(default_factory=_default_group_weights)
    follow_w0: Dict[str, float] = field(default_factory=lambda: {GROUP_NEW: 0.0, GROUP_INACTIVE: 0.0, GROUP_ACTIVE: 0.0})
    kol_kappa: float = KOL_KAPPA
    kol_decay: float = KOL_DECAY
    kol_scale: float = KOL_SCALE
    comment_boost: float = COMMENT_BOOST
    comment_trigger: int = COMMENT_TRIGGER
    new_item_boost: float = NEW_ITEM_BOOST
    new_item_days: int = NEW_ITEM_DAYS
    suppress_new_item_boost: Dict[str, bool] = field(default_factory=lambda: {GROUP_NEW: True, GROUP_INACTIVE: True, GROUP_ACTIVE: False})
    small_author_followers: int = SMALL_AUTHOR_FOLLOWERS
    small_author_follow_boost: float = SMALL_AUTHOR_FOLLOW_BOOST

    def validate(self) -> None:
        for group in USER_GROUPS:
            if group not in self.weights: raise ConfigError(f"utility.weights missing group {group}")
            if min(self.weights[group].as_tuple()) < 0.0: raise ConfigError(f"utility.weights.{group} must be >= 0")
        if min(list(self.follow_w0.values()) + [self.kol_kappa, self.comment_boost, self.new_item_boost, self.small_author_follow_boost]) < 0.0:
            raise ConfigError("utility weights must be >= 0")
        if not 0.0 <= self.kol_decay <= 1.0 or self.kol_scale <= 0.0: raise ConfigError("utility KOL decay/scale out of range")


@dataclass
class ChannelConfig:
    channel_id: str
    kind: str
    priority: int
    quota: float
    pool_id: Optional[str] = None
    audience: str = "all"
    group_quotas: Dict[str, float] = field(default_factory=dict)
    enabled: bool = True

    def quota_for(self, group: str) -> float:
        """
        Quota for a user group, falling back to the channel default
        """
        return self.group_quotas.get(group, self.quota)


def default_channels() -> List[ChannelConfig]:
    """
    Desk-scale preset; the 7-day ItemCF channel carries the 5% quota example
    """
    return [
        ChannelConfig("cache", "cache", priority=0, quota=0.05),
        ChannelConfig("two_tower", "two_tower", priority=1, quota=0.30, pool_id="all"),
        ChannelConfig("itemcf", "itemcf", priority=2, quota=0.15),
        ChannelConfig("swing", "swing", priority=3, quota=0.10),
        ChannelConfig("online_itemcf", "online_itemcf", priority=4, quota=0.05),
        ChannelConfig("online_swing", "online_swing", priority=5, quota=0.05),
        ChannelConfig("itemcf_7d", "itemcf", priority=6, quota=0.05, pool_id="recent_7d"),
        ChannelConfig("u2a2i", "u2a2i", priority=7, quota=0.05),
        ChannelConfig("u2a2a2i", "u2a2a2i", priority=8, quota=0.03),
        ChannelConfig("u2u2i", "u2u2i", priority=9, quota=0.03, enabled=False),
        ChannelConfig("follow_pool", "pool_direct", priority=10, quota=0.05, pool_id="high_follow", audience="new"),
        ChannelConfig("comment_pool", "pool_direct", priority=11, quota=0.05, pool_id="high_comment", audience="commenters"),
        ChannelConfig("quality_pool", "pool_direct", priority=12, quota=0.10, pool_id="quality", audience="special"),
        ChannelConfig("fresh_pool", "pool_direct", priority=13, quota=0.05, pool_id="recent_7d"),
    ]


@dataclass
class Config:
    seed: int = 0
    sim: SimConfig = field(default_factory=SimConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    sizes: PipelineSizes = field(default_factory=PipelineSizes)
    diversity: DiversityConfig = field(default_factory=DiversityConfig)
    special_groups: SpecialGroupConfig = field(default_factory=SpecialGroupConfig)
    utility: UtilityConfig = field(default_factory=UtilityConfig)
    channels: List[ChannelConfig] = field(default_factory=default_channels)

    def validate(self) -> "Config":
        """
        Validate every section and the channel registry
        """

        # Validate sections
        for section in (self.sim, self.model, self.training, self.sizes, self.diversity, self.special_groups, self.utility):
            section.validate()
        if self.sim.slate_size != self.sizes.slate:
            raise ConfigError(f"sim.slate_size {self.sim.slate_size} must equal sizes.slate {self.sizes.slate}")

        # Channel registry
        priorities = [c.priority for c in self.channels]
        if len(priorities) != len(set(priorities)): raise ConfigError("channel priorities must be unique")
        for channel in self.channels:
            if channel.kind not in CHANNEL_KINDS: raise ConfigError(f"channel {channel.channel_id}: unknown kind {channel.kind}")
            if channel.audience not in AUDIENCES: raise ConfigError(f"channel {channel.channel_id}: unknown audience {channel.audience}")
            if channel.quota < 0.0 or any(q < 0.0 for q in channel.group_quotas.values()): raise ConfigError(f"channel {channel.channel_id}: quota must be >= 0")
            if channel.kind == "pool_direct" and channel.pool_id is None: raise ConfigError(f"channel {channel.channel_id}: pool_direct needs a pool_id")

        # Quota sums per group
        for group in USER_GROUPS:
            total = sum(c.quota_for(group) for c in self.channels if c.enabled)
            if total > MAX_QUOTA_SUM + 1e-9: raise ConfigError(f"channel quotas for group {group} sum to {total:.3f} > {MAX_QUOTA_SUM}")

        # Return self for chaining
        return self

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def _coerce(cls, table: Dict[str, Any], where: str):
    """
    Build a dataclass section from a TOML table, rejecting unknown keys
    """
    known = {f.name: f for f in fields(cls)}
    unknown = set(table) - set(known)
    if unknown: raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name, value in table.items():
        default = getattr(cls(), name)
        if isinstance(default, tuple):
            if not isinstance(value, list): raise ConfigError(f"{where}.{name} must be an array")
            value = tuple(value)
        elif isinstance(default, bool):
            if not isinstance(value, bool): raise ConfigError(f"{where}.{name} must be a boolean")
        elif isinstance(default, float):
            if not isinstance(value, (int, float)) or isinstance(value, bool): raise ConfigError(f"{where}.{name} must be a number")
            value = float(value)
        elif isinstance(default, int):
            if not isinstance(value, int) or isinstance(value, bool): raise ConfigError(f"{where}.{name} must be an integer")
        kwargs[name] = value
    return kwargs


def config_from_dict(data: Dict[str, Any], base: Optional[Config] = None) -> Config:
    """
    Build a Config from a parsed TOML document, overriding `base` section by section
    """

    # Start from the base config
    config = Config() if base is None else Config(**{f.name: getattr(base, f.name) for f in fields(base)})
    sections = {
        "sim": SimConfig, "model": ModelConfig, "training": TrainingConfig, "sizes": PipelineSizes,
        "diversity": DiversityConfig, "special_groups": SpecialGroupConfig,
    }
    unknown = set(data) - set(sections) - {"seed", "utility", "channels"}
    if unknown: raise ConfigError(f"unknown config sections {sorted(unknown)}")

    # Seed
    if "seed" in data:
        if not isinstance(data["seed"], int): raise ConfigError("seed must be an integer")
        config.seed = data["seed"]

    # Plain sections
    for name, cls in sections.items():
        if name in data:
            current = asdict(getattr(config, name))
            current.update(_coerce(cls, data[name], name))
            setattr(config, name, cls(**current))

    # Utility section with per-group weight tables
    if "utility" in data:
        table = dict(data["utility"])
        weights = {g: TargetWeights(**asdict(w)) for g, w in config.utility.weights.items()}
        for group, wtable in table.pop("weights", {}).items():
            if group not in USER_GROUPS: raise ConfigError(f"utility.weights: unknown group {group}")
            merged = asdict(weights[group]); merged.update(_coerce(TargetWeights, wtable, f"utility.weights.{group}"))
            weights[group] = TargetWeights(**merged)
        current = asdict(config.utility)
        current.pop("weights")
        for key in ("follow_w0", "suppress_new_item_boost"):
            if key in table: current[key] = {**current[key], **table.pop(key)}
        current.update(_coerce(UtilityConfig, table, "utility"))
        config.utility = UtilityConfig(weights=weights, **current)

    # Channel registry replaces the preset wholesale
    if "channels" in data:
        channels = []
        for i, table in enumerate(data["channels"]):
            for required in ("channel_id", "kind", "priority", "quota"):
                if required not in table: raise ConfigError(f"channels[{i}] missing {required}")
            unknown = set(table) - {f.name for f in fields(ChannelConfig)}
            if unknown: raise ConfigError(f"channels[{i}]: unknown keys {sorted(unknown)}")
            channels.append(ChannelConfig(**table))
        config.channels = channels

    # Validate and return
    return config.validate()


def load_config(path: Optional[str]) -> Config:
    """
    Load a TOML config file; None returns the validated defaults
    """
    if path is None: return Config().validate()
    try:
        with open(path, "rb") as file: data = tomllib.load(file)
    except FileNotFoundError as e: raise ConfigError(f"config file not found: {path}") from e
    except tomllib.TOMLDecodeError as e: raise ConfigError(f"invalid TOML in {path}: {e}") from e
    return config_from_dict(data)
