import logging
import math
import os
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, Iterable, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy.special import logsumexp, softmax

from deskrec.config import (GROUP_ACTIVE, IMPRESSION_POSITIVE_WEIGHT, POPULARITY_DECAY, TARGETS, USER_GROUPS,
                            ModelConfig, TrainingConfig)
from deskrec.domain import EventType, InteractionEvent
from deskrec.eventlog import LogState
from deskrec.nn import (Embedding, check_finite, dense_init, gather, load_checkpoint, save_checkpoint, scatter_add,
                        zero_grads)

logger = logging.getLogger(__name__)

LABEL_KINDS = ("simple_positive", "impression_positive", "simple_negative", "hard_negative")
POSITIVE_KINDS = frozenset({"simple_positive", "impression_positive"})

# Engagement events that set a per-target label
TARGET_EVENTS = {EventType.CLICK: 0, EventType.LIKE: 1, EventType.SHARE: 2, EventType.FOLLOW: 3, EventType.COMMENT: 4}


@dataclass(frozen=True)
class UserFeatures:
    user_id: int
    group: str = GROUP_ACTIVE
    last_n: Tuple[int, ...] = ()                # most recent first
    last_n_taxonomies: Tuple[int, ...] = ()


def user_features(log_state: LogState, user_id: int, exclude: Optional[int] = None, limit: Optional[int] = None) -> UserFeatures:
    """
    Model input for a user from the log state; `exclude` drops the target item from last-n
    """
    user = log_state.users[user_id]
    items = [i for i in user.recent_items() if i != exclude]
    if limit is not None: items = items[:limit]
    return UserFeatures(user_id, user.group_tag, tuple(items), tuple(log_state.items[i].taxonomy for i in items))


@dataclass(frozen=True)
class TrainingSample:
    user: UserFeatures
    item_id: int
    taxonomy: int
    label_kind: str
    labels: Tuple[float, ...] = (0.0,) * len(TARGETS)

    @property
    def is_positive(self) -> bool:
        return self.label_kind in POSITIVE_KINDS


@dataclass
class TrainingBatch:
    samples: List[TrainingSample] = field(default_factory=list)

    def positives(self) -> List[TrainingSample]:
        return [s for s in self.samples if s.is_positive]

    def negatives(self) -> List[TrainingSample]:
        return [s for s in self.samples if not s.is_positive]

    def composition(self) -> Dict[str, int]:
        counts = {kind: 0 for kind in LABEL_KINDS}
        for sample in self.samples: counts[sample.label_kind] += 1
        return counts

    def __len__(self) -> int:
        return len(self.samples)


@dataclass
class DayLogs:
    """
    One day of training input: the day's events, the prerank-rejection side
    channel and the log state that supplies user and item features
    """
    day: int
    events: List[InteractionEvent]
    hard_negatives: List[dict]
    log_state: LogState

    @classmethod
    def from_state(cls, log_state: LogState, side_logger, day: int) -> "DayLogs":
        records = side_logger.since("hard_negatives", day, day) if side_logger is not None else []
        return cls(day, log_state.events_on(day), records, log_state)


class _DayPairs:
    """
    Labelled (user, item) pairs of one day
    """

    def __init__(self, logs: DayLogs, impression_weight: float):
        labels: Dict[Tuple[int, int], List[float]] = defaultdict(lambda: [0.0] * len(TARGETS))
        impressed = set()
        for event in logs.events:
            pair = (event.user_id, event.item_id)
            if event.event_type == EventType.IMPRESSION: impressed.add(pair)
            elif event.event_type in TARGET_EVENTS: labels[pair][TARGET_EVENTS[event.event_type]] = 1.0

        # Clicked pairs are simple positives; impressed-only pairs are impression positives
        self.simple = sorted(p for p in labels if labels[p][0] == 1.0)
        self.labels = {p: tuple(labels[p]) for p in self.simple}
        self.impression = sorted(p for p in impressed if p not in self.labels)
        self.impression_labels = (impression_weight,) + (0.0,) * (len(TARGETS) - 1)

        # Retrieved but cut at preranking
        hard = {(r["user_id"], i) for r in logs.hard_negatives for i in r["item_ids"]}
        self.hard = sorted(p for p in hard if p not in self.labels and p not in impressed)

        # Users and items for random pairs
        state = logs.log_state
        self.users = sorted({e.user_id for e in logs.events}) or sorted(state.users)
        self.items = state.catalog.published_between(-(1 << 30), logs.day)


def _take(rng: np.random.Generator, pairs: List[Tuple[int, int]], n: int) -> List[Tuple[int, int]]:
    if len(pairs) <= n: return list(pairs)
    return [pairs[i] for i in sorted(rng.choice(len(pairs), size=n, replace=False))]


def _sample(state: LogState, pair: Tuple[int, int], kind: str, labels: Tuple[float, ...]) -> TrainingSample:
    user_id, item_id = pair
    return TrainingSample(user_features(state, user_id, exclude=item_id), item_id, state.items[item_id].taxonomy, kind, labels)


def _simple_negatives(rng: np.random.Generator, pairs: _DayPairs, state: LogState, n: int) -> List[TrainingSample]:
    if not pairs.users or not pairs.items or n == 0: return []
    users = rng.choice(pairs.users, size=n)
    items = rng.choice(pairs.items, size=n)
    return [_sample(state, (int(u), int(i)), "simple_negative", (0.0,) * len(TARGETS)) for u, i in zip(users, items)]


def _check_mix(mix: Sequence[int]) -> None:
    if len(mix) != 4 or min(mix) < 0: raise ValueError("mix needs four non-negative counts")
    if sum(mix) == 0: raise ValueError("mix must not be all zero")


def build_training_batch(logs: DayLogs, mix: Sequence[int], seed: int,
                         impression_weight: float = IMPRESSION_POSITIVE_WEIGHT) -> TrainingBatch:
    """
    One batch with composition (simple positives, impression positives,
    simple negatives, hard negatives); scarce kinds are truncated
    """
    _check_mix(mix)
    n_pos, n_imp, n_neg, n_hard = mix
    rng = np.random.default_rng([seed, logs.day, 11])
    pairs, state = _DayPairs(logs, impression_weight), logs.log_state

    # Positives, then negatives
    samples = [_sample(state, p, "simple_positive", pairs.labels[p]) for p in _take(rng, pairs.simple, n_pos)]
    samples += [_sample(state, p, "impression_positive", pairs.impression_labels) for p in _take(rng, pairs.impression, n_imp)]
    samples += _simple_negatives(rng, pairs, state, n_neg)
    samples += [_sample(state, p, "hard_negative", (0.0,) * len(TARGETS)) for p in _take(rng, pairs.hard, n_hard)]
    return TrainingBatch(samples)


def epoch_batches(logs: DayLogs, mix: Sequence[int], seed: int,
                  impression_weight: float = IMPRESSION_POSITIVE_WEIGHT) -> Iterator[TrainingBatch]:
    """
    One pass over the day's positives in mix-shaped batches; each batch gets
    fresh simple negatives and the next slice of hard negatives
    """
    _check_mix(mix)
    n_pos, n_imp, n_neg, n_hard = mix
    rng = np.random.default_rng([seed, logs.day, 13])
    pairs, state = _DayPairs(logs, impression_weight), logs.log_state

    # Shuffle each kind once per epoch
    simple = [pairs.simple[i] for i in rng.permutation(len(pairs.simple))]
    impression = [pairs.impression[i] for i in rng.permutation(len(pairs.impression))]
    hard = [pairs.hard[i] for i in rng.permutation(len(pairs.hard))]

    # Number of batches covers every positive once
    counts = [math.ceil(len(simple) / n_pos) if n_pos else 0, math.ceil(len(impression) / n_imp) if n_imp else 0]
    for b in range(max(counts)):
        samples = [_sample(state, p, "simple_positive", pairs.labels[p]) for p in simple[b * n_pos:(b + 1) * n_pos]]
        samples += [_sample(state, p, "impression_positive", pairs.impression_labels) for p in impression[b * n_imp:(b + 1) * n_imp]]
        samples += _simple_negatives(rng, pairs, state, n_neg)
        samples += [_sample(state, p, "hard_negative", (0.0,) * len(TARGETS)) for p in hard[b * n_hard:(b + 1) * n_hard]]
        yield TrainingBatch(samples)


class PopularityEstimator:
    """
    Streaming item frequency with exponential decay; q(i) is the decayed
    count of i over the decayed total
    """

    def __init__(self, decay: float = POPULARITY_DECAY):
        if not 0.0 < decay <= 1.0: raise ValueError("decay must be in (0, 1]")
        self.decay = decay
        self.counts: Dict[int, float] = {}
        self.total = 0.0

    def observe(self, item_ids: Iterable[int]) -> None:
        """
        One decay step followed by the new observations
        """
        if self.decay < 1.0:
            self.counts = {i: c * self.decay for i, c in self.counts.items()}
            self.total *= self.decay
        for item_id in item_ids:
            self.counts[item_id] = self.counts.get(item_id, 0.0) + 1.0
            self.total += 1.0

    def probability(self, item_id: int) -> float:
        if self.total <= 0.0: return 0.0
        return self.counts.get(item_id, 0.0) / self.total

    def q_hat(self, item_ids: Iterable[int]) -> Dict[int, float]:
        return {i: self.probability(i) for i in item_ids}


class TwoTowerModel:
    """
    User tower: [user id, group, mean last-n item embedding] -> tanh -> H*d.
    Item tower: [item id, taxonomy] -> tanh -> d. The item id table is shared
    by both towers.
    """
    kind = "two_tower"

    def __init__(self, config: ModelConfig, heads: Optional[int] = None, seed: int = 0):
        d, hidden = config.embedding_dim, config.tower_hidden
        self.config = config
        self.dim = d
        self.hidden = hidden
        self.heads = heads if heads is not None else config.retrieval_heads
        if self.heads not in (1, len(TARGETS)): raise ValueError("heads must be 1 or 5")
        self.seed = seed
        self.day: Optional[int] = None
        self.loss_history: List[Tuple[int, float]] = []

        # Embedding tables
        self.user_emb = Embedding("user", d, seed)
        self.item_emb = Embedding("item", d, seed)
        self.tax_emb = Embedding("taxonomy", d, seed)
        self.group_emb = Embedding("group", d, seed)

        # Towers
        rng = np.random.default_rng([seed, 101])
        self.Wu1, self.bu1 = dense_init(rng, 3 * d, hidden)
        self.Wu2, self.bu2 = dense_init(rng, hidden, self.heads * d)
        self.Wi1, self.bi1 = dense_init(rng, 2 * d, hidden)
        self.Wi2, self.bi2 = dense_init(rng, hidden, d)

    def tables(self) -> Dict[str, Embedding]:
        return {"user_emb": self.user_emb, "item_emb": self.item_emb, "tax_emb": self.tax_emb, "group_emb": self.group_emb}

    def parameters(self) -> Dict[str, np.ndarray]:
        params = {name: table.weight for name, table in self.tables().items()}
        for name in ("Wu1", "bu1", "Wu2", "bu2", "Wi1", "bi1", "Wi2", "bi2"): params[name] = getattr(self, name)
        return params

    def load_parameters(self, params: Mapping[str, np.ndarray]) -> None:
        for name, value in params.items():
            if name in self.tables(): self.tables()[name].weight = np.array(value, dtype=float)
            else: setattr(self, name, np.array(value, dtype=float))

    # ------------------------------------------------------------------ towers

    def forward_users(self, users: Sequence[UserFeatures], grow: bool = True):
        """
        (B, H, d) user vectors and the cache needed by backward_users
        """
        d = self.dim
        rows_u = self.user_emb.rows([u.user_id for u in users], grow)
        rows_g = self.group_emb.rows([USER_GROUPS.index(u.group) if u.group in USER_GROUPS else 2 for u in users], grow)

        # Padded last-n rows
        width = max([len(u.last_n) for u in users] + [1])
        rows_n = np.full((len(users), width), -1, dtype=np.int64)
        for b, u in enumerate(users):
            if u.last_n: rows_n[b, :len(u.last_n)] = self.item_emb.rows(u.last_n, grow)
        counts = np.maximum((rows_n >= 0).sum(axis=1), 1)[:, None]
        pooled = gather(self.item_emb.weight, rows_n).sum(axis=1) / counts

        # Perceptron
        x = np.concatenate([gather(self.user_emb.weight, rows_u), gather(self.group_emb.weight, rows_g), pooled], axis=1)
        h = np.tanh(x @ self.Wu1 + self.bu1)
        out = (h @ self.Wu2 + self.bu2).reshape(len(users), self.heads, d)
        return out, (rows_u, rows_g, rows_n, counts, x, h)

    def backward_users(self, d_out: np.ndarray, cache, grads: Dict[str, np.ndarray]) -> None:
        rows_u, rows_g, rows_n, counts, x, h = cache
        d = self.dim
        d_out = d_out.reshape(len(x), self.heads * d)
        grads["Wu2"] += h.T @ d_out
        grads["bu2"] += d_out.sum(axis=0)
        d_a = (d_out @ self.Wu2.T) * (1.0 - h * h)
        grads["Wu1"] += x.T @ d_a
        grads["bu1"] += d_a.sum(axis=0)
        d_x = d_a @ self.Wu1.T

        # Embedding rows
        scatter_add(grads["user_emb"], rows_u, d_x[:, :d])
        scatter_add(grads["group_emb"], rows_g, d_x[:, d:2 * d])
        d_pooled = d_x[:, 2 * d:] / counts
        spread = np.broadcast_to(d_pooled[:, None, :], rows_n.shape + (d,))
        scatter_add(grads["item_emb"], rows_n.ravel(), spread.reshape(-1, d))

    def forward_items(self, item_ids: Sequence[int], taxonomies: Sequence[int], grow: bool = True):
        """
        (N, d) item vectors and the cache needed by backward_items
        """
        rows_i = self.item_emb.rows(item_ids, grow)
        rows_t = self.tax_emb.rows(taxonomies, grow)
        x = np.concatenate([gather(self.item_emb.weight, rows_i), gather(self.tax_emb.weight, rows_t)], axis=1)
        h = np.tanh(x @ self.Wi1 + self.bi1)
        return h @ self.Wi2 + self.bi2, (rows_i, rows_t, x, h)

    def backward_items(self, d_out: np.ndarray, cache, grads: Dict[str, np.ndarray]) -> None:
        rows_i, rows_t, x, h = cache
        d = self.dim
        grads["Wi2"] += h.T @ d_out
        grads["bi2"] += d_out.sum(axis=0)
        d_a = (d_out @ self.Wi2.T) * (1.0 - h * h)
        grads["Wi1"] += x.T @ d_a
        grads["bi1"] += d_a.sum(axis=0)
        d_x = d_a @ self.Wi1.T
        scatter_add(grads["item_emb"], rows_i, d_x[:, :d])
        scatter_add(grads["tax_emb"], rows_t, d_x[:, d:])

    # ------------------------------------------------------------------ loss

    def inbatch_loss(self, batch: TrainingBatch, q_hat: Optional[Mapping[int, float]] = None):
        """
        Sampled softmax over the batch's positive items (logits corrected by
        -log q) plus appended simple/hard negatives (uncorrected). Each
        positive contributes its per-head label weight times its cross-entropy.
        """
        positives, negatives = batch.positives(), batch.negatives()
        if len(positives) < 2: raise ValueError("in-batch softmax needs at least two positives")

        # Forward both towers
        users, u_cache = self.forward_users([s.user for s in positives])
        columns = positives + negatives
        items, i_cache = self.forward_items([s.item_id for s in columns], [s.taxonomy for s in columns])
        grads = zero_grads(self.parameters())

        # Sampling-bias correction on the in-batch columns only
        offset = np.zeros(len(columns))
        if q_hat is not None:
            for j, sample in enumerate(positives):
                q = q_hat.get(sample.item_id, 0.0)
                if not q > 0.0: raise ValueError(f"popularity estimate for item {sample.item_id} must be > 0")
                offset[j] = math.log(q)

        # Same-item collisions are not negatives
        column_items = np.array([s.item_id for s in columns])
        row_items = column_items[:len(positives)]
        collide = (row_items[:, None] == column_items[None, :])
        collide[np.arange(len(positives)), np.arange(len(positives))] = False
        target = np.zeros((len(positives), len(columns)))
        target[np.arange(len(positives)), np.arange(len(positives))] = 1.0

        # Per-head cross-entropy weighted by the head's label
        labels = np.array([s.labels for s in positives])
        loss = 0.0
        d_users = np.zeros_like(users)
        d_items = np.zeros_like(items)
        for h in range(self.heads):
            weight = labels[:, h]
            logits = np.where(collide, -np.inf, users[:, h, :] @ items.T - offset)
            lse = logsumexp(logits, axis=1)
            loss += float(np.sum(weight * (lse - np.diagonal(logits))))
            d_logits = weight[:, None] * (softmax(logits, axis=1) - target)
            d_users[:, h, :] = d_logits @ items
            d_items += d_logits.T @ users[:, h, :]

        # Back through both towers
        self.backward_users(d_users, u_cache, grads)
        self.backward_items(d_items, i_cache, grads)
        return loss, grads

    # ------------------------------------------------------------------ checkpoints

    def save(self, path: str) -> None:
        header = {"d": self.dim, "H": self.heads, "hidden": self.hidden, "day": self.day, "seed": self.seed}
        save_checkpoint(path, self.kind, header, self.parameters(), self.tables())

    @classmethod
    def load(cls, path: str, kind: Optional[str] = None) -> "TwoTowerModel":
        header, params, ids = load_checkpoint(path)
        expected = kind or cls.kind
        if header["kind"] != expected: raise ValueError(f"checkpoint kind {header['kind']} is not {expected}")
        config = ModelConfig(embedding_dim=header["d"], tower_hidden=header["hidden"], retrieval_heads=header["H"])
        model = cls(config, heads=header["H"], seed=header["seed"])
        model.load_parameters(params)
        for name, pairs in ids.items(): model.tables()[name].ids = dict(pairs)
        model.kind = header["kind"]
        model.day = header["day"]
        return model


def inbatch_softmax_loss(model: TwoTowerModel, batch: TrainingBatch, q_hat: Optional[Mapping[int, float]] = None):
    """
    Loss and gradients of the corrected in-batch softmax
    """
    return model.inbatch_loss(batch, q_hat)


def train_two_tower(model: TwoTowerModel, logs: DayLogs, training: TrainingConfig, estimator: PopularityEstimator,
                    optimizer, seed: int = 0, checkpoint_dir: Optional[str] = None) -> TwoTowerModel:
    """
    One epoch over a day's samples, continuing from the current parameters
    """
    losses = []
    for number, batch in enumerate(epoch_batches(logs, training.mix, seed, training.impression_positive_weight)):
        positives = batch.positives()
        if len(positives) < 2: continue

        # Popularity is updated before the batch is scored
        estimator.observe(s.item_id for s in positives)
        q_hat = estimator.q_hat(s.item_id for s in positives) if training.logq_correction else None
        loss, grads = model.inbatch_loss(batch, q_hat)
        check_finite(model.kind, logs.day, number, loss, grads)
        optimizer.step(model.parameters(), grads)
        losses.append(loss / max(1, len(positives)))

    # Record the day and checkpoint
    model.day = logs.day
    if losses: model.loss_history.append((logs.day, float(np.mean(losses))))
    logger.info("%s day %d: %d batches, mean loss %s", model.kind, logs.day, len(losses), f"{np.mean(losses):.4f}" if losses else "n/a")
    if checkpoint_dir is not None:
        os.makedirs(checkpoint_dir, exist_ok=True)
        model.save(os.path.join(checkpoint_dir, f"{model.kind}_day{logs.day}.json"))
    return model


def subsample_last_n(last_n: Sequence[int], r: int, m: int, seed) -> Tuple[int, ...]:
    """
    The r most recent items plus m uniform picks from the rest, recency order kept
    """
    if r < 0 or m < 0: raise ValueError("r and m must be >= 0")
    keep, rest = list(last_n[:r]), list(last_n[r:])
    if m >= len(rest): return tuple(keep + rest)
    rng = np.random.default_rng(seed)
    picks = sorted(rng.choice(len(rest), size=m, replace=False))
    return tuple(keep + [rest[i] for i in picks])


def user_vectors(model: TwoTowerModel, user: UserFeatures, noise: Tuple[float, bool] = (0.0, False),
                 subsample: Tuple[int, int, bool] = (10, 10, False), seed=0) -> np.ndarray:
    """
    (H, d) user vectors for retrieval, with optional last-n subsampling and
    Gaussian noise whose scale shrinks with the user's taxonomy breadth
    """
    features = user

    # Subsampled last-n
    r, m, enabled = subsample
    if enabled:
        kept = subsample_last_n(user.last_n, r, m, [seed, user.user_id, 1])
        tax = dict(zip(user.last_n, user.last_n_taxonomies))
        features = UserFeatures(user.user_id, user.group, kept, tuple(tax[i] for i in kept))

    # Read-only forward
    vectors = model.forward_users([features], grow=False)[0][0]

    # Noise sigma = sigma0 / number of distinct taxonomies
    sigma0, noisy = noise
    if noisy and sigma0 > 0.0:
        breadth = max(1, len(set(user.last_n_taxonomies)))
        vectors = vectors + np.random.default_rng([seed, user.user_id, 2]).normal(0.0, sigma0 / breadth, vectors.shape)
    return vectors


def retrieval_query(vectors: np.ndarray, head_weights: Optional[Sequence[float]] = None) -> np.ndarray:
    """
    Single query from H user vectors: the vector itself, or the weighted sum
    """
    if vectors.shape[0] == 1: return vectors[0]
    weights = np.ones(vectors.shape[0]) if head_weights is None else np.asarray(head_weights, dtype=float)
    return weights @ vectors


@dataclass
class ItemIndex:
    ids: np.ndarray
    vectors: np.ndarray
    pool_id: str = "all"

    def __len__(self) -> int:
        return len(self.ids)


def build_item_index(model: TwoTowerModel, items: Iterable[Tuple[int, int]], pool_id: str = "all") -> ItemIndex:
    """
    Item-tower vectors for (item_id, taxonomy) pairs of one pool
    """
    items = sorted(items)
    if not items: return ItemIndex(np.zeros(0, dtype=np.int64), np.zeros((0, model.dim)), pool_id)
    vectors, _ = model.forward_items([i for i, _ in items], [t for _, t in items], grow=False)
    return ItemIndex(np.array([i for i, _ in items], dtype=np.int64), vectors, pool_id)


def ann_search(index: ItemIndex, query: np.ndarray, k: int) -> List[Tuple[int, float]]:
    """
    Exact top-k by dot product; ties go to the lower item id
    """
    if len(index) == 0: raise ValueError("empty item index")
    if k < 1: raise ValueError("k must be >= 1")
    scores = index.vectors @ query
    order = np.lexsort((index.ids, -scores))[:k]
    return [(int(index.ids[j]), float(scores[j])) for j in order]
