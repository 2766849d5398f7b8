import logging
import os
from collections import defaultdict
from dataclasses import dataclass, replace
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from deskrec.config import (CONTAMINATION_RATIO, LISTWISE_CAP, SPECIAL_GROUPS, TARGETS, USER_GROUPS,
                            ModelConfig, TrainingConfig)
from deskrec.domain import COUNTER_OF, EngagementStats, EventType, PredictionVector, Source
from deskrec.errors import MissingTeacherError
from deskrec.eventlog import LogState
from deskrec.nn import (Embedding, bce_with_logits, check_finite, dense_init, gather, load_checkpoint, save_checkpoint,
                        scatter_add, sigmoid, zero_grads)
from deskrec.two_tower import DayLogs, TwoTowerModel, UserFeatures, user_features

logger = logging.getLogger(__name__)

# Dense inputs of the ranker, in order
DENSE_FEATURES = ("click_rate", "like_rate", "share_rate", "follow_rate", "comment_rate", "item_age", "position")
ITEM_AGE_SCALE = 30.0
POSITION_SCALE = 10.0
SERVE_POSITION = 0

# Calibrated probabilities stay inside (EPS, 1 - EPS)
CALIBRATION_EPS = 1e-6

POOLINGS = ("average", "din", "sim")


# ---------------------------------------------------------------------------- pooling

def pool_last_n_average(embeddings: np.ndarray) -> np.ndarray:
    """
    Mean of the last-n embeddings; zero vector when empty
    """
    embeddings = np.asarray(embeddings, dtype=float)
    if embeddings.ndim != 2 or embeddings.shape[0] == 0: return np.zeros(embeddings.shape[-1] if embeddings.ndim == 2 else 0)
    return embeddings.mean(axis=0)


def din_pool(target: np.ndarray, embeddings: np.ndarray) -> np.ndarray:
    """
    Attention pooling: softmax(<target, e_j> / sqrt(d)) weighted sum of e_j
    """
    target = np.asarray(target, dtype=float)
    embeddings = np.asarray(embeddings, dtype=float)
    if embeddings.ndim != 2 or embeddings.shape[0] == 0: return np.zeros(target.shape[-1])
    out, _ = _attention(target[None, :], embeddings[None, :, :], np.ones((1, embeddings.shape[0]), dtype=bool))
    return out[0]


def sim_filter(target_taxonomy: int, last_n: Sequence[Tuple[int, int]], cap: int) -> List[Tuple[int, int]]:
    """
    Last-n (item, taxonomy) entries of the target's taxonomy, most recent `cap`
    """
    if cap < 1: raise ValueError("cap must be >= 1")
    return [entry for entry in last_n if entry[1] == target_taxonomy][:cap]


def _attention(targets: np.ndarray, embeddings: np.ndarray, valid: np.ndarray):
    """
    Batched masked attention; rows without valid entries pool to zero
    """
    d = targets.shape[-1]
    scores = np.einsum("bd,bld->bl", targets, embeddings) / np.sqrt(d)
    scores = np.where(valid, scores, -np.inf)
    peak = np.max(np.where(valid, scores, -1e300), axis=1, keepdims=True)
    weights = np.where(valid, np.exp(scores - np.where(np.isfinite(peak), peak, 0.0)), 0.0)
    total = weights.sum(axis=1, keepdims=True)
    weights = np.divide(weights, total, out=np.zeros_like(weights), where=total > 0)
    return np.einsum("bl,bld->bd", weights, embeddings), weights


def _attention_backward(d_out: np.ndarray, targets: np.ndarray, embeddings: np.ndarray, weights: np.ndarray):
    """
    Gradients of _attention w.r.t. the targets and the embeddings
    """
    d = targets.shape[-1]
    d_emb = weights[:, :, None] * d_out[:, None, :]
    d_weights = np.einsum("bd,bld->bl", d_out, embeddings)
    d_scores = weights * (d_weights - np.sum(weights * d_weights, axis=1, keepdims=True))
    d_targets = np.einsum("bl,bld->bd", d_scores, embeddings) / np.sqrt(d)
    d_emb += d_scores[:, :, None] * targets[:, None, :] / np.sqrt(d)
    return d_targets, d_emb


# ---------------------------------------------------------------------------- samples

@dataclass(frozen=True)
class RankSample:
    user: UserFeatures
    item_id: int
    taxonomy: int
    dense: Tuple[float, ...]
    labels: Tuple[float, ...] = (0.0,) * len(TARGETS)
    mask: Tuple[float, ...] = (1.0,) * len(TARGETS)
    teacher: Optional[Tuple[float, ...]] = None
    day: int = 0


def item_dense(log_state: LogState, item_id: int, day: int, position: int = SERVE_POSITION,
               stats: Optional[EngagementStats] = None) -> Tuple[float, ...]:
    """
    Smoothed per-impression rates, item age and slate position
    """
    item = log_state.items[item_id]
    rates = (stats or item.quality_stats).rates()
    age = min(max(day - item.publish_day, 0), ITEM_AGE_SCALE) / ITEM_AGE_SCALE
    return (rates.click_rate,) + tuple(rates.per_impression[t] for t in TARGETS[1:]) + (age, position / POSITION_SCALE)


def _stats_before(log_state: LogState, events, item_ids: Iterable[int]) -> Dict[int, EngagementStats]:
    """
    Item counters with the given day's events taken back out
    """
    day_counts: Dict[int, Dict[str, int]] = defaultdict(lambda: defaultdict(int))
    for event in events:
        if event.event_type in COUNTER_OF: day_counts[event.item_id][COUNTER_OF[event.event_type]] += 1
    before = {}
    for item_id in item_ids:
        current = log_state.items[item_id].quality_stats.to_dict()
        before[item_id] = EngagementStats(**{k: v - day_counts[item_id][k] for k, v in current.items()})
    return before


def impression_samples(logs: DayLogs) -> List[RankSample]:
    """
    One sample per first impression of (user, item) on the day; label h is 1
    iff the matching engagement followed. Dense stats exclude the day itself.
    """
    state = logs.log_state
    first: Dict[Tuple[int, int], int] = {}
    labels: Dict[Tuple[int, int], List[float]] = defaultdict(lambda: [0.0] * len(TARGETS))
    target_of = {EventType.CLICK: 0, EventType.LIKE: 1, EventType.SHARE: 2, EventType.FOLLOW: 3, EventType.COMMENT: 4}
    for event in logs.events:
        pair = (event.user_id, event.item_id)
        if event.event_type == EventType.IMPRESSION:
            if pair not in first: first[pair] = event.position
        elif event.event_type in target_of: labels[pair][target_of[event.event_type]] = 1.0

    # Assemble in (user, item) order
    stats = _stats_before(state, logs.events, {i for _, i in first})
    samples = []
    for (user_id, item_id), position in sorted(first.items()):
        samples.append(RankSample(
            user_features(state, user_id, exclude=item_id), item_id, state.items[item_id].taxonomy,
            item_dense(state, item_id, logs.day, position, stats[item_id]), tuple(labels[(user_id, item_id)]), day=logs.day,
        ))
    return samples


def serve_samples(log_state: LogState, user: UserFeatures, item_ids: Sequence[int], day: int) -> List[RankSample]:
    """
    Unlabelled samples for scoring candidates at serve time
    """
    return [RankSample(user, i, log_state.items[i].taxonomy, item_dense(log_state, i, day), day=day) for i in item_ids]


def teacher_index(records: Iterable[dict], stage: str = "rank") -> Dict[Tuple[int, int, int], Tuple[float, ...]]:
    """
    (day, user, item) -> latest logged teacher prediction
    """
    index = {}
    for record in records:
        if record.get("stage", "rank") != stage: continue
        for item_id, p in zip(record["item_ids"], record["p"]): index[(record["day"], record["user_id"], item_id)] = tuple(p)
    return index


def attach_teacher(samples: Sequence[RankSample], teacher: Mapping[Tuple[int, int, int], Tuple[float, ...]],
                   drop_missing: bool = False) -> List[RankSample]:
    """
    Copy logged teacher predictions onto samples; optionally drop samples that have none
    """
    out = []
    for sample in samples:
        p = teacher.get((sample.day, sample.user.user_id, sample.item_id))
        if p is None and drop_missing: continue
        out.append(replace(sample, teacher=p))
    return out


@dataclass(frozen=True)
class CandidateList:
    """
    One logged request: the prerank survivors in teacher (ranking utility) order
    """
    user: UserFeatures
    item_ids: Tuple[int, ...]
    taxonomies: Tuple[int, ...]


def candidate_lists(records: Iterable[dict], log_state: LogState, cap: int = LISTWISE_CAP) -> List[CandidateList]:
    lists = []
    for record in records:
        if record.get("stage", "rank") != "rank" or record["user_id"] not in log_state.users: continue
        order = sorted(range(len(record["item_ids"])), key=lambda k: (-record["utility"][k], record["item_ids"][k]))[:cap]
        items = tuple(record["item_ids"][k] for k in order if record["item_ids"][k] in log_state.items)
        if len(items) < 2: continue
        lists.append(CandidateList(user_features(log_state, record["user_id"]), items, tuple(log_state.items[i].taxonomy for i in items)))
    return lists


# ---------------------------------------------------------------------------- ranker

class RankerModel:
    """
    Shared-bottom multi-target ranker: id embeddings, pooled last-n and
    dense stats feed a tanh trunk with one logistic head per target
    """
    kind = "ranker"

    def __init__(self, config: ModelConfig, seed: int = 0, pooling: Optional[str] = None):
        d = config.embedding_dim
        self.config = config
        self.dim = d
        self.layers = tuple(config.ranker_layers)
        self.pooling = pooling or config.pooling
        if self.pooling not in POOLINGS: raise ValueError(f"unknown pooling {self.pooling}")
        self.sim_cap = config.sim_cap
        self.seed = seed
        self.day: Optional[int] = None
        self.loss_history: List[Tuple[int, float]] = []

        # Embedding tables
        self.user_emb = Embedding("rank_user", d, seed)
        self.group_emb = Embedding("rank_group", d, seed)
        self.item_emb = Embedding("rank_item", d, seed)
        self.tax_emb = Embedding("rank_taxonomy", d, seed)

        # Trunk and heads
        rng = np.random.default_rng([seed, 202])
        self.weights: List[np.ndarray] = []
        self.biases: List[np.ndarray] = []
        width = 5 * d + len(DENSE_FEATURES)
        for size in self.layers:
            w, b = dense_init(rng, width, size)
            self.weights.append(w); self.biases.append(b)
            width = size
        self.Wh, self.bh = dense_init(rng, width, len(TARGETS))

    def tables(self) -> Dict[str, Embedding]:
        return {"user_emb": self.user_emb, "group_emb": self.group_emb, "item_emb": self.item_emb, "tax_emb": self.tax_emb}

    def parameters(self) -> Dict[str, np.ndarray]:
        params = {name: table.weight for name, table in self.tables().items()}
        for k, (w, b) in enumerate(zip(self.weights, self.biases)): params[f"W{k}"], params[f"b{k}"] = w, b
        params["Wh"], params["bh"] = self.Wh, self.bh
        return params

    def load_parameters(self, params: Mapping[str, np.ndarray]) -> None:
        for name, value in params.items():
            value = np.array(value, dtype=float)
            if name in self.tables(): self.tables()[name].weight = value
            elif name in ("Wh", "bh"): setattr(self, name, value)
            elif name[0] == "W": self.weights[int(name[1:])] = value
            else: self.biases[int(name[1:])] = value

    def forward(self, samples: Sequence[RankSample], grow: bool = True):
        """
        Head logits (B, 5) and the backward cache
        """
        d = self.dim
        rows_u = self.user_emb.rows([s.user.user_id for s in samples], grow)
        rows_g = self.group_emb.rows([USER_GROUPS.index(s.user.group) if s.user.group in USER_GROUPS else 2 for s in samples], grow)
        rows_i = self.item_emb.rows([s.item_id for s in samples], grow)
        rows_t = self.tax_emb.rows([s.taxonomy for s in samples], grow)

        # Padded last-n, with the taxonomy pre-filter for SIM pooling
        histories = []
        for s in samples:
            entries = list(zip(s.user.last_n, s.user.last_n_taxonomies))
            if self.pooling == "sim": entries = sim_filter(s.taxonomy, entries, self.sim_cap)
            histories.append([i for i, _ in entries])
        width = max([len(h) for h in histories] + [1])
        rows_n = np.full((len(samples), width), -1, dtype=np.int64)
        for b, history in enumerate(histories):
            if history: rows_n[b, :len(history)] = self.item_emb.rows(history, grow)
        valid = rows_n >= 0
        history_emb = gather(self.item_emb.weight, rows_n)
        target_emb = gather(self.item_emb.weight, rows_i)

        # Pool last-n
        if self.pooling == "average":
            counts = np.maximum(valid.sum(axis=1), 1)[:, None]
            pooled, attn = history_emb.sum(axis=1) / counts, counts
        else: pooled, attn = _attention(target_emb, history_emb, valid)

        # Trunk
        dense = np.array([s.dense for s in samples], dtype=float)
        x = np.concatenate([gather(self.user_emb.weight, rows_u), gather(self.group_emb.weight, rows_g), target_emb,
                            gather(self.tax_emb.weight, rows_t), pooled, dense], axis=1)
        activations = [x]
        for w, b in zip(self.weights, self.biases): activations.append(np.tanh(activations[-1] @ w + b))
        logits = activations[-1] @ self.Wh + self.bh
        return logits, (rows_u, rows_g, rows_i, rows_t, rows_n, history_emb, target_emb, attn, activations)

    def backward(self, d_logits: np.ndarray, cache, grads: Dict[str, np.ndarray]) -> None:
        rows_u, rows_g, rows_i, rows_t, rows_n, history_emb, target_emb, attn, activations = cache
        d = self.dim

        # Heads and trunk
        grads["Wh"] += activations[-1].T @ d_logits
        grads["bh"] += d_logits.sum(axis=0)
        d_h = d_logits @ self.Wh.T
        for k in range(len(self.weights) - 1, -1, -1):
            d_a = d_h * (1.0 - activations[k + 1] ** 2)
            grads[f"W{k}"] += activations[k].T @ d_a
            grads[f"b{k}"] += d_a.sum(axis=0)
            d_h = d_a @ self.weights[k].T

        # Split the input gradient
        scatter_add(grads["user_emb"], rows_u, d_h[:, :d])
        scatter_add(grads["group_emb"], rows_g, d_h[:, d:2 * d])
        d_target = d_h[:, 2 * d:3 * d].copy()
        scatter_add(grads["tax_emb"], rows_t, d_h[:, 3 * d:4 * d])
        d_pooled = d_h[:, 4 * d:5 * d]

        # Through the pooling
        if self.pooling == "average": d_hist = np.broadcast_to((d_pooled / attn)[:, None, :], history_emb.shape)
        else:
            d_t, d_hist = _attention_backward(d_pooled, target_emb, history_emb, attn)
            d_target += d_t
        scatter_add(grads["item_emb"], rows_i, d_target)
        scatter_add(grads["item_emb"], rows_n.ravel(), np.ascontiguousarray(d_hist).reshape(-1, d))

    def loss_and_grads(self, samples: Sequence[RankSample], targets: Optional[np.ndarray] = None):
        """
        Masked per-head binary cross-entropy, mean over samples, summed over heads
        """
        logits, cache = self.forward(samples)
        grads = zero_grads(self.parameters())
        y = np.array([s.labels for s in samples], dtype=float) if targets is None else targets
        mask = np.array([s.mask for s in samples], dtype=float)
        n = len(samples)
        loss = float(np.sum(mask * bce_with_logits(logits, y)) / n)
        self.backward(mask * (sigmoid(logits) - y) / n, cache, grads)
        return loss, grads

    def predict(self, samples: Sequence[RankSample]) -> np.ndarray:
        """
        (B, 5) probabilities, read-only
        """
        if not samples: return np.zeros((0, len(TARGETS)))
        return sigmoid(self.forward(samples, grow=False)[0])

    def save(self, path: str) -> None:
        header = {"d": self.dim, "layers": list(self.layers), "pooling": self.pooling, "sim_cap": self.sim_cap, "day": self.day, "seed": self.seed}
        save_checkpoint(path, self.kind, header, self.parameters(), self.tables())

    @classmethod
    def load(cls, path: str) -> "RankerModel":
        header, params, ids = load_checkpoint(path)
        if header["kind"] != cls.kind: raise ValueError(f"checkpoint kind {header['kind']} is not {cls.kind}")
        config = ModelConfig(embedding_dim=header["d"], ranker_layers=tuple(header["layers"]), pooling=header["pooling"], sim_cap=header["sim_cap"])
        model = cls(config, seed=header["seed"])
        model.load_parameters(params)
        for name, pairs in ids.items(): model.tables()[name].ids = dict(pairs)
        model.day = header["day"]
        return model


def _minibatches(samples: Sequence, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(len(samples))
    for start in range(0, len(samples), batch_size):
        yield start // batch_size, [samples[k] for k in order[start:start + batch_size]]


def _checkpoint(model, checkpoint_dir: Optional[str], day: int) -> None:
    if checkpoint_dir is None: return
    os.makedirs(checkpoint_dir, exist_ok=True)
    model.save(os.path.join(checkpoint_dir, f"{model.kind}_day{day}.json"))


def train_ranker(model: RankerModel, samples: Sequence[RankSample], training: TrainingConfig, optimizer, day: int,
                 seed: int = 0, checkpoint_dir: Optional[str] = None) -> RankerModel:
    """
    One epoch over the day's impression samples from the current checkpoint
    """
    rng = np.random.default_rng([seed, day, 21])
    losses = []
    for number, batch in _minibatches(samples, training.rank_batch_size, rng):
        loss, grads = model.loss_and_grads(batch)
        check_finite(model.kind, day, number, loss, grads)
        optimizer.step(model.parameters(), grads)
        losses.append(loss)

    # Record and checkpoint
    model.day = day
    if losses: model.loss_history.append((day, float(np.mean(losses))))
    logger.info("ranker day %d: %d samples, mean loss %s", day, len(samples), f"{np.mean(losses):.4f}" if losses else "n/a")
    _checkpoint(model, checkpoint_dir, day)
    return model


# ---------------------------------------------------------------------------- preranking

def distill_label(y: float, p: float) -> float:
    """
    Midpoint of the observed label and the teacher probability
    """
    if not 0.0 < p < 1.0: raise ValueError(f"teacher probability {p} outside (0, 1)")
    return (y + p) / 2.0


def listwise_consistency_loss(scores: np.ndarray, teacher_order: Sequence[int]) -> Tuple[float, np.ndarray]:
    """
    Mean pairwise logistic loss over teacher-ordered pairs (a above b):
    log(1 + exp(-(s_a - s_b))). Returns the loss and d loss / d scores.
    """
    scores = np.asarray(scores, dtype=float)
    order = np.asarray(teacher_order, dtype=np.int64)
    grad = np.zeros_like(scores)
    k = len(order)
    if k < 2: return 0.0, grad

    # All ordered pairs at once
    upper, lower = np.triu_indices(k, 1)
    a, b = order[upper], order[lower]
    margin = scores[a] - scores[b]
    pairs = len(a)
    loss = float(np.sum(np.logaddexp(0.0, -margin)) / pairs)
    pull = sigmoid(-margin) / pairs
    np.add.at(grad, a, -pull)
    np.add.at(grad, b, pull)
    return loss, grad


class PrerankModel:
    """
    Multi-vector two-tower scorer: p_h = sigmoid(<v_u^h, v_i>)
    """
    kind = "prerank"

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.towers = TwoTowerModel(config, heads=len(TARGETS), seed=seed + 7919)
        self.towers.kind = self.kind
        self.loss_history: List[Tuple[int, float]] = []

    @property
    def day(self) -> Optional[int]:
        return self.towers.day

    def parameters(self) -> Dict[str, np.ndarray]:
        return self.towers.parameters()

    def logits(self, users: Sequence[UserFeatures], item_ids: Sequence[int], taxonomies: Sequence[int], grow: bool = True):
        u, u_cache = self.towers.forward_users(users, grow)
        v, i_cache = self.towers.forward_items(item_ids, taxonomies, grow)
        return np.einsum("bhd,bd->bh", u, v), (u, v, u_cache, i_cache)

    def backward(self, d_logits: np.ndarray, cache, grads: Dict[str, np.ndarray]) -> None:
        u, v, u_cache, i_cache = cache
        self.towers.backward_users(d_logits[:, :, None] * v[:, None, :], u_cache, grads)
        self.towers.backward_items(np.einsum("bh,bhd->bd", d_logits, u), i_cache, grads)

    def pointwise_loss(self, samples: Sequence[RankSample], targets: np.ndarray):
        """
        Per-head binary cross-entropy against soft targets
        """
        logits, cache = self.logits([s.user for s in samples], [s.item_id for s in samples], [s.taxonomy for s in samples])
        grads = zero_grads(self.parameters())
        n = len(samples)
        loss = float(np.sum(bce_with_logits(logits, targets)) / n)
        self.backward((sigmoid(logits) - targets) / n, cache, grads)
        return loss, grads

    def listwise_loss(self, candidates: CandidateList, score_weights: np.ndarray, weight: float):
        """
        Pairwise consistency with the teacher order; the list score is the
        weighted sum of head logits
        """
        k = len(candidates.item_ids)
        u, u_cache = self.towers.forward_users([candidates.user])
        v, i_cache = self.towers.forward_items(candidates.item_ids, candidates.taxonomies)
        logits = v @ u[0].T
        loss, d_scores = listwise_consistency_loss(logits @ score_weights, np.arange(k))
        grads = zero_grads(self.parameters())
        d_logits = weight * d_scores[:, None] * score_weights[None, :]
        self.towers.backward_users((d_logits.T @ v)[None, :, :], u_cache, grads)
        self.towers.backward_items(d_logits @ u[0], i_cache, grads)
        return weight * loss, grads

    def predict(self, user: UserFeatures, item_ids: Sequence[int], taxonomies: Sequence[int]) -> np.ndarray:
        """
        (k, 5) probabilities for one user's candidates, read-only
        """
        if not item_ids: return np.zeros((0, len(TARGETS)))
        u, _ = self.towers.forward_users([user], grow=False)
        v, _ = self.towers.forward_items(item_ids, taxonomies, grow=False)
        return sigmoid(v @ u[0].T)

    def save(self, path: str) -> None:
        self.towers.save(path)

    @classmethod
    def load(cls, path: str) -> "PrerankModel":
        header, _, _ = load_checkpoint(path)
        model = cls(ModelConfig(embedding_dim=header["d"], tower_hidden=header["hidden"]))
        model.towers = TwoTowerModel.load(path, kind=cls.kind)
        return model


def prerank_targets(samples: Sequence[RankSample], mode: str, distill_heads: str = "all") -> np.ndarray:
    """
    Training targets per head: y (plain) or (y + p) / 2 where a teacher p exists
    """
    y = np.array([s.labels for s in samples], dtype=float)
    if mode == "plain": return y
    heads = range(len(TARGETS)) if distill_heads == "all" else range(1)
    targets = y.copy()
    for b, sample in enumerate(samples):
        if sample.teacher is None: raise MissingTeacherError(f"no teacher prediction for user {sample.user.user_id} item {sample.item_id} day {sample.day}")
        for h in heads: targets[b, h] = distill_label(y[b, h], sample.teacher[h])
    return targets


def train_prerank(model: PrerankModel, samples: Sequence[RankSample], mode: str, training: TrainingConfig, optimizer, day: int,
                  lists: Sequence[CandidateList] = (), score_weights: Optional[Sequence[float]] = None,
                  seed: int = 0, checkpoint_dir: Optional[str] = None) -> PrerankModel:
    """
    One epoch of preranking: pointwise (plain or distilled) then, in listwise
    mode, one pass of pairwise consistency over the logged candidate lists
    """
    if mode not in ("plain", "pointwise_distill", "listwise"): raise ValueError(f"unknown prerank mode {mode}")
    rng = np.random.default_rng([seed, day, 31])
    losses = []

    # Pointwise pass
    for number, batch in _minibatches(samples, training.rank_batch_size, rng):
        loss, grads = model.pointwise_loss(batch, prerank_targets(batch, mode, training.distill_heads))
        check_finite(model.kind, day, number, loss, grads)
        optimizer.step(model.parameters(), grads)
        losses.append(loss)

    # Listwise pass
    if mode == "listwise" and training.listwise_weight > 0.0:
        weights = np.ones(len(TARGETS)) if score_weights is None else np.asarray(score_weights, dtype=float)
        for number, k in enumerate(rng.permutation(len(lists))):
            loss, grads = model.listwise_loss(lists[k], weights, training.listwise_weight)
            check_finite(model.kind, day, number, loss, grads)
            optimizer.step(model.parameters(), grads)

    # Record and checkpoint
    model.towers.day = day
    if losses: model.loss_history.append((day, float(np.mean(losses))))
    logger.info("prerank day %d (%s): %d samples, %d lists", day, mode, len(samples), len(lists))
    _checkpoint(model, checkpoint_dir, day)
    return model


class DistillationGuard:
    """
    Freezes distillation when the teacher's mean p_click moves by more than
    `ratio` times day over day
    """

    def __init__(self, ratio: float = CONTAMINATION_RATIO, enabled: bool = True):
        self.ratio = ratio
        self.enabled = enabled
        self.previous: Optional[float] = None
        self.frozen_days: List[int] = []

    def allow(self, day: int, mean_p_click: float) -> bool:
        previous, self.previous = self.previous, mean_p_click
        if not self.enabled or previous is None or previous <= 0.0 or mean_p_click <= 0.0: return True
        drift = max(mean_p_click / previous, previous / mean_p_click)
        if drift <= self.ratio: return True
        logger.warning("day %d: teacher mean p_click drifted %.2fx; distillation frozen", day, drift)
        self.frozen_days.append(day)
        return False


# ---------------------------------------------------------------------------- residual calibration

def _group_onehot(groups: Sequence[str]) -> np.ndarray:
    onehot = np.zeros((len(groups), len(USER_GROUPS)))
    for b, group in enumerate(groups): onehot[b, USER_GROUPS.index(group) if group in USER_GROUPS else 2] = 1.0
    return onehot


class ResidualModel:
    """
    Small perceptron fitting y - p for special-group users; output is
    tanh-bounded so |r| <= 1
    """
    kind = "residual"

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.hidden = config.residual_hidden
        self.seed = seed
        self.day: Optional[int] = None
        self.loss_history: List[Tuple[int, float]] = []
        rng = np.random.default_rng([seed, 303])
        width = len(USER_GROUPS) + 2 * len(TARGETS) + len(DENSE_FEATURES)
        self.W1, self.b1 = dense_init(rng, width, self.hidden)
        self.W2, self.b2 = dense_init(rng, self.hidden, len(TARGETS))
        self.W2 *= 0.1

    def parameters(self) -> Dict[str, np.ndarray]:
        return {"W1": self.W1, "b1": self.b1, "W2": self.W2, "b2": self.b2}

    def features(self, groups: Sequence[str], base: np.ndarray, dense: np.ndarray) -> np.ndarray:
        clipped = np.clip(base, CALIBRATION_EPS, 1.0 - CALIBRATION_EPS)
        return np.concatenate([_group_onehot(groups), clipped, np.log(clipped / (1.0 - clipped)) / 5.0, dense], axis=1)

    def forward(self, x: np.ndarray):
        h = np.tanh(x @ self.W1 + self.b1)
        r = np.tanh(h @ self.W2 + self.b2)
        return r, (x, h, r)

    def loss_and_grads(self, x: np.ndarray, residual_targets: np.ndarray):
        """
        Squared error to y - p, mean over samples, summed over heads
        """
        r, (x, h, _) = self.forward(x)
        n = len(x)
        diff = r - residual_targets
        loss = float(np.sum(diff * diff) / n)
        d_out = 2.0 * diff / n * (1.0 - r * r)
        d_h = (d_out @ self.W2.T) * (1.0 - h * h)
        grads = {"W2": h.T @ d_out, "b2": d_out.sum(axis=0), "W1": x.T @ d_h, "b1": d_h.sum(axis=0)}
        return loss, grads

    def predict(self, groups: Sequence[str], base: np.ndarray, dense: np.ndarray) -> np.ndarray:
        if len(groups) == 0: return np.zeros((0, len(TARGETS)))
        return self.forward(self.features(groups, base, dense))[0]

    def save(self, path: str) -> None:
        save_checkpoint(path, self.kind, {"hidden": self.hidden, "day": self.day, "seed": self.seed}, self.parameters())

    @classmethod
    def load(cls, path: str) -> "ResidualModel":
        header, params, _ = load_checkpoint(path)
        if header["kind"] != cls.kind: raise ValueError(f"checkpoint kind {header['kind']} is not {cls.kind}")
        model = cls(ModelConfig(residual_hidden=header["hidden"]), seed=header["seed"])
        for name, value in params.items(): setattr(model, name, value)
        model.day = header["day"]
        return model


def train_residual(model: ResidualModel, groups: Sequence[str], base: np.ndarray, dense: np.ndarray, labels: np.ndarray,
                   training: TrainingConfig, optimizer, day: int, epochs: Optional[int] = None, seed: int = 0,
                   checkpoint_dir: Optional[str] = None) -> ResidualModel:
    """
    Fit (features, y - p) pairs of special-group impressions
    """
    x = model.features(groups, base, dense)
    targets = np.asarray(labels, dtype=float) - np.asarray(base, dtype=float)
    rng = np.random.default_rng([seed, day, 41])
    losses = []
    for _ in range(epochs if epochs is not None else training.residual_epochs):
        for number, rows in _minibatches(list(range(len(x))), training.rank_batch_size, rng):
            loss, grads = model.loss_and_grads(x[rows], targets[rows])
            check_finite(model.kind, day, number, loss, grads)
            optimizer.step(model.parameters(), grads)
            losses.append(loss)
    model.day = day
    if losses: model.loss_history.append((day, float(np.mean(losses))))
    _checkpoint(model, checkpoint_dir, day)
    return model


def calibrated_probabilities(base: np.ndarray, residual: np.ndarray, eps: float = CALIBRATION_EPS) -> np.ndarray:
    return np.clip(np.asarray(base, dtype=float) + np.asarray(residual, dtype=float), eps, 1.0 - eps)


def residual_calibrate(base: PredictionVector, residual_model: ResidualModel, group: str,
                       dense: Sequence[float] = (0.0,) * len(DENSE_FEATURES)) -> PredictionVector:
    """
    p' = clamp(p + r, eps, 1 - eps) for a new or inactive user
    """
    if group not in SPECIAL_GROUPS: raise ValueError(f"residual calibration applies to special groups only, not {group}")
    p = base.as_array()[None, :]
    r = residual_model.predict([group], p, np.asarray([dense], dtype=float))
    return PredictionVector.from_array(calibrated_probabilities(p, r)[0], Source.RANK_CALIBRATED)
