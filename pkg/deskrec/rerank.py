import logging
import math
from collections import Counter
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from deskrec.config import CLUSTER_GAP, KMEANS_ITERS, TAXONOMY_GAP
from deskrec.domain import ScoredCandidate

logger = logging.getLogger(__name__)

# Marginal determinant gains below this end the greedy DPP selection
DPP_EPS = 1e-10
# Identical items: cosine at least this close to 1
DUPLICATE_SIMILARITY = 1.0 - 1e-9
# Placements tried by the scatter search after a stuck greedy pass
SCATTER_SEARCH_NODES = 2000
EXPLORATION_CHANNEL = "exploration"


def cosine_matrix(vectors: np.ndarray) -> np.ndarray:
    """
    Pairwise cosine in [-1, 1]; zero vectors are dissimilar to everything but themselves
    """
    vectors = np.asarray(vectors, dtype=float)
    norms = np.linalg.norm(vectors, axis=1)
    unit = np.divide(vectors, norms[:, None], out=np.zeros_like(vectors), where=norms[:, None] > 0)
    sim = np.clip(unit @ unit.T, -1.0, 1.0)
    np.fill_diagonal(sim, 1.0)
    return sim


def _best(values: np.ndarray, ids: np.ndarray, remaining: np.ndarray) -> int:
    """
    Index (into the full arrays) of the highest value among `remaining`; ties to the lower id
    """
    order = np.lexsort((ids[remaining], -values[remaining]))
    return int(remaining[order[0]])


# ---------------------------------------------------------------------------- MMR

def mmr_order(scores: Sequence[float], similarity: np.ndarray, ids: Sequence[int], theta: float,
              window: Optional[int], limit: Optional[int] = None, selected: Sequence[int] = ()) -> Tuple[List[int], List[float]]:
    """
    Greedy MMR over candidate indices. Each step picks argmax s_i + d_i with
    d_i = -theta * max sim(i, j) over the last `window` picks (all picks when
    window is None). `selected` seeds the picked set without being returned.
    """
    if theta < 0.0: raise ValueError("theta must be >= 0")
    scores = np.asarray(scores, dtype=float)
    ids = np.asarray(ids, dtype=np.int64)
    n = len(scores)
    limit = n if limit is None else min(limit, n)
    picked = list(selected)
    remaining = np.setdiff1d(np.arange(n), np.asarray(picked, dtype=np.int64))
    order, penalties = [], []

    while len(order) < limit and len(remaining):
        # Penalty from the most recent picks
        recent = picked if window is None else picked[max(len(picked) - window, 0):] if window > 0 else []
        penalty = np.zeros(n)
        if recent: penalty[remaining] = -theta * similarity[np.ix_(remaining, recent)].max(axis=1)

        # Greedy pick
        best = _best(scores + penalty, ids, remaining)
        order.append(best); penalties.append(float(penalty[best])); picked.append(best)
        remaining = remaining[remaining != best]
    return order, penalties


def mmr_rerank(candidates: Sequence[ScoredCandidate], similarity: np.ndarray, theta: float,
               window: Optional[int] = None) -> List[ScoredCandidate]:
    """
    Reorder candidates by MMR and record the penalty as each candidate's diversity
    """
    if not candidates: return []
    order, penalties = mmr_order([c.score for c in candidates], similarity, [c.item_id for c in candidates], theta, window)
    out = []
    for k, penalty in zip(order, penalties):
        candidates[k].diversity = penalty
        out.append(candidates[k])
    return out


# ---------------------------------------------------------------------------- DPP

def dpp_kernel(scores: Sequence[float], similarity: np.ndarray) -> np.ndarray:
    """
    L_ij = q_i * max(sim_ij, 0) * q_j with q_i = exp(s_i)
    """
    quality = np.exp(np.asarray(scores, dtype=float))
    kernel = quality[:, None] * np.maximum(similarity, 0.0) * quality[None, :]
    if not np.all(np.isfinite(kernel)): raise ValueError("non-finite DPP kernel entries")
    return kernel


def _conditional_gains(kernel: np.ndarray, conditioning: Sequence[int]) -> np.ndarray:
    """
    L_ii - L_iS L_SS^-1 L_Si for every i, by a fresh Cholesky of the conditioning set
    """
    diag = np.diag(kernel).copy()
    if not conditioning: return diag
    sub = kernel[np.ix_(conditioning, conditioning)]
    try: chol = np.linalg.cholesky(sub)
    except np.linalg.LinAlgError: chol = np.linalg.cholesky(sub + DPP_EPS * np.eye(len(conditioning)))
    solved = np.linalg.solve(chol, kernel[conditioning, :])
    return diag - np.sum(solved * solved, axis=0)


def greedy_map(kernel: np.ndarray, ids: Sequence[int], max_out: Optional[int] = None,
               window: Optional[int] = None) -> Tuple[List[int], List[float]]:
    """
    Greedy MAP selection by marginal log-det gain. The full-window run keeps an
    incremental Cholesky factor; a windowed run conditions only on the last
    `window` picks. Returns picked indices and their log gains.
    """
    kernel = np.asarray(kernel, dtype=float)
    if not np.all(np.isfinite(kernel)): raise ValueError("non-finite DPP kernel entries")
    ids = np.asarray(ids, dtype=np.int64)
    n = kernel.shape[0]
    max_out = n if max_out is None else min(max_out, n)
    remaining = np.arange(n)
    order: List[int] = []
    gains: List[float] = []

    # Incremental factor rows
    cis = np.zeros((max_out, n))
    di2s = np.diag(kernel).copy()

    while len(order) < max_out and len(remaining):
        if window is not None and order: di2s = _conditional_gains(kernel, order[max(len(order) - window, 0):] if window > 0 else [])
        best = _best(di2s, ids, remaining)
        if di2s[best] < DPP_EPS: break
        order.append(best); gains.append(math.log(di2s[best]))
        remaining = remaining[remaining != best]

        # Update the factor
        if window is None and len(order) < max_out:
            k = len(order) - 1
            eis = (kernel[best, :] - cis[:k, best] @ cis[:k, :]) / math.sqrt(di2s[best])
            cis[k, :] = eis
            di2s = di2s - eis * eis
    return order, gains


def dpp_rerank(candidates: Sequence[ScoredCandidate], similarity: np.ndarray, window: Optional[int] = None,
               max_out: Optional[int] = None) -> List[ScoredCandidate]:
    """
    Reorder candidates by greedy DPP selection; items whose gain vanishes go
    last in score order, each moved back just far enough that it never sits
    next to an identical item. The log gain is recorded as the diversity.
    """
    if not candidates: return []
    ids = [c.item_id for c in candidates]
    kernel = dpp_kernel([c.score for c in candidates], similarity)
    order, gains = greedy_map(kernel, ids, max_out, window)
    for k, gain in zip(order, gains): candidates[k].diversity = gain

    # Zero-gain tail
    chosen = set(order)
    rest = sorted((k for k in range(len(candidates)) if k not in chosen), key=lambda k: (-candidates[k].score, ids[k]))
    if max_out is not None: rest = rest[:max(0, max_out - len(order))]
    placed = list(order)
    for k in rest:
        candidates[k].diversity = math.log(DPP_EPS)
        placed.insert(_apart_slot(placed, k, similarity), k)
    return [candidates[k] for k in placed]


def _apart_slot(placed: Sequence[int], k: int, similarity: np.ndarray) -> int:
    """
    Latest insertion point for `k` with no identical neighbor; the end when there is none
    """
    if not placed or similarity[k, placed[-1]] < DUPLICATE_SIMILARITY: return len(placed)
    for at in range(len(placed) - 1, -1, -1):
        if similarity[k, placed[at]] >= DUPLICATE_SIMILARITY: continue
        if at == 0 or similarity[k, placed[at - 1]] < DUPLICATE_SIMILARITY: return at
    return len(placed)


# ---------------------------------------------------------------------------- hard scattering

def _greedy_scatter(candidates: Sequence[ScoredCandidate], need_tax: int, need_clu: int) -> Tuple[List[ScoredCandidate], int]:
    remaining = list(candidates)
    last_tax, last_clu = {}, {}
    out: List[ScoredCandidate] = []
    violations = 0
    while remaining:
        p = len(out)
        pick = None
        for k, c in enumerate(remaining):
            if p - last_tax.get(c.taxonomy, -need_tax) >= need_tax and p - last_clu.get(c.cluster_id, -need_clu) >= need_clu:
                pick = k
                break

        # Relaxation
        if pick is None: pick, violations = 0, violations + 1
        chosen = remaining.pop(pick)
        last_tax[chosen.taxonomy], last_clu[chosen.cluster_id] = p, p
        out.append(chosen)
    return out, violations


def _scatter_search(candidates: Sequence[ScoredCandidate], need_tax: int, need_clu: int,
                    budget: int) -> Optional[List[int]]:
    """
    Depth-first search for the first gap-feasible order, trying candidates in
    their given order at every position. Returns candidate indices, or None
    when no order exists or the node budget runs out.
    """
    n = len(candidates)
    keys = [("taxonomy", need_tax), ("cluster_id", need_clu)]
    remaining = [Counter(getattr(c, key) for c in candidates) for key, _ in keys]
    last: List[Dict] = [{}, {}]
    used = [False] * n
    order: List[int] = []
    nodes = 0

    def reachable(p: int) -> bool:
        # Copies whose earliest legal slot is t or later must fit in the slots from t on
        rest = n - p
        for counts, seen, (_, need) in zip(remaining, last, keys):
            earliest = [0] * rest
            for value, count in counts.items():
                start = max(0, seen.get(value, -need) + need - p)
                for j in range(count):
                    if start + j * need >= rest: return False
                    earliest[start + j * need] += 1
            waiting = 0
            for t in range(rest - 1, -1, -1):
                waiting += earliest[t]
                if waiting > rest - t: return False
        return True

    def place(p: int) -> bool:
        nonlocal nodes
        if p == n: return True
        tried = set()
        for k in range(n):
            if used[k]: continue
            values = tuple(getattr(candidates[k], key) for key, _ in keys)

            # Candidates sharing both keys lead to the same subtree
            if values in tried: continue
            if any(p - seen.get(v, -need) < need for v, seen, (_, need) in zip(values, last, keys)): continue
            tried.add(values)
            nodes += 1
            if nodes > budget: return False
            saved = [seen.get(v) for v, seen in zip(values, last)]
            used[k] = True
            order.append(k)
            for v, seen, counts in zip(values, last, remaining):
                seen[v] = p
                counts[v] -= 1
            if reachable(p + 1) and place(p + 1): return True
            used[k] = False
            order.pop()
            for v, seen, counts, old in zip(values, last, remaining, saved):
                counts[v] += 1
                if old is None: del seen[v]
                else: seen[v] = old
            if nodes > budget: return False
        return False

    if not reachable(0) or not place(0): return None
    return order


def hard_scatter(candidates: Sequence[ScoredCandidate], taxonomy_gap: int = TAXONOMY_GAP, cluster_gap: int = CLUSTER_GAP,
                 gap_semantics: str = "difference", search_nodes: int = SCATTER_SEARCH_NODES) -> Tuple[List[ScoredCandidate], int]:
    """
    Greedy pass first: place the earliest candidate whose taxonomy and cluster
    last appeared far enough back. If that pass gets stuck, a bounded search
    looks for a feasible order that stays as close to the input order as
    possible. When none is found the greedy result stands; each stuck step
    placed the earliest deferred candidate anyway and counts as a violation.
    """
    if taxonomy_gap < 1 or cluster_gap < 1: raise ValueError("gaps must be >= 1")
    if gap_semantics not in ("difference", "between"): raise ValueError(f"unknown gap semantics {gap_semantics}")
    extra = 1 if gap_semantics == "between" else 0
    need_tax, need_clu = taxonomy_gap + extra, cluster_gap + extra

    out, violations = _greedy_scatter(candidates, need_tax, need_clu)
    if violations == 0 or search_nodes <= 0: return out, violations
    order = _scatter_search(candidates, need_tax, need_clu, search_nodes)
    if order is None: return out, violations
    return [candidates[k] for k in order], 0


# ---------------------------------------------------------------------------- clustering

def kmeans_clusters(vectors: np.ndarray, k: int, seed: int, iters: int = KMEANS_ITERS) -> np.ndarray:
    """
    Lloyd's k-means from a seeded k-means++ start; returns one cluster id per row
    """
    vectors = np.asarray(vectors, dtype=float)
    n = vectors.shape[0]
    if k < 1: raise ValueError("k must be >= 1")
    if k > n: raise ValueError(f"k={k} exceeds item count {n}")
    rng = np.random.default_rng([seed, 61])

    # k-means++ seeding
    chosen = [int(rng.integers(n))]
    closest = np.sum((vectors - vectors[chosen[0]]) ** 2, axis=1)
    while len(chosen) < k:
        total = closest.sum()
        if total > 0: pick = int(rng.choice(n, p=closest / total))
        else: pick = int(rng.choice(np.setdiff1d(np.arange(n), chosen)))
        chosen.append(pick)
        closest = np.minimum(closest, np.sum((vectors - vectors[pick]) ** 2, axis=1))
    centers = vectors[chosen].copy()

    # Lloyd iterations
    labels = np.full(n, -1, dtype=np.int64)
    for _ in range(iters):
        distances = np.sum(vectors * vectors, axis=1)[:, None] - 2.0 * vectors @ centers.T + np.sum(centers * centers, axis=1)[None, :]
        fresh = np.argmin(distances, axis=1)
        if np.array_equal(fresh, labels): break
        labels = fresh
        for c in range(k):
            members = labels == c
            if members.any(): centers[c] = vectors[members].mean(axis=0)
    return labels


# ---------------------------------------------------------------------------- exploration

def exploration_slots(slate_size: int, epsilon: float) -> int:
    if not 0.0 <= epsilon <= 1.0: raise ValueError("epsilon must be in [0, 1]")
    slots = int(math.floor(epsilon * slate_size + 0.5))
    if epsilon > 0.0 and slate_size >= 10: slots = max(slots, 1)
    return min(slots, slate_size)


def inject_exploration(slate: Sequence[ScoredCandidate], pool: Sequence[ScoredCandidate], epsilon: float,
                       seed) -> Tuple[List[ScoredCandidate], int]:
    """
    Replace slots in the lower half of the slate by pool items not already
    shown. Returns the slate and a warning count (1 when the pool had nothing to offer).
    """
    if not slate: raise ValueError("slate must be non-empty")
    slots = exploration_slots(len(slate), epsilon)
    out = list(slate)
    if slots == 0: return out, 0

    # Fresh pool items
    present = {c.item_id for c in slate}
    fresh = sorted((c for c in pool if c.item_id not in present), key=lambda c: c.item_id)
    fresh = list({c.item_id: c for c in fresh}.values())
    if not fresh:
        logger.warning("exploration pool has no items outside the slate")
        return out, 1

    # Draw items and lower-half positions
    rng = np.random.default_rng(seed)
    slots = min(slots, len(fresh), len(slate) - len(slate) // 2)
    picks = rng.choice(len(fresh), size=slots, replace=False)
    positions = rng.choice(np.arange(len(slate) // 2, len(slate)), size=slots, replace=False)
    for position, pick in zip(sorted(positions), picks):
        chosen = fresh[int(pick)]
        chosen.channel_id = EXPLORATION_CHANNEL
        out[int(position)] = chosen
    return out, 0
