import math
from collections import Counter

import numpy as np
import pytest

from deskrec.config import CLUSTER_GAP, TAXONOMY_GAP
from deskrec.domain import ScoredCandidate
from deskrec.rerank import (DPP_EPS, EXPLORATION_CHANNEL, cosine_matrix, dpp_kernel, dpp_rerank, exploration_slots,
                            greedy_map, hard_scatter, inject_exploration, kmeans_clusters, mmr_order, mmr_rerank)


def _candidates(scores, taxonomies=None, clusters=None):
    taxonomies = taxonomies or [0] * len(scores)
    clusters = clusters or list(range(len(scores)))
    return [ScoredCandidate(k + 1, s, taxonomy=t, cluster_id=c) for k, (s, t, c) in enumerate(zip(scores, taxonomies, clusters))]


def _block_similarity(n, duplicates):
    sim = np.eye(n)
    for i, j in duplicates: sim[i, j] = sim[j, i] = 1.0
    return sim


# ---------------------------------------------------------------------------- MMR

def test_mmr_penalizes_duplicates():
    candidates = _candidates([0.9, 0.8, 0.5])
    out = mmr_rerank(candidates, _block_similarity(3, [(0, 1)]), theta=0.5)
    assert [c.score for c in out] == [0.9, 0.5, 0.8]
    assert [c.diversity for c in out] == [0.0, 0.0, -0.5]


def test_mmr_without_penalty_is_score_order():
    sim = np.ones((4, 4))
    scores = [0.2, 0.9, 0.4, 0.7]
    assert [c.score for c in mmr_rerank(_candidates(scores), sim, theta=0.0)] == [0.9, 0.7, 0.4, 0.2]
    assert [c.score for c in mmr_rerank(_candidates(scores), sim, theta=1.0, window=0)] == [0.9, 0.7, 0.4, 0.2]


def test_mmr_window_only_looks_back_so_far():
    sim = _block_similarity(4, [(0, 1)])
    scores = [0.9, 0.8, 0.7, 0.65]
    assert [c.score for c in mmr_rerank(_candidates(scores), sim, theta=0.5)] == [0.9, 0.7, 0.65, 0.8]
    assert [c.score for c in mmr_rerank(_candidates(scores), sim, theta=0.5, window=1)] == [0.9, 0.7, 0.8, 0.65]


def test_mmr_seeded_and_limited():
    sim = _block_similarity(3, [(0, 1)])
    order, _ = mmr_order([0.9, 0.8, 0.5], sim, [1, 2, 3], 0.5, None, selected=[0])
    assert order == [2, 1]
    assert mmr_order([0.9, 0.8, 0.5], sim, [1, 2, 3], 0.5, None, limit=1)[0] == [0]
    with pytest.raises(ValueError):
        mmr_order([0.9], np.eye(1), [1], -0.1, None)


def test_mmr_ties_go_to_lower_id():
    candidates = [ScoredCandidate(9, 0.5), ScoredCandidate(4, 0.5)]
    assert [c.item_id for c in mmr_rerank(candidates, np.eye(2), theta=0.5)] == [4, 9]
    assert mmr_rerank([], np.eye(0), theta=0.5) == []


def test_cosine_matrix():
    sim = cosine_matrix(np.array([[1.0, 0.0], [2.0, 0.0], [0.0, 0.0], [-1.0, 0.0]]))
    assert sim[0, 1] == pytest.approx(1.0)
    assert sim[0, 3] == pytest.approx(-1.0)
    assert sim[2, 0] == 0.0 and sim[2, 2] == 1.0


# ---------------------------------------------------------------------------- DPP

def _psd_kernel(seed, n=None, rank=None):
    rng = np.random.default_rng(seed)
    n = n or int(rng.integers(1, 9))
    rank = rank or int(rng.integers(1, n + 1))
    factors = rng.normal(size=(n, rank))
    return factors @ factors.T + 0.1 * np.eye(n)


@pytest.mark.parametrize("seed", range(100))
def test_greedy_map_gains_are_prefix_log_dets(seed):
    kernel = _psd_kernel(seed)
    order, gains = greedy_map(kernel, range(len(kernel)))
    assert sorted(order) == list(range(len(kernel)))
    for k in range(1, len(order) + 1):
        _, logdet = np.linalg.slogdet(kernel[np.ix_(order[:k], order[:k])])
        assert sum(gains[:k]) == pytest.approx(logdet, abs=1e-8)


@pytest.mark.parametrize("seed", range(100))
def test_greedy_map_picks_best_determinant(seed):
    kernel = _psd_kernel(seed)
    order, _ = greedy_map(kernel, range(len(kernel)))

    def logdet(subset):
        return np.linalg.slogdet(kernel[np.ix_(subset, subset)])[1]

    for k in range(len(order)):
        prefix = order[:k]
        best = max(logdet(prefix + [j]) for j in range(len(kernel)) if j not in prefix)
        assert logdet(prefix + [order[k]]) == pytest.approx(best, abs=1e-9)


def test_windowed_map_matches_full_with_long_window():
    kernel = _psd_kernel(9, n=7, rank=4)
    assert greedy_map(kernel, range(7), window=10)[0] == greedy_map(kernel, range(7))[0]


@pytest.mark.parametrize("seed", range(100))
def test_dpp_never_puts_identical_items_side_by_side(seed):
    rng = np.random.default_rng([seed, 5])
    n = int(rng.integers(3, 9))
    vectors = rng.random((n - 1, n + 2))
    twin = int(rng.integers(n - 1))
    vectors = np.vstack([vectors, vectors[twin]])
    out = dpp_rerank(_candidates(list(rng.random(n))), cosine_matrix(vectors))
    position = {c.item_id: p for p, c in enumerate(out)}
    assert sorted(position) == list(range(1, n + 1))
    assert abs(position[twin + 1] - position[n]) > 1


def test_dpp_moves_a_copy_away_from_its_twin():
    # The copy of the lowest-quality pick would otherwise follow it directly
    candidates = _candidates([1.0, 0.9, 0.1, 0.05])
    sim = cosine_matrix(np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [0.0, 0.0, 1.0]]))
    out = dpp_rerank(candidates, sim)
    assert [c.item_id for c in out] == [1, 4, 2, 3]
    assert out[1].diversity == pytest.approx(math.log(DPP_EPS))


def test_dpp_puts_vanishing_gains_last():
    candidates = _candidates([1.0, 0.9, 0.5])
    sim = cosine_matrix(np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]]))
    out = dpp_rerank(candidates, sim)
    assert [c.item_id for c in out] == [1, 3, 2]
    assert out[0].diversity == pytest.approx(2.0)
    assert out[-1].diversity == pytest.approx(math.log(DPP_EPS))
    assert [c.item_id for c in dpp_rerank(_candidates([1.0, 0.9, 0.5]), sim, max_out=2)] == [1, 3]


def test_dpp_kernel():
    kernel = dpp_kernel([0.0, math.log(2.0)], np.array([[1.0, -0.5], [-0.5, 1.0]]))
    np.testing.assert_allclose(kernel, [[1.0, 0.0], [0.0, 4.0]])
    with pytest.raises(ValueError):
        greedy_map(np.array([[np.nan]]), [1])


# ---------------------------------------------------------------------------- hard scattering

def test_hard_scatter_spreads_taxonomies():
    out, violations = hard_scatter(_candidates([0.9, 0.8, 0.7, 0.6], taxonomies=[1, 1, 2, 3]), taxonomy_gap=3, cluster_gap=1)
    assert [c.taxonomy for c in out] == [1, 2, 3, 1]
    assert violations == 0


def test_hard_scatter_relaxes_when_infeasible():
    out, violations = hard_scatter(_candidates([0.9, 0.8], taxonomies=[1, 1]), taxonomy_gap=2, cluster_gap=1)
    assert [c.item_id for c in out] == [1, 2]
    assert violations == 1


def test_hard_scatter_between_semantics():
    candidates = _candidates([0.9, 0.8, 0.7, 0.6], taxonomies=[1, 1, 2, 3])
    out, violations = hard_scatter(candidates, taxonomy_gap=2, cluster_gap=1, gap_semantics="between")
    assert [c.taxonomy for c in out] == [1, 2, 3, 1]
    assert violations == 0


def _assert_gaps(out, taxonomy_gap, cluster_gap):
    for gap, key in ((taxonomy_gap, "taxonomy"), (cluster_gap, "cluster_id")):
        last = {}
        for p, c in enumerate(out):
            value = getattr(c, key)
            if value in last: assert p - last[value] >= gap
            last[value] = p


def _shuffled_feasible_slate(rng, size=10, taxonomies=8, clusters=12):
    """
    A slate that has a gap-feasible order under the default gaps, with at
    least six taxonomies, handed over in a random score order
    """
    while True:
        tax, clu = [], []
        for _ in range(size):
            tax.append(int(rng.choice([t for t in range(taxonomies) if t not in tax[-(TAXONOMY_GAP - 1):]])))
            clu.append(int(rng.choice([c for c in range(clusters) if c not in clu[-(CLUSTER_GAP - 1):]])))
        if len(set(tax)) >= 6: break
    order = rng.permutation(size)
    return _candidates([1.0 - k / size for k in range(size)], [tax[k] for k in order], [clu[k] for k in order])


@pytest.mark.parametrize("block", range(10))
def test_hard_scatter_meets_every_gap_on_feasible_slates(block):
    rng = np.random.default_rng([block, 17])
    for _ in range(100):
        candidates = _shuffled_feasible_slate(rng)
        out, violations = hard_scatter(candidates)
        assert violations == 0
        assert Counter(c.item_id for c in out) == Counter(c.item_id for c in candidates)
        _assert_gaps(out, TAXONOMY_GAP, CLUSTER_GAP)


def test_hard_scatter_searches_when_greedy_gets_stuck():
    # Greedy places E F A B C D and then has only recent taxonomies left
    candidates = _candidates([1.0 - k / 10 for k in range(10)], taxonomies=[5, 6, 1, 2, 3, 4, 1, 2, 3, 4])
    out, violations = hard_scatter(candidates, taxonomy_gap=5, cluster_gap=1)
    assert violations == 0
    _assert_gaps(out, 5, 1)
    assert [c.taxonomy for c in out][:2] == [5, 1]
    assert hard_scatter(candidates, taxonomy_gap=5, cluster_gap=1, search_nodes=0)[1] > 0


@pytest.mark.parametrize("seed", range(20))
def test_hard_scatter_keeps_the_multiset(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(5, 40))
    candidates = _candidates(sorted(rng.random(n), reverse=True), [int(t) for t in rng.integers(0, 6, n)],
                             [int(c) for c in rng.integers(0, 8, n)])
    out, violations = hard_scatter(candidates, taxonomy_gap=3, cluster_gap=2)
    assert sorted(c.item_id for c in out) == sorted(c.item_id for c in candidates)
    if violations == 0: _assert_gaps(out, 3, 2)


def test_hard_scatter_rejects_bad_arguments():
    with pytest.raises(ValueError):
        hard_scatter([], taxonomy_gap=0)
    with pytest.raises(ValueError):
        hard_scatter([], gap_semantics="inside")


# ---------------------------------------------------------------------------- clustering

def test_kmeans_one_cluster_per_point():
    vectors = np.random.default_rng(0).normal(size=(6, 3))
    assert len(set(kmeans_clusters(vectors, 6, seed=1))) == 6
    assert set(kmeans_clusters(vectors, 1, seed=1)) == {0}


def test_kmeans_separates_blobs():
    rng = np.random.default_rng(3)
    vectors = np.vstack([rng.normal(0.0, 0.1, (20, 2)), rng.normal(10.0, 0.1, (20, 2))])
    labels = kmeans_clusters(vectors, 2, seed=5)
    assert len(set(labels[:20])) == 1 and len(set(labels[20:])) == 1 and labels[0] != labels[20]
    np.testing.assert_array_equal(labels, kmeans_clusters(vectors, 2, seed=5))


def test_kmeans_errors():
    with pytest.raises(ValueError):
        kmeans_clusters(np.zeros((3, 2)), 4, seed=0)
    with pytest.raises(ValueError):
        kmeans_clusters(np.zeros((3, 2)), 0, seed=0)


# ---------------------------------------------------------------------------- exploration

def test_exploration_slots():
    assert exploration_slots(10, 0.05) == 1
    assert exploration_slots(10, 0.0) == 0
    assert exploration_slots(4, 0.1) == 0
    assert exploration_slots(20, 0.1) == 2
    with pytest.raises(ValueError):
        exploration_slots(10, 1.5)


def test_inject_exploration_uses_lower_half():
    slate = _candidates([1.0 - k / 10 for k in range(10)])
    pool = [ScoredCandidate(100 + k) for k in range(5)] + [ScoredCandidate(3)]
    out, warnings = inject_exploration(slate, pool, 0.2, seed=4)
    assert warnings == 0 and len(out) == 10
    swapped = [p for p, c in enumerate(out) if c.channel_id == EXPLORATION_CHANNEL]
    assert len(swapped) == 2 and min(swapped) >= 5
    assert all(out[p].item_id >= 100 for p in swapped)
    assert out[:5] == slate[:5]
    assert max(Counter(c.item_id for c in out).values()) == 1


def test_inject_exploration_without_fresh_items():
    slate = _candidates([0.5] * 10)
    out, warnings = inject_exploration(slate, slate[:3], 0.2, seed=0)
    assert warnings == 1 and out == slate
    assert inject_exploration(slate, [], 0.0, seed=0) == (slate, 0)
    with pytest.raises(ValueError):
        inject_exploration([], [], 0.1, seed=0)
