import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mvdssm.evaluation import client_metrics
from mvdssm.metrics import (
    EvalResult,
    auc,
    average_clients,
    ndcg_at_k,
    precision_recall_at_k,
    summarize_builds,
)


def brute_pr(ranked, relevant, k):
    hits = sum(1 for item in ranked[:k] if item in relevant)
    return hits / k, (hits / len(relevant) if relevant else 0.0)


def brute_ndcg(ranked, relevant, k):
    if not relevant:
        return 0.0

    def dcg(order):
        return sum((order[r] in relevant) / math.log2(r + 2) for r in range(min(k, len(order))))

    # best achievable DCG over every reordering of the items (small k keeps this tiny)
    pool = sorted(relevant)[:k] + [x for x in ranked if x not in relevant][:k]
    ideal = max(dcg(list(p)) for p in itertools.permutations(pool, min(k, len(pool))))
    return dcg(ranked) / ideal


def brute_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    total = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return total / (len(pos) * len(neg))


def test_precision_recall_examples():
    ranked = list(range(20))
    assert precision_recall_at_k(ranked, range(10), 10) == (1.0, 1.0)
    assert precision_recall_at_k(ranked, range(25), 10) == (1.0, 10 / 25)
    assert precision_recall_at_k(ranked, [100, 101], 10) == (0.0, 0.0)
    assert precision_recall_at_k(ranked, [], 10) == (0.0, 0.0)
    with pytest.raises(ValueError):
        precision_recall_at_k([], [1])
    with pytest.raises(ValueError):
        precision_recall_at_k(ranked, [1], 0)


def test_ndcg_examples():
    assert ndcg_at_k([5, 1, 2], {5}) == 1.0
    assert ndcg_at_k([1, 5, 2], {5}) == pytest.approx(0.63093, abs=1e-5)
    assert ndcg_at_k([1, 2], set()) == 0.0


def test_auc_examples():
    assert auc([0.9, 0.8, 0.1, 0.2], [1, 1, 0, 0]) == 1.0
    assert auc([0.5] * 4, [1, 0, 1, 0]) == 0.5
    with pytest.raises(ValueError):
        auc([0.1, 0.2], [1, 1])


def test_random_instances_match_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(500):
        n = 50
        ranked = rng.permutation(n).tolist()
        relevant = set(rng.choice(n, size=int(rng.integers(0, 15)), replace=False).tolist())
        k = int(rng.integers(1, 5))
        assert precision_recall_at_k(ranked, relevant, k) == pytest.approx(brute_pr(ranked, relevant, k))
        assert ndcg_at_k(ranked, relevant, k) == pytest.approx(brute_ndcg(ranked, relevant, k))
        scores = rng.integers(0, 8, 30).astype(float)  # coarse scores force ties
        labels = rng.random(30) < 0.3
        labels[0], labels[1] = True, False
        assert auc(scores, labels) == pytest.approx(brute_auc(scores, labels))


@settings(max_examples=60, deadline=None)
@given(st.permutations(list(range(30))), st.sets(st.integers(0, 29), min_size=1, max_size=12), st.integers(1, 15))
def test_hit_count_identity(ranked, relevant, k):
    p, r = precision_recall_at_k(ranked, relevant, k)
    hits = len(set(ranked[:k]) & relevant)
    assert round(p * k) == hits and round(r * len(relevant)) == hits


@settings(max_examples=60, deadline=None)
@given(st.permutations(list(range(30))), st.sets(st.integers(0, 29), min_size=1, max_size=12), st.integers(1, 15), st.randoms())
def test_ndcg_ignores_order_of_irrelevant_tail(ranked, relevant, k, rnd):
    tail_irrelevant = [i for i, item in enumerate(ranked) if i >= k and item not in relevant]
    shuffled = list(ranked)
    vals = [shuffled[i] for i in tail_irrelevant]
    rnd.shuffle(vals)
    for i, v in zip(tail_irrelevant, vals):
        shuffled[i] = v
    assert ndcg_at_k(shuffled, relevant, k) == ndcg_at_k(ranked, relevant, k)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(-40, 40), min_size=4, max_size=40), st.integers(0, 2**31))
def test_auc_invariant_under_monotone_transform(scores, seed):
    rng = np.random.default_rng(seed)
    labels = rng.random(len(scores)) < 0.5
    labels[0], labels[1] = True, False
    s = np.array(scores) / 8.0  # a coarse grid keeps the transformed values distinct in floating point
    assert auc(np.exp(s) * 3 + 1, labels) == pytest.approx(auc(s, labels))


def test_client_averaging():
    per = average_clients([{"precision": 0.2}, {"precision": 0.4}])
    assert EvalResult(per, np.array([1, 2])).means["precision"] == pytest.approx(0.3)
    one = average_clients([{"precision": 0.7, "auc": 0.9}])
    assert EvalResult(one, np.array([5])).means == {"precision": 0.7, "auc": 0.9}
    with pytest.raises(ValueError):
        average_clients([])


def test_client_metrics_excludes_training_items():
    cand = np.arange(1, 8)
    scores = np.array([0.9, 0.8, 0.7, 0.1, 0.2, 0.3, 0.05])
    row = client_metrics(scores, cand, np.array([3]), np.array([1, 2]), np.array([1, 2, 3]), 1, None, np.random.default_rng(0))
    # items 1 and 2 are training items, so item 3 tops the list
    assert row["precision"] == 1.0 and row["ndcg"] == 1.0
    assert row["auc"] == 1.0


def test_summarize_three_builds():
    means = [0.21, 0.25, 0.26]
    summary = summarize_builds([{"p": m} for m in means])
    mu = sum(means) / 3
    hand = math.sqrt(sum((m - mu) ** 2 for m in means) / 2)
    assert summary.mean["p"] == pytest.approx(mu)
    assert summary.std["p"] == pytest.approx(hand)
    assert summary.n_builds == 3
    assert summarize_builds([{"p": 0.3}]).std["p"] is None
