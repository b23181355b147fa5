"""Federated evaluation: every client scores its own test items, results are averaged."""

from __future__ import annotations

import numpy as np

from .data import EvalSet, FederatedData
from .federation import Model, item_vectors, rank_items, user_posteriors
from .metrics import EvalResult, auc, average_clients, ndcg_at_k, precision_recall_at_k
from .privacy import DpParams


def client_metrics(
    scores: np.ndarray,
    candidates: np.ndarray,
    relevant: np.ndarray,
    exclude: np.ndarray,
    seen: np.ndarray,
    k: int,
    auc_negatives: int | None,
    rng: np.random.Generator,
) -> dict[str, float]:
    """Metrics for one client from its scores over ``candidates``.

    ``auc_negatives=None`` compares against every unseen candidate instead of
    sampling ``auc_negatives`` per test positive.
    """
    ranked = rank_items(scores, candidates, k, exclude)
    p, r = precision_recall_at_k(ranked, relevant, k)
    row = {"precision": p, "recall": r, "ndcg": ndcg_at_k(ranked, relevant, k)}

    pos_idx = np.flatnonzero(np.isin(candidates, relevant))
    neg_pool = np.flatnonzero(~np.isin(candidates, seen))
    if len(neg_pool) == 0 or len(pos_idx) == 0:
        row["auc"] = float("nan")
        return row
    if auc_negatives is None:
        neg_idx = neg_pool
    else:
        neg_idx = rng.choice(neg_pool, size=auc_negatives * len(pos_idx))
    s = np.concatenate([scores[pos_idx], scores[neg_idx]])
    labels = np.concatenate([np.ones(len(pos_idx), bool), np.zeros(len(neg_idx), bool)])
    row["auc"] = auc(s, labels)
    return row


def federated_evaluate(
    model: Model,
    data: FederatedData,
    eval_set: EvalSet,
    k: int = 10,
    auc_negatives: int | None = 100,
    seed: int = 0,
    predict_dp: DpParams | None = None,
) -> EvalResult:
    users = np.array(sorted(u for u, rel in eval_set.relevant.items() if len(rel)), dtype=np.int64)
    if len(users) == 0:
        raise ValueError("no client has test data")
    cand = eval_set.candidates
    unit_items = item_vectors(model, data, cand)
    rows = []
    chunk = 256
    for start in range(0, len(users), chunk):
        block = users[start : start + chunk]
        noise_rng = np.random.default_rng([seed, 0x9E, start])
        probs = user_posteriors(model, data, block, unit_items, predict_dp, noise_rng)
        for r, u in enumerate(block.tolist()):
            rows.append(
                client_metrics(
                    probs[r], cand, eval_set.relevant[u], eval_set.exclude[u], eval_set.seen[u],
                    k, auc_negatives, np.random.default_rng([seed, u]),
                )
            )
    per_client = average_clients(rows)
    auc_ok = ~np.isnan(per_client["auc"])
    result = EvalResult(per_client, users, k, auc_negatives or 0)
    result.means["auc"] = float(np.mean(per_client["auc"][auc_ok])) if auc_ok.any() else float("nan")
    return result


def make_evaluator(data: FederatedData, eval_set: EvalSet, **kwargs):
    def _evaluate(model: Model) -> dict[str, float]:
        return federated_evaluate(model, data, eval_set, **kwargs).means

    return _evaluate
