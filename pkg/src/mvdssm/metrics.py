"""Top-K ranking metrics, AUC and their per-client (federated) averages."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import rankdata

logger = logging.getLogger(__name__)

METRICS = ("precision", "recall", "ndcg", "auc")


def precision_recall_at_k(ranked: Sequence[int], relevant: Iterable[int], k: int = 10) -> tuple[float, float]:
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(ranked) == 0:
        raise ValueError("empty ranking")
    relevant = set(relevant)
    hits = len(set(list(ranked)[:k]) & relevant)
    if not relevant:
        logger.debug("recall with no relevant items reported as 0")
        return hits / k, 0.0
    return hits / k, hits / len(relevant)


def ndcg_at_k(ranked: Sequence[int], relevant: Iterable[int], k: int = 10) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    relevant = set(relevant)
    if not relevant:
        logger.debug("ndcg with no relevant items reported as 0")
        return 0.0
    dcg = sum(1.0 / math.log2(r + 2) for r, item in enumerate(list(ranked)[:k]) if item in relevant)
    ideal = sum(1.0 / math.log2(r + 2) for r in range(min(k, len(relevant))))
    return dcg / ideal


def auc(scores, labels) -> float:
    """Mann-Whitney AUC; tied scores count one half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs at least one positive and one negative")
    ranks = rankdata(scores)  # average ranks handle ties
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


@dataclass
class EvalResult:
    """Per-client metric vectors and their means."""

    per_client: dict[str, np.ndarray]
    clients: np.ndarray
    k: int = 10
    auc_negatives: int = 100
    means: dict[str, float] = field(init=False)

    def __post_init__(self) -> None:
        self.means = {m: float(np.mean(v)) for m, v in self.per_client.items()}


def average_clients(per_client_rows: list[dict[str, float]]) -> dict[str, np.ndarray]:
    if not per_client_rows:
        raise ValueError("no client has test data")
    return {m: np.array([row[m] for row in per_client_rows]) for m in per_client_rows[0]}


@dataclass
class BuildSummary:
    mean: dict[str, float]
    std: dict[str, float | None]
    n_builds: int


def summarize_builds(results: list[dict[str, float]]) -> BuildSummary:
    """Mean and sample std (ddof=1) across model builds; std needs >= 2 builds."""
    if not results:
        raise ValueError("no builds to summarize")
    keys = list(results[0])
    mean = {k: float(np.mean([r[k] for r in results])) for k in keys}
    if len(results) < 2:
        std = {k: None for k in keys}
    else:
        std = {k: float(np.std([r[k] for r in results], ddof=1)) for k in keys}
    return BuildSummary(mean, std, len(results))
