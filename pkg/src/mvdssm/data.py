"""Bundles the pieces a training run needs: views, item catalog, per-user positives."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .movielens import (
    InteractionLog,
    ItemCatalog,
    ItemTable,
    Split,
    SplitKind,
    UserTable,
    ViewDataset,
    build_item_features,
    build_view1,
)
from .svd import build_view2


@dataclass
class FederatedData:
    views: dict[int, ViewDataset]
    catalog: ItemCatalog
    positives: dict[int, np.ndarray]  # user id -> sorted training item ids
    item_pool: np.ndarray  # item ids usable as training negatives

    @property
    def users(self) -> np.ndarray:
        return np.array(sorted(self.positives), dtype=np.int64)

    def user_features(self, view: int, user: int) -> np.ndarray:
        return self.views[view].features[user - 1]

    def restrict(self, views: tuple[int, ...]) -> "FederatedData":
        return FederatedData({v: self.views[v] for v in views}, self.catalog, self.positives, self.item_pool)


@dataclass
class EvalSet:
    """Per-user test positives plus what to rank them against."""

    relevant: dict[int, np.ndarray]
    exclude: dict[int, np.ndarray]  # training items, never recommended
    candidates: np.ndarray  # item ids, ascending
    seen: dict[int, np.ndarray] = field(default_factory=dict)  # train + test, barred as AUC negatives


def _group(log: InteractionLog) -> dict[int, np.ndarray]:
    order = np.lexsort((log.items, log.users))
    users, items = log.users[order], log.items[order]
    bounds = np.flatnonzero(np.diff(users)) + 1
    out = {}
    for u_block, i_block in zip(np.split(users, bounds), np.split(items, bounds)):
        if len(u_block):
            out[int(u_block[0])] = np.unique(i_block)
    return out


def build_data(
    users: UserTable,
    items: ItemTable,
    split: Split,
    views: tuple[int, ...] = (1, 2),
    span_words: bool = True,
    svd_seed: int = 0,
    svd_dim: int = 30,
) -> FederatedData:
    n_users, n_items = len(users.ids), len(items.ids)
    built: dict[int, ViewDataset] = {}
    for v in views:
        if v == 1:
            built[1] = build_view1(users)
        elif v == 2:
            built[2] = build_view2(split.train, n_users, n_items, k=svd_dim, seed=svd_seed)
        else:
            raise ValueError(f"unknown view {v}")
    catalog = build_item_features(items, span_words=span_words)
    pool = np.setdiff1d(np.arange(1, n_items + 1), split.heldout_items)
    return FederatedData(built, catalog, _group(split.train), pool)


def build_eval_set(split: Split, n_items: int) -> EvalSet:
    relevant = _group(split.test)
    train = _group(split.train)
    if split.spec.kind in (SplitKind.CS_ITEMS, SplitKind.CS_USERS_ITEMS):
        candidates = np.sort(split.heldout_items)
    else:
        candidates = np.arange(1, n_items + 1)
    empty = np.zeros(0, dtype=np.int64)
    exclude = {u: train.get(u, empty) for u in relevant}
    seen = {u: np.union1d(exclude[u], relevant[u]) for u in relevant}
    return EvalSet(relevant, exclude, candidates, seen)
