"""MovieLens-100K ingestion, user views, item trigram features and splits."""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .fetch import GENRES, OCCUPATIONS

logger = logging.getLogger(__name__)

AGE_NORMALIZER = 100.0
N_GENRES = len(GENRES)
VIEW1_DIM = 2 + len(OCCUPATIONS)


class DataError(ValueError):
    """Malformed or missing MovieLens input."""


@dataclass
class InteractionLog:
    users: np.ndarray
    items: np.ndarray
    ratings: np.ndarray
    timestamps: np.ndarray

    def __len__(self) -> int:
        return len(self.users)

    def subset(self, mask: np.ndarray) -> "InteractionLog":
        return InteractionLog(self.users[mask], self.items[mask], self.ratings[mask], self.timestamps[mask])

    def pairs(self) -> set[tuple[int, int]]:
        return set(zip(self.users.tolist(), self.items.tolist()))


@dataclass
class UserTable:
    ids: np.ndarray
    ages: np.ndarray
    genders: list[str]
    occupations: list[str]
    zipcodes: list[str]
    occupation_list: tuple[str, ...] = OCCUPATIONS


@dataclass
class ItemTable:
    ids: np.ndarray
    titles: list[str]
    genres: np.ndarray  # (n_items, 19) of 0/1


@dataclass
class ViewDataset:
    view: int
    features: np.ndarray  # row r belongs to user id r + 1
    dim: int


@dataclass
class ItemCatalog:
    features: sp.csr_matrix  # row r belongs to item id r + 1
    vocab: dict[str, int]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def n_items(self) -> int:
        return self.features.shape[0]


class SplitKind(str, Enum):
    RANDOM = "random"
    CS_USERS = "cs-users"
    CS_ITEMS = "cs-items"
    CS_USERS_ITEMS = "cs-users-items"


@dataclass
class SplitSpec:
    kind: SplitKind = SplitKind.RANDOM
    holdout: float | None = None
    seed: int = 0

    def fraction(self) -> float:
        if self.holdout is not None:
            return self.holdout
        return 0.2 if self.kind is SplitKind.RANDOM else 0.1


@dataclass
class Split:
    spec: SplitSpec
    train: InteractionLog
    test: InteractionLog
    heldout_users: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    heldout_items: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def manifest(self) -> dict:
        return {
            "kind": self.spec.kind.value,
            "holdout": self.spec.fraction(),
            "seed": self.spec.seed,
            "n_train": len(self.train),
            "n_test": len(self.test),
            "heldout_users": self.heldout_users.tolist(),
            "heldout_items": self.heldout_items.tolist(),
        }

    def write_manifest(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.manifest(), indent=1, sort_keys=True) + "\n")


def _read_lines(path: Path) -> list[str]:
    if not path.is_file():
        raise DataError(f"missing MovieLens file: {path}")
    return path.read_text(encoding="latin-1").splitlines()


def _parse_int(value: str, path: Path, lineno: int) -> int:
    try:
        return int(value)
    except ValueError:
        raise DataError(f"{path.name}:{lineno}: expected integer, got {value!r}") from None


def load_raw(data_dir: str | Path) -> tuple[InteractionLog, UserTable, ItemTable]:
    """Parse ``u.data``, ``u.user`` and ``u.item`` (and ``u.occupation`` if present)."""
    root = Path(data_dir)
    paths = {name: root / name for name in ("u.data", "u.user", "u.item")}
    for p in paths.values():
        if not p.is_file():
            raise DataError(f"missing MovieLens file: {p}")

    rows = []
    path = paths["u.data"]
    for lineno, line in enumerate(_read_lines(path), 1):
        parts = line.split("\t")
        if len(parts) != 4:
            raise DataError(f"{path.name}:{lineno}: expected 4 tab-separated fields, got {len(parts)}")
        rows.append([_parse_int(v, path, lineno) for v in parts])
    arr = np.array(rows, dtype=np.int64).reshape(-1, 4)
    log = InteractionLog(arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3])

    occ_path = root / "u.occupation"
    occupation_list = (
        tuple(x.strip() for x in _read_lines(occ_path) if x.strip()) if occ_path.is_file() else OCCUPATIONS
    )
    path = paths["u.user"]
    ids, ages, genders, occs, zips = [], [], [], [], []
    for lineno, line in enumerate(_read_lines(path), 1):
        parts = line.split("|")
        if len(parts) != 5:
            raise DataError(f"{path.name}:{lineno}: expected 5 '|'-separated fields, got {len(parts)}")
        ids.append(_parse_int(parts[0], path, lineno))
        ages.append(_parse_int(parts[1], path, lineno))
        genders.append(parts[2])
        occs.append(parts[3])
        zips.append(parts[4])
    users = UserTable(np.array(ids), np.array(ages, dtype=np.float64), genders, occs, zips, occupation_list)

    path = paths["u.item"]
    ids, titles, genres = [], [], []
    for lineno, line in enumerate(_read_lines(path), 1):
        parts = line.split("|")
        if len(parts) != 5 + N_GENRES:
            raise DataError(
                f"{path.name}:{lineno}: expected {5 + N_GENRES} '|'-separated fields, got {len(parts)}"
            )
        ids.append(_parse_int(parts[0], path, lineno))
        titles.append(parts[1])
        genres.append([_parse_int(v, path, lineno) for v in parts[5:]])
    items = ItemTable(np.array(ids), titles, np.array(genres, dtype=np.int8))

    for name, table_ids in (("u.user", users.ids), ("u.item", items.ids)):
        if not np.array_equal(table_ids, np.arange(1, len(table_ids) + 1)):
            raise DataError(f"{name}: ids must run 1..n in order")
    if log.users.min() < 1 or log.users.max() > len(users.ids):
        raise DataError("u.data references unknown users")
    if log.items.min() < 1 or log.items.max() > len(items.ids):
        raise DataError("u.data references unknown items")
    logger.info("loaded %d interactions, %d users, %d items", len(log), len(users.ids), len(items.ids))
    return log, users, items


def build_view1(users: UserTable) -> ViewDataset:
    """Age / 100, gender bit (M=1), occupation one-hot: 23 dims."""
    occ_index = {o: i for i, o in enumerate(users.occupation_list)}
    dim = 2 + len(occ_index)
    feats = np.zeros((len(users.ids), dim))
    for r, (age, gender, occ) in enumerate(zip(users.ages, users.genders, users.occupations)):
        if occ not in occ_index:
            raise DataError(f"unknown occupation {occ!r} for user {users.ids[r]}")
        feats[r, 0] = age / AGE_NORMALIZER
        feats[r, 1] = 1.0 if gender == "M" else 0.0
        feats[r, 2 + occ_index[occ]] = 1.0
    return ViewDataset(1, feats, dim)


_YEAR = re.compile(r"\s*\(\d{4}\)\s*$")


def normalize_title(title: str) -> str:
    return _YEAR.sub("", title).lower().strip()


def letter_trigrams(title: str, span_words: bool = True) -> list[str]:
    """Letter trigrams of a normalized title with '#' word boundaries."""
    words = title.split()
    if not words:
        return []
    chunks = ["#" + "#".join(words) + "#"] if span_words else ["#" + w + "#" for w in words]
    grams: list[str] = []
    for chunk in chunks:
        grams.extend(chunk[i : i + 3] for i in range(len(chunk) - 2))
    return grams


def build_item_features(items: ItemTable, span_words: bool = True) -> ItemCatalog:
    """Trigram multi-hot of the title concatenated with the 19 genre bits."""
    grams_per_item = [sorted(set(letter_trigrams(normalize_title(t), span_words))) for t in items.titles]
    vocab: dict[str, int] = {}
    for grams in grams_per_item:
        for g in grams:
            vocab.setdefault(g, len(vocab))
    # sorted vocabulary keeps indices independent of item order
    vocab = {g: i for i, g in enumerate(sorted(vocab))}
    n_tri = len(vocab)
    rows, cols = [], []
    for r, grams in enumerate(grams_per_item):
        for g in grams:
            rows.append(r)
            cols.append(vocab[g])
        for gi in np.flatnonzero(items.genres[r]):
            rows.append(r)
            cols.append(n_tri + int(gi))
    data = np.ones(len(rows))
    mat = sp.csr_matrix((data, (rows, cols)), shape=(len(items.ids), n_tri + N_GENRES))
    mat.sort_indices()
    empty = np.flatnonzero(np.diff(mat.indptr) == 0)
    if len(empty):
        logger.warning("%d items have no features: %s", len(empty), (empty + 1).tolist())
    return ItemCatalog(mat, vocab)


def make_split(log: InteractionLog, spec: SplitSpec, n_users: int | None = None, n_items: int | None = None) -> Split:
    rng = np.random.default_rng(spec.seed)
    frac = spec.fraction()
    if not 0.0 < frac < 1.0:
        raise DataError(f"holdout fraction must be in (0, 1), got {frac}")
    users = np.arange(1, (n_users or int(log.users.max())) + 1)
    items = np.arange(1, (n_items or int(log.items.max())) + 1)
    no_ids = np.zeros(0, dtype=np.int64)

    if spec.kind is SplitKind.RANDOM:
        order = rng.permutation(len(log))
        n_train = int(round((1.0 - frac) * len(log)))
        train_mask = np.zeros(len(log), dtype=bool)
        train_mask[order[:n_train]] = True
        split = Split(spec, log.subset(train_mask), log.subset(~train_mask), no_ids, no_ids)
    else:
        held_u = no_ids
        held_i = no_ids
        if spec.kind in (SplitKind.CS_USERS, SplitKind.CS_USERS_ITEMS):
            held_u = np.sort(rng.choice(users, size=int(np.floor(frac * len(users))), replace=False))
        if spec.kind in (SplitKind.CS_ITEMS, SplitKind.CS_USERS_ITEMS):
            held_i = np.sort(rng.choice(items, size=int(np.floor(frac * len(items))), replace=False))
        in_u = np.isin(log.users, held_u)
        in_i = np.isin(log.items, held_i)
        train_mask = ~in_u & ~in_i
        if spec.kind is SplitKind.CS_USERS:
            test_mask = in_u
        elif spec.kind is SplitKind.CS_ITEMS:
            test_mask = in_i
        else:
            # only pairs that are cold on both sides; mixed pairs are discarded
            test_mask = in_u & in_i
        split = Split(spec, log.subset(train_mask), log.subset(test_mask), held_u, held_i)

    if len(split.train) == 0:
        raise DataError("holdout leaves an empty training set")
    return split
