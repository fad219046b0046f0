"""Interaction data: file parsing, train/test splits, and triplet sampling.

The on-disk format is one user per line, whitespace-separated non-negative
integers: the first token is the user ID, the remaining tokens are item IDs.
A line with a user ID and no items contributes an empty list.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, SamplingError

log = logging.getLogger(__name__)


@dataclass
class InteractionDataset:
    """Immutable-by-convention container for a loaded train/test split.

    ``train`` and ``test`` hold one sorted, duplicate-free int64 array of
    item IDs per user index. Users that appear only in one file still get
    an entry (possibly empty) in both lists.
    """

    num_users: int
    num_items: int
    train: list[np.ndarray]
    test: list[np.ndarray]
    num_train_edges: int

    def __post_init__(self) -> None:
        if len(self.train) != self.num_users or len(self.test) != self.num_users:
            raise DataError("per-user lists do not match num_users")
        if self.num_train_edges != sum(len(a) for a in self.train):
            raise DataError("num_train_edges does not match the train lists")

    @cached_property
    def train_sets(self) -> list[frozenset]:
        """Per-user membership sets, built once for O(1) rejection checks."""
        return [frozenset(a.tolist()) for a in self.train]

    @cached_property
    def users_with_train(self) -> np.ndarray:
        return np.flatnonzero(np.array([len(a) for a in self.train]) > 0)

    @property
    def num_test_edges(self) -> int:
        return sum(len(a) for a in self.test)

    @property
    def num_interactions(self) -> int:
        return self.num_train_edges + self.num_test_edges

    @property
    def density(self) -> float:
        cells = self.num_users * self.num_items
        return self.num_interactions / cells if cells else 0.0

    def stats_csv_line(self) -> str:
        """One CSV line of headline stats: users, items, interactions, density."""
        return f"{self.num_users},{self.num_items},{self.num_interactions},{self.density:.5f}"


@dataclass
class TripletBatch:
    """A batch of (user, positive item, negative item) training triplets."""

    users: np.ndarray
    pos_items: np.ndarray
    neg_items: np.ndarray

    def __len__(self) -> int:
        return len(self.users)

    def __iter__(self):
        return zip(self.users.tolist(), self.pos_items.tolist(), self.neg_items.tolist())


def _parse_interaction_file(path: str | Path) -> tuple[dict[int, set[int]], int, int, int]:
    """Parse one interaction file into {user: item set}.

    Returns the mapping, the max user ID, the max item ID (-1 if none), and
    the number of duplicate (user, item) pairs that were dropped.
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc

    per_user: dict[int, set[int]] = {}
    max_user = -1
    max_item = -1
    duplicates = 0
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        values = []
        for token in line.split():
            try:
                value = int(token)
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-integer token {token!r}") from None
            if value < 0:
                raise DataError(f"{path}:{lineno}: negative ID {value}")
            values.append(value)
        user, items = values[0], values[1:]
        max_user = max(max_user, user)
        bucket = per_user.setdefault(user, set())
        for item in items:
            if item in bucket:
                duplicates += 1
            else:
                bucket.add(item)
                max_item = max(max_item, item)
    return per_user, max_user, max_item, duplicates


def _to_lists(per_user: dict[int, set[int]], num_users: int) -> list[np.ndarray]:
    empty = np.empty(0, dtype=np.int64)
    return [
        np.array(sorted(per_user[u]), dtype=np.int64) if u in per_user else empty
        for u in range(num_users)
    ]


def load_interactions(train_path: str | Path, test_path: str | Path) -> InteractionDataset:
    """Load a train/test split from two interaction files.

    User and item universes are the union over both files: ``num_users`` is
    the max user ID + 1 and ``num_items`` the max item ID + 1. Duplicate
    (user, item) pairs within a file are dropped with a warning count.
    """
    train_map, train_mu, train_mi, train_dups = _parse_interaction_file(train_path)
    test_map, test_mu, test_mi, test_dups = _parse_interaction_file(test_path)
    if train_dups or test_dups:
        log.warning(
            "dropped duplicate interactions: %d in %s, %d in %s",
            train_dups, train_path, test_dups, test_path,
        )
    num_users = max(train_mu, test_mu) + 1
    num_items = max(train_mi, test_mi) + 1
    train = _to_lists(train_map, num_users)
    test = _to_lists(test_map, num_users)
    for name, lists in (("train", train), ("test", test)):
        for u, items in enumerate(lists):
            if len(items) and items[-1] >= num_items:
                raise DataError(f"{name} item ID {items[-1]} out of range for user {u}")
    return InteractionDataset(
        num_users=num_users,
        num_items=num_items,
        train=train,
        test=test,
        num_train_edges=sum(len(a) for a in train),
    )


def write_interactions(per_user_items: list[np.ndarray], path: str | Path) -> None:
    """Write per-user item lists back to the line-oriented format."""
    lines = []
    for user, items in enumerate(per_user_items):
        tokens = [str(user)] + [str(int(i)) for i in items]
        lines.append(" ".join(tokens))
    Path(path).write_text("\n".join(lines) + "\n")


def sample_triplets(
    ds: InteractionDataset, batch_size: int, rng: np.random.Generator
) -> TripletBatch:
    """Draw a negative-sampled triplet batch.

    Users are drawn uniformly from users with at least one train item,
    positives uniformly from the user's train list, and negatives uniformly
    over the items outside it (rejection sampling). The same generator state
    always yields the same batch.
    """
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    eligible = ds.users_with_train
    if eligible.size == 0:
        raise SamplingError("no users with train interactions")
    users = eligible[rng.integers(0, eligible.size, size=batch_size)]
    pos = np.empty(batch_size, dtype=np.int64)
    neg = np.empty(batch_size, dtype=np.int64)
    for row, user in enumerate(users.tolist()):
        items = ds.train[user]
        pos[row] = items[rng.integers(0, items.size)]
        seen = ds.train_sets[user]
        if len(seen) >= ds.num_items:
            raise SamplingError(
                f"user {user} interacted with all {ds.num_items} items; cannot sample a negative"
            )
        while True:
            candidate = int(rng.integers(0, ds.num_items))
            if candidate not in seen:
                neg[row] = candidate
                break
    return TripletBatch(users=users.astype(np.int64), pos_items=pos, neg_items=neg)
