"""Seeded synthetic interaction data with planted intent blocks.

Items are split into two blocks and each user adopts mostly from their own
block, plus a few crossover items. Within a block a user samples from a
contiguous window around a personal anchor (wrapping inside the block), so
nearby users share items and a recommender has real structure to recover.
A fixed share of every user's items is held out for testing.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .dataset import InteractionDataset, write_interactions


def planted_blocks_dataset(
    num_users: int = 200,
    num_items: int = 300,
    items_per_user: int = 30,
    holdout: float = 0.2,
    crossover: float = 0.2,
    own_window: int = 40,
    cross_window: int = 15,
    seed: int = 0,
) -> InteractionDataset:
    """Two-block dataset with windowed within-block tastes.

    ``crossover`` is the share of a user's interactions drawn from the other
    block; ``holdout`` is the share moved to the test split (at least one
    item always stays in train).
    """
    if not 0 <= holdout < 1 or not 0 <= crossover <= 1:
        raise ValueError("holdout must be in [0, 1) and crossover in [0, 1]")
    rng = np.random.default_rng(seed)
    half = num_items // 2
    block_start = [0, half]
    block_size = [half, num_items - half]

    def window_sample(block: int, width: int, count: int) -> np.ndarray:
        size = block_size[block]
        width = min(width, size)
        count = min(count, width)
        anchor = int(rng.integers(0, size))
        window = (anchor + np.arange(width)) % size + block_start[block]
        return rng.choice(window, size=count, replace=False)

    train: list[np.ndarray] = []
    test: list[np.ndarray] = []
    for user in range(num_users):
        own = user % 2
        num_cross = int(round(items_per_user * crossover))
        picked = np.concatenate(
            [
                window_sample(own, own_window, items_per_user - num_cross),
                window_sample(1 - own, cross_window, num_cross),
            ]
        )
        rng.shuffle(picked)
        num_test = min(int(round(len(picked) * holdout)), len(picked) - 1)
        test.append(np.sort(picked[:num_test]).astype(np.int64))
        train.append(np.sort(picked[num_test:]).astype(np.int64))
    return InteractionDataset(
        num_users=num_users,
        num_items=num_items,
        train=train,
        test=test,
        num_train_edges=sum(len(a) for a in train),
    )


def materialize(ds: InteractionDataset, directory: str | Path) -> Path:
    """Write the dataset as train.txt/test.txt under ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_interactions(ds.train, directory / "train.txt")
    write_interactions(ds.test, directory / "test.txt")
    return directory
