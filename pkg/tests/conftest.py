import numpy as np
import pytest
import torch

from intentcf import build_bipartite, init_params, synthetic, train_epoch
from intentcf.dataset import InteractionDataset
from intentcf.trainer import OptimizerState, TrainingConfig

torch.set_num_threads(1)


def make_dataset(
    train: dict[int, list[int]],
    test: dict[int, list[int]] | None = None,
    num_users: int | None = None,
    num_items: int | None = None,
) -> InteractionDataset:
    """Build a dataset straight from {user: items} dicts."""
    test = test or {}
    users = max(list(train) + list(test), default=-1) + 1
    if num_users is not None:
        users = max(users, num_users)
    items = max((max(v) for v in list(train.values()) + list(test.values()) if v), default=-1) + 1
    if num_items is not None:
        items = max(items, num_items)
    train_lists = [np.array(sorted(train.get(u, [])), dtype=np.int64) for u in range(users)]
    test_lists = [np.array(sorted(test.get(u, [])), dtype=np.int64) for u in range(users)]
    return InteractionDataset(
        num_users=users,
        num_items=items,
        train=train_lists,
        test=test_lists,
        num_train_edges=sum(len(a) for a in train_lists),
    )


def random_dataset(
    rng: np.random.Generator,
    max_users: int = 10,
    max_items: int = 10,
    with_test: bool = False,
) -> InteractionDataset:
    """Small random dataset where every user has at least one train item."""
    num_users = int(rng.integers(2, max_users + 1))
    num_items = int(rng.integers(3, max_items + 1))
    train: dict[int, list[int]] = {}
    test: dict[int, list[int]] = {}
    for u in range(num_users):
        count = int(rng.integers(1, min(4, num_items - 1) + 1))
        picked = rng.choice(num_items, size=count, replace=False).tolist()
        if with_test and len(picked) > 1:
            test[u] = [picked.pop()]
        train[u] = picked
    return make_dataset(train, test, num_users=num_users, num_items=num_items)


def train_model(ds, g, config: TrainingConfig, dtype=torch.float32):
    """Run the configured number of epochs and return (params, state)."""
    params = init_params(ds.num_users, ds.num_items, config.d, config.K, config.seed, dtype=dtype)
    state = OptimizerState.zeros(params)
    rng = np.random.default_rng(config.seed)
    for _ in range(config.epochs):
        train_epoch(ds, g, params, state, config, rng)
    return params, state


@pytest.fixture(scope="session")
def planted_ds():
    return synthetic.planted_blocks_dataset(seed=7)


@pytest.fixture(scope="session")
def planted_graph(planted_ds):
    return build_bipartite(planted_ds)


@pytest.fixture(scope="session")
def trained_intent_model(planted_ds, planted_graph):
    """A converged 4-intent model used by the probe and export tests."""
    config = TrainingConfig(
        K=4, L=1, T=2, d=16, lr=0.005, l2=1e-4, cor_weight=1.0,
        batch_size=1024, epochs=40, seed=7,
    )
    params, _ = train_model(planted_ds, planted_graph, config)
    return config, params
