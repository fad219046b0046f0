"""Bipartite interaction graph and per-edge intent score tensors.

Scores live in coordinate format: one (num_edges, num_intents) tensor per
quantity, indexed by dense edge IDs. Edge IDs follow user-major order with
items ascending inside each user, so a user's edges are contiguous.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import torch

from .errors import ConfigError, DataError, NumericError
from .dataset import InteractionDataset

# Guards near-zero intent degrees when softmax mass concentrates elsewhere.
# Kept tiny so weights stay within 1e-9 of the plain 1/sqrt(D_u * D_i) form.
DEGREE_EPS = 1e-12


@dataclass
class InteractionGraph:
    """Edge list plus per-node neighbor indices over the same edge set."""

    num_users: int
    num_items: int
    user_index: torch.Tensor  # (E,) int64, source user of each edge
    item_index: torch.Tensor  # (E,) int64, target item of each edge
    user_edge_ptr: np.ndarray  # (num_users + 1,) CSR offsets into edge IDs
    item_edge_order: np.ndarray  # (E,) edge IDs grouped by item
    item_edge_ptr: np.ndarray  # (num_items + 1,)

    @property
    def num_edges(self) -> int:
        return int(self.user_index.shape[0])

    @property
    def num_nodes(self) -> int:
        return self.num_users + self.num_items

    def user_neighbors(self, user: int) -> tuple[np.ndarray, np.ndarray]:
        """Items adjacent to ``user`` and the matching edge IDs."""
        if not 0 <= user < self.num_users:
            raise DataError(f"unknown user {user}")
        lo, hi = self.user_edge_ptr[user], self.user_edge_ptr[user + 1]
        edge_ids = np.arange(lo, hi, dtype=np.int64)
        return self.item_index[lo:hi].numpy(), edge_ids

    def item_neighbors(self, item: int) -> tuple[np.ndarray, np.ndarray]:
        """Users adjacent to ``item`` and the matching edge IDs."""
        if not 0 <= item < self.num_items:
            raise DataError(f"unknown item {item}")
        lo, hi = self.item_edge_ptr[item], self.item_edge_ptr[item + 1]
        edge_ids = self.item_edge_order[lo:hi]
        return self.user_index.numpy()[edge_ids], edge_ids


def build_bipartite(ds: InteractionDataset) -> InteractionGraph:
    """Build the edge list and both neighbor indices from the train lists."""
    counts = np.array([len(a) for a in ds.train], dtype=np.int64)
    user_ptr = np.zeros(ds.num_users + 1, dtype=np.int64)
    np.cumsum(counts, out=user_ptr[1:])
    users = np.repeat(np.arange(ds.num_users, dtype=np.int64), counts)
    items = (
        np.concatenate(ds.train) if ds.num_train_edges else np.empty(0, dtype=np.int64)
    )
    item_order = np.argsort(items, kind="stable").astype(np.int64)
    item_counts = np.bincount(items, minlength=ds.num_items)
    item_ptr = np.zeros(ds.num_items + 1, dtype=np.int64)
    np.cumsum(item_counts, out=item_ptr[1:])
    return InteractionGraph(
        num_users=ds.num_users,
        num_items=ds.num_items,
        user_index=torch.from_numpy(users),
        item_index=torch.from_numpy(items),
        user_edge_ptr=user_ptr,
        item_edge_order=item_order,
        item_edge_ptr=item_ptr,
    )


@dataclass
class IntentScoreTensor:
    """Per-edge intent scores in their raw, normalized, and weighted forms.

    ``raw`` is always populated; the other fields are filled by
    :func:`normalize_scores` and :func:`laplacian_weights` and reset to None
    whenever an upstream field changes.
    """

    raw: torch.Tensor  # (E, K)
    normalized: torch.Tensor | None = None  # (E, K), rows sum to 1
    laplacian: torch.Tensor | None = None  # (E, K), degree-normalized weights
    user_degree: torch.Tensor | None = None  # (N, K)
    item_degree: torch.Tensor | None = None  # (M, K)

    @property
    def num_intents(self) -> int:
        return int(self.raw.shape[1])

    @property
    def num_edges(self) -> int:
        return int(self.raw.shape[0])


def init_scores(g: InteractionGraph, num_intents: int, dtype: torch.dtype = torch.float32) -> IntentScoreTensor:
    """All-ones raw scores: every intent starts with equal weight."""
    if num_intents < 1:
        raise ConfigError(f"num_intents must be >= 1, got {num_intents}")
    return IntentScoreTensor(raw=torch.ones(g.num_edges, num_intents, dtype=dtype))


def normalize_scores(t: IntentScoreTensor) -> IntentScoreTensor:
    """Softmax the raw scores per edge (max-subtracted for stability)."""
    finite = torch.isfinite(t.raw)
    if not bool(finite.all()):
        edge, intent = [int(v) for v in (~finite).nonzero()[0]]
        raise NumericError(f"non-finite raw score at edge {edge}, intent {intent}")
    return replace(
        t,
        normalized=torch.softmax(t.raw, dim=1),
        laplacian=None,
        user_degree=None,
        item_degree=None,
    )


def laplacian_weights(t: IntentScoreTensor, g: InteractionGraph) -> IntentScoreTensor:
    """Degree-normalize the scores: weight / sqrt(user degree * item degree).

    Per-intent degrees are the sums of normalized scores over a node's
    edges. Isolated nodes keep zero degree rows that are never looked up.
    """
    if t.normalized is None:
        raise ValueError("normalize_scores must run before laplacian_weights")
    if t.num_edges != g.num_edges:
        raise DataError(
            f"score tensor has {t.num_edges} edges, graph has {g.num_edges}"
        )
    s = t.normalized
    k = t.num_intents
    user_degree = torch.zeros(g.num_users, k, dtype=s.dtype).index_add(
        0, g.user_index, s
    )
    item_degree = torch.zeros(g.num_items, k, dtype=s.dtype).index_add(
        0, g.item_index, s
    )
    denom = torch.sqrt(
        user_degree[g.user_index] * item_degree[g.item_index] + DEGREE_EPS
    )
    return replace(
        t,
        laplacian=s / denom,
        user_degree=user_degree,
        item_degree=item_degree,
    )


def write_scores_csv(g: InteractionGraph, weights: torch.Tensor, path) -> None:
    """Dump per-edge intent weights as (user, item, intent, weight) CSV rows."""
    if weights.shape[0] != g.num_edges:
        raise DataError("weight tensor does not match the graph's edge count")
    users = g.user_index.numpy()
    items = g.item_index.numpy()
    values = weights.detach().numpy()
    with open(path, "w") as fh:
        fh.write("user,item,intent,weight\n")
        for edge in range(g.num_edges):
            for intent in range(weights.shape[1]):
                fh.write(f"{users[edge]},{items[edge]},{intent},{values[edge, intent]:.8g}\n")
