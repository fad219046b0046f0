"""Full-ranking top-N metrics, the temperature probe, and intent export.

Evaluation ranks every item a user has not trained on, by inner product of
the final representations. Ties break toward the lower item ID so repeated
runs agree bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import torch

from .dataset import InteractionDataset
from .disentangler import LayerState, propagate, stack_layers
from .errors import ConfigError, DataError
from .graph import InteractionGraph, laplacian_weights
from .trainer import ChunkedEmbeddingTable, TrainingConfig


@dataclass
class RankingMetrics:
    """Averages over users that have both train and test interactions."""

    recall_at_n: float
    ndcg_at_n: float
    n: int
    users_evaluated: int

    def csv_row(self) -> str:
        return f"{self.n},{self.recall_at_n:.6f},{self.ndcg_at_n:.6f},{self.users_evaluated}"


def _rank_row(scores: np.ndarray, train_items: np.ndarray) -> np.ndarray:
    """Rank the eligible items of one score row, highest first.

    Candidates start in ascending item-ID order and the sort is stable, so
    equal scores keep ascending IDs.
    """
    candidates = np.setdiff1d(
        np.arange(scores.shape[0], dtype=np.int64), train_items, assume_unique=True
    )
    order = np.argsort(-scores[candidates], kind="stable")
    return candidates[order]


def rank_items(
    user: int, final_values: torch.Tensor, ds: InteractionDataset
) -> np.ndarray:
    """All items the user has not trained on, best scored first."""
    if not 0 <= user < ds.num_users:
        raise DataError(f"unknown user {user}")
    flat = final_values.detach().reshape(final_values.shape[0], -1)
    scores = (flat[ds.num_users:] @ flat[user]).numpy()
    return _rank_row(scores, ds.train[user])


def recall_at_n(ranking: np.ndarray, test_items: np.ndarray, n: int) -> float:
    """Fraction of the held-out items that appear in the top n."""
    if n < 1:
        raise ConfigError(f"n must be >= 1, got {n}")
    if len(test_items) == 0:
        raise DataError("empty test set; the user should be skipped upstream")
    hits = np.isin(ranking[:n], test_items).sum()
    return float(hits) / len(test_items)


def ndcg_at_n(ranking: np.ndarray, test_items: np.ndarray, n: int) -> float:
    """Binary-relevance NDCG: position-discounted hits over the ideal order."""
    if n < 1:
        raise ConfigError(f"n must be >= 1, got {n}")
    if len(test_items) == 0:
        raise DataError("empty test set; the user should be skipped upstream")
    top = ranking[:n]
    hit_positions = np.flatnonzero(np.isin(top, test_items)) + 1
    dcg = float(np.sum(1.0 / np.log2(hit_positions + 1.0)))
    ideal_positions = np.arange(1, min(len(test_items), n) + 1)
    idcg = float(np.sum(1.0 / np.log2(ideal_positions + 1.0)))
    return dcg / idcg


def evaluate(
    ds: InteractionDataset,
    final_values: torch.Tensor,
    n: int = 20,
    user_batch: int = 1024,
) -> RankingMetrics:
    """Average recall@n and ndcg@n over all evaluable users.

    Users with no test items, or no train items (cold users), are skipped.
    Scoring runs in user batches; the per-user ranking path is shared with
    :func:`rank_items`.
    """
    if n < 1:
        raise ConfigError(f"n must be >= 1, got {n}")
    flat = final_values.detach().reshape(final_values.shape[0], -1)
    user_emb = flat[: ds.num_users]
    item_emb = flat[ds.num_users:]
    evaluable = [
        u for u in range(ds.num_users) if len(ds.test[u]) and len(ds.train[u])
    ]
    recall_sum = 0.0
    ndcg_sum = 0.0
    for lo in range(0, len(evaluable), user_batch):
        block = evaluable[lo: lo + user_batch]
        scores = (user_emb[block] @ item_emb.T).numpy()
        for row, u in enumerate(block):
            ranking = _rank_row(scores[row], ds.train[u])
            recall_sum += recall_at_n(ranking, ds.test[u], n)
            ndcg_sum += ndcg_at_n(ranking, ds.test[u], n)
    count = len(evaluable)
    return RankingMetrics(
        recall_at_n=recall_sum / count if count else 0.0,
        ndcg_at_n=ndcg_sum / count if count else 0.0,
        n=n,
        users_evaluated=count,
    )


def temperature_probe(
    params: ChunkedEmbeddingTable,
    g: InteractionGraph,
    ds: InteractionDataset,
    config: TrainingConfig,
    tau: float,
    n: int = 20,
) -> RankingMetrics:
    """Evaluate with the weakest intent of every edge damped by 1/tau.

    The final layer's normalized scores are recomputed with the per-edge
    minimum divided by tau (no renormalization), then the last propagation
    and the layer sum are rebuilt. tau=1 reproduces plain evaluation bit
    for bit.
    """
    if tau < 1:
        raise ConfigError(f"tau must be >= 1, got {tau}")
    if config.K < 2:
        raise ConfigError("the temperature probe needs at least 2 intents")
    if config.L < 1:
        raise ConfigError("the temperature probe needs at least 1 routing layer")
    with torch.no_grad():
        _, state = stack_layers(
            params.values,
            g,
            config.L,
            config.T,
            affinity=config.affinity,
            stop_routing_gradients=config.stop_routing_gradients,
        )
        last = state.scores[-1]
        damped = last.normalized.clone()
        rows = torch.arange(damped.shape[0])
        weakest = damped.argmin(dim=1)
        damped[rows, weakest] = damped[rows, weakest] / tau
        reweighted = laplacian_weights(replace(last, normalized=damped), g)
        rebuilt_top = propagate(reweighted, state.embeddings[config.L - 1], g)
        total = state.embeddings[0]
        for layer in range(1, config.L):
            total = total + state.embeddings[layer]
        total = total + rebuilt_top
    return evaluate(ds, total, n)


def export_intent_graph(
    state: LayerState, user: int, layer: int, g: InteractionGraph
) -> list[tuple[int, int, int, float]]:
    """One row per (intent, historical edge) of the user, strongest first.

    Weights are the layer's normalized scores, so each edge's weights sum
    to 1 across intents. ``layer`` is 1-based; layer 0 carries no scores.
    """
    if not 1 <= layer <= state.num_layers:
        raise DataError(
            f"layer {layer} out of range; stacked layers: 1..{state.num_layers}"
        )
    items, edge_ids = g.user_neighbors(user)
    weights = state.scores[layer - 1].normalized.detach().numpy()[edge_ids]
    rows: list[tuple[int, int, int, float]] = []
    for intent in range(weights.shape[1]):
        order = np.argsort(-weights[:, intent], kind="stable")
        rows.extend(
            (user, int(items[pos]), intent, float(weights[pos, intent]))
            for pos in order
        )
    return rows
