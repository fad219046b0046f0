"""Intent routing layers: iterative score refinement plus embedding propagation.

One layer runs T routing iterations. Each iteration softmax-normalizes the
per-edge intent scores, degree-normalizes them, and propagates the layer's
input chunks across the graph in both directions. Between iterations the raw
scores absorb the affinity between a node's freshly propagated chunk and the
tanh of its neighbor's input chunk; no update follows the final iteration.
The layer stack sums the per-layer outputs into the final representations.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import ConfigError, DataError, NumericError
from .graph import (
    InteractionGraph,
    IntentScoreTensor,
    init_scores,
    laplacian_weights,
    normalize_scores,
)

AFFINITY_MODES = ("both", "user_only")


@dataclass
class ChunkedEmbeddingTable:
    """Node embeddings split into contiguous per-intent chunks.

    ``values`` has shape (num_nodes, num_intents, chunk_dim); users occupy
    rows [0, N) and items rows [N, N+M). This table is the model's only
    trainable state.
    """

    values: torch.Tensor

    def __post_init__(self) -> None:
        if self.values.dim() != 3:
            raise DataError("embedding table must be (nodes, intents, chunk_dim)")

    @property
    def num_nodes(self) -> int:
        return int(self.values.shape[0])

    @property
    def num_intents(self) -> int:
        return int(self.values.shape[1])

    @property
    def chunk_dim(self) -> int:
        return int(self.values.shape[2])

    @property
    def embedding_dim(self) -> int:
        return self.num_intents * self.chunk_dim

    @property
    def num_parameters(self) -> int:
        return self.values.numel()

    def flat(self) -> torch.Tensor:
        """View as (num_nodes, embedding_dim); chunk k is columns [k*c, (k+1)*c)."""
        return self.values.reshape(self.num_nodes, -1)

    @classmethod
    def from_flat(cls, flat: torch.Tensor, num_intents: int) -> "ChunkedEmbeddingTable":
        nodes, dim = flat.shape
        if dim % num_intents:
            raise ConfigError(f"embedding size {dim} not divisible by {num_intents} intents")
        return cls(values=flat.reshape(nodes, num_intents, dim // num_intents))


@dataclass
class LayerState:
    """Per-layer outputs of a stacked forward pass.

    ``embeddings[l]`` is the layer-l representation (layer 0 is the input
    table itself); ``scores[l-1]`` holds layer l's final normalized scores
    and their degree-normalized weights.
    """

    embeddings: list[torch.Tensor]
    scores: list[IntentScoreTensor]

    @property
    def num_layers(self) -> int:
        return len(self.scores)


def propagate(
    t: IntentScoreTensor, source: torch.Tensor, g: InteractionGraph
) -> torch.Tensor:
    """Weighted-sum aggregation across the bipartite edges, both directions.

    Each user chunk collects its neighbors' item chunks scaled by the edge
    weight, and vice versa. Nodes without edges come out as zero vectors;
    the ego node never contributes to its own output.
    """
    if t.laplacian is None:
        raise ValueError("laplacian_weights must run before propagate")
    if source.shape[0] != g.num_nodes:
        raise DataError(
            f"source table has {source.shape[0]} rows, graph has {g.num_nodes} nodes"
        )
    if t.num_edges != g.num_edges or source.shape[1] != t.num_intents:
        raise DataError("score tensor does not match the source table and graph")
    weights = t.laplacian.unsqueeze(-1)
    user_in = source[: g.num_users]
    item_in = source[g.num_users:]
    user_out = torch.zeros_like(user_in).index_add(
        0, g.user_index, weights * item_in[g.item_index]
    )
    item_out = torch.zeros_like(item_in).index_add(
        0, g.item_index, weights * user_in[g.user_index]
    )
    return torch.cat([user_out, item_out], dim=0)


def update_scores(
    t: IntentScoreTensor,
    user_temp: torch.Tensor,
    item_temp: torch.Tensor,
    layer_input: torch.Tensor,
    g: InteractionGraph,
    affinity: str = "both",
    stop_gradient: bool = False,
) -> IntentScoreTensor:
    """Add the routing affinity to the raw scores.

    Per edge and intent the increment is <u_temp, tanh(item_input)>, plus the
    mirrored <item_temp, tanh(user_input)> term when ``affinity`` is "both".
    With ``stop_gradient`` the increment is detached so the refined scores
    act as constants during differentiation.
    """
    if affinity not in AFFINITY_MODES:
        raise ConfigError(f"affinity must be one of {AFFINITY_MODES}, got {affinity!r}")
    user_in = layer_input[: g.num_users]
    item_in = layer_input[g.num_users:]
    increment = (user_temp[g.user_index] * torch.tanh(item_in)[g.item_index]).sum(-1)
    if affinity == "both":
        increment = increment + (
            item_temp[g.item_index] * torch.tanh(user_in)[g.user_index]
        ).sum(-1)
    if stop_gradient:
        increment = increment.detach()
    return IntentScoreTensor(raw=t.raw + increment)


def route_layer(
    input_emb: torch.Tensor,
    g: InteractionGraph,
    num_iterations: int,
    affinity: str = "both",
    stop_routing_gradients: bool = False,
    fixed_scores: IntentScoreTensor | None = None,
) -> tuple[torch.Tensor, IntentScoreTensor]:
    """Run one routing layer and return (output embeddings, final scores).

    Scores restart from all-ones at layer entry. Propagation always reads
    the layer's input embeddings, so the output is linear in the input for
    fixed scores. ``fixed_scores`` skips the routing and propagates once
    under the given normalized scores (used by the temperature probe and by
    frozen-score gradient checks).
    """
    if num_iterations < 1:
        raise ConfigError(f"num_iterations must be >= 1, got {num_iterations}")
    if fixed_scores is not None:
        if fixed_scores.normalized is None:
            raise ValueError("fixed_scores must carry normalized weights")
        weighted = laplacian_weights(fixed_scores, g)
        return propagate(weighted, input_emb, g), weighted

    num_intents = input_emb.shape[1]
    scores = init_scores(g, num_intents, dtype=input_emb.dtype)
    output = input_emb
    for t in range(1, num_iterations + 1):
        scores = laplacian_weights(normalize_scores(scores), g)
        output = propagate(scores, input_emb, g)
        _check_finite(output, t)
        if t < num_iterations:
            scores = update_scores(
                scores,
                output[: g.num_users],
                output[g.num_users:],
                input_emb,
                g,
                affinity=affinity,
                stop_gradient=stop_routing_gradients,
            )
    return output, scores


def stack_layers(
    params: torch.Tensor,
    g: InteractionGraph,
    num_layers: int,
    num_iterations: int,
    affinity: str = "both",
    stop_routing_gradients: bool = False,
    fixed_scores: list[IntentScoreTensor] | None = None,
) -> tuple[torch.Tensor, LayerState]:
    """Apply ``num_layers`` routing layers and sum all layer outputs.

    Layer 0 is the parameter table itself; zero layers returns it unchanged.
    """
    if num_layers < 0:
        raise ConfigError(f"num_layers must be >= 0, got {num_layers}")
    if fixed_scores is not None and len(fixed_scores) != num_layers:
        raise DataError("fixed_scores must supply one score tensor per layer")
    state = LayerState(embeddings=[params], scores=[])
    total = params
    current = params
    for layer in range(num_layers):
        override = fixed_scores[layer] if fixed_scores is not None else None
        current, scores = route_layer(
            current,
            g,
            num_iterations,
            affinity=affinity,
            stop_routing_gradients=stop_routing_gradients,
            fixed_scores=override,
        )
        state.embeddings.append(current)
        state.scores.append(scores)
        total = total + current
    return total, state


def _check_finite(emb: torch.Tensor, iteration: int) -> None:
    finite = torch.isfinite(emb)
    if not bool(finite.all()):
        bad_intents = (~finite).any(dim=0).any(dim=-1).nonzero()
        intent = int(bad_intents[0]) if len(bad_intents) else -1
        raise NumericError(
            f"non-finite embedding at routing iteration {iteration}, intent {intent}"
        )
