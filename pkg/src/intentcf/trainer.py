"""Objectives, exact gradients, Adam, and the alternating training loop.

Each batch takes one pairwise-ranking gradient step and then, when more
than one intent is active and the weight is positive, one independence
gradient step on the same batch's nodes. Gradients are exact reverse-mode
derivatives of the forward pass; the routing-score updates are either
differentiated through (``routing_grad="full"``) or held constant
(``"stop"``).
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import torch

from .dataset import InteractionDataset, TripletBatch, sample_triplets
from .disentangler import AFFINITY_MODES, ChunkedEmbeddingTable, stack_layers
from .errors import ConfigError, DataError, NumericError
from .graph import InteractionGraph, IntentScoreTensor
from .independence import independence_loss

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

ROUTING_GRAD_MODES = ("full", "stop")
OBJECTIVES = ("bpr", "independence", "combined")


@dataclass
class TrainingConfig:
    """All knobs of a run; every count is validated on construction."""

    K: int = 4  # intent chunks
    L: int = 1  # routing layers
    T: int = 2  # routing iterations per layer
    d: int = 64  # total embedding size
    lr: float = 0.001
    l2: float = 1e-4
    cor_weight: float = 0.01
    batch_size: int = 1024
    epochs: int = 100
    seed: int = 2020
    eval_every: int = 10
    threads: int = 1
    affinity: str = "both"
    routing_grad: str = "full"
    cor_sample: int = 1000

    def __post_init__(self) -> None:
        if self.K < 1:
            raise ConfigError(f"K must be >= 1, got {self.K}")
        if self.L < 0:
            raise ConfigError(f"L must be >= 0, got {self.L}")
        if self.T < 1:
            raise ConfigError(f"T must be >= 1, got {self.T}")
        if self.d < 1 or self.d % self.K:
            raise ConfigError(f"d={self.d} must be positive and divisible by K={self.K}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.l2 < 0 or self.cor_weight < 0:
            raise ConfigError("l2 and cor_weight must be >= 0")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.eval_every < 1:
            raise ConfigError(f"eval_every must be >= 1, got {self.eval_every}")
        if self.threads < 1:
            raise ConfigError(f"threads must be >= 1, got {self.threads}")
        if self.affinity not in AFFINITY_MODES:
            raise ConfigError(f"affinity must be one of {AFFINITY_MODES}, got {self.affinity!r}")
        if self.routing_grad not in ROUTING_GRAD_MODES:
            raise ConfigError(
                f"routing_grad must be one of {ROUTING_GRAD_MODES}, got {self.routing_grad!r}"
            )
        if self.cor_sample < 2:
            raise ConfigError(f"cor_sample must be >= 2, got {self.cor_sample}")

    @property
    def stop_routing_gradients(self) -> bool:
        return self.routing_grad == "stop"

    @property
    def chunk_dim(self) -> int:
        return self.d // self.K

    def as_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_mapping(cls, mapping: dict) -> "TrainingConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(mapping) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        kwargs = {}
        for f in fields(cls):
            if f.name not in mapping:
                continue
            value = mapping[f.name]
            if f.type in ("int", int):
                kwargs[f.name] = int(value)
            elif f.type in ("float", float):
                kwargs[f.name] = float(value)
            else:
                kwargs[f.name] = str(value)
        return cls(**kwargs)


@dataclass
class OptimizerState:
    """Adam moment accumulators shaped exactly like the parameter table."""

    m: torch.Tensor
    v: torch.Tensor
    step: int = 0

    @classmethod
    def zeros(cls, params: ChunkedEmbeddingTable) -> "OptimizerState":
        return cls(m=torch.zeros_like(params.values), v=torch.zeros_like(params.values))


@dataclass
class EpochReport:
    mean_bpr_loss: float
    mean_ind_loss: float
    seconds: float
    num_batches: int


def init_params(
    num_users: int,
    num_items: int,
    d: int,
    num_intents: int,
    seed: int,
    dtype: torch.dtype = torch.float32,
) -> ChunkedEmbeddingTable:
    """Xavier-uniform table over the full embedding width, chunked by intent.

    The bound is sqrt(6 / (2 d)); every chunk is filled independently from
    the same seeded stream.
    """
    if d < 1 or d % num_intents:
        raise ConfigError(f"d={d} must be positive and divisible by K={num_intents}")
    bound = math.sqrt(6.0 / (2.0 * d))
    gen = torch.Generator().manual_seed(seed)
    flat = (torch.rand((num_users + num_items, d), generator=gen, dtype=dtype) * 2 - 1) * bound
    return ChunkedEmbeddingTable.from_flat(flat, num_intents)


def predict(e_u: torch.Tensor, e_i: torch.Tensor) -> float:
    """Inner product of two full (chunk-concatenated) embeddings."""
    u = e_u.reshape(-1)
    i = e_i.reshape(-1)
    if u.shape != i.shape:
        raise DataError(f"embedding sizes differ: {tuple(u.shape)} vs {tuple(i.shape)}")
    return float(torch.dot(u, i))


def bpr_loss(
    batch: TripletBatch,
    final_values: torch.Tensor,
    params_values: torch.Tensor,
    l2: float,
    num_users: int,
) -> torch.Tensor:
    """Pairwise ranking loss with L2 on the batch-touched parameter rows.

    sum of -log sigmoid(score(u,i) - score(u,j)) over the triplets, plus
    l2 * (squared norms of the touched layer-0 rows) / batch size.
    """
    users = torch.from_numpy(batch.users)
    pos = torch.from_numpy(batch.pos_items) + num_users
    neg = torch.from_numpy(batch.neg_items) + num_users
    flat = final_values.reshape(final_values.shape[0], -1)
    e_u, e_i, e_j = flat[users], flat[pos], flat[neg]
    margins = (e_u * e_i).sum(dim=1) - (e_u * e_j).sum(dim=1)
    loss = torch.nn.functional.softplus(-margins).sum()
    if l2:
        p = params_values.reshape(params_values.shape[0], -1)
        reg = (p[users] ** 2).sum() + (p[pos] ** 2).sum() + (p[neg] ** 2).sum()
        loss = loss + l2 * reg / len(batch)
    return loss


def batch_nodes(batch: TripletBatch, num_users: int) -> np.ndarray:
    """Sorted unique node IDs touched by a batch (users plus offset items)."""
    return np.unique(
        np.concatenate(
            [batch.users, batch.pos_items + num_users, batch.neg_items + num_users]
        )
    )


def batch_independence_loss(
    batch: TripletBatch, final_values: torch.Tensor, num_users: int
) -> torch.Tensor:
    """Independence loss over the final representations of the batch's nodes."""
    if final_values.shape[1] < 2:
        return final_values.new_zeros(())
    nodes = torch.from_numpy(batch_nodes(batch, num_users))
    rows = final_values[nodes]
    return independence_loss([rows[:, k, :] for k in range(rows.shape[1])])


def objective_value(
    objective: str,
    batch: TripletBatch,
    values: torch.Tensor,
    g: InteractionGraph,
    config: TrainingConfig,
    fixed_scores: list[IntentScoreTensor] | None = None,
) -> torch.Tensor:
    """Scalar loss of the chosen objective at the given parameter values."""
    if objective not in OBJECTIVES:
        raise ConfigError(f"objective must be one of {OBJECTIVES}, got {objective!r}")
    final, _ = stack_layers(
        values,
        g,
        config.L,
        config.T,
        affinity=config.affinity,
        stop_routing_gradients=config.stop_routing_gradients,
        fixed_scores=fixed_scores,
    )
    if objective == "bpr":
        return bpr_loss(batch, final, values, config.l2, g.num_users)
    if objective == "independence":
        return batch_independence_loss(batch, final, g.num_users)
    return bpr_loss(
        batch, final, values, config.l2, g.num_users
    ) + config.cor_weight * batch_independence_loss(batch, final, g.num_users)


def _loss_and_grad(
    objective: str,
    batch: TripletBatch,
    params: ChunkedEmbeddingTable,
    g: InteractionGraph,
    config: TrainingConfig,
) -> tuple[float, torch.Tensor]:
    leaf = params.values.detach().clone().requires_grad_(True)
    loss = objective_value(objective, batch, leaf, g, config)
    if not torch.isfinite(loss):
        raise NumericError(f"non-finite {objective} loss")
    if not loss.requires_grad:  # objective is constant, e.g. single intent
        return float(loss), torch.zeros_like(params.values)
    (grad,) = torch.autograd.grad(loss, leaf)
    loss = loss.detach()
    finite = torch.isfinite(grad)
    if not bool(finite.all()):
        node = int((~finite).any(dim=1).any(dim=1).nonzero()[0])
        raise NumericError(f"non-finite gradient for node {node}")
    return float(loss), grad


def gradients(
    objective: str,
    batch: TripletBatch,
    params: ChunkedEmbeddingTable,
    g: InteractionGraph,
    config: TrainingConfig,
) -> torch.Tensor:
    """Exact gradient of the objective w.r.t. the layer-0 table."""
    return _loss_and_grad(objective, batch, params, g, config)[1]


def adam_step(
    params: ChunkedEmbeddingTable,
    grads: torch.Tensor,
    state: OptimizerState,
    lr: float,
) -> None:
    """One in-place Adam update (beta1=0.9, beta2=0.999, eps=1e-8)."""
    if grads.shape != params.values.shape or state.m.shape != params.values.shape:
        raise DataError("gradient/state shapes do not match the parameter table")
    state.step += 1
    state.m.mul_(ADAM_BETA1).add_(grads, alpha=1.0 - ADAM_BETA1)
    state.v.mul_(ADAM_BETA2).addcmul_(grads, grads, value=1.0 - ADAM_BETA2)
    m_hat = state.m / (1.0 - ADAM_BETA1 ** state.step)
    v_hat = state.v / (1.0 - ADAM_BETA2 ** state.step)
    params.values -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS)


def train_epoch(
    ds: InteractionDataset,
    g: InteractionGraph,
    params: ChunkedEmbeddingTable,
    state: OptimizerState,
    config: TrainingConfig,
    rng: np.random.Generator,
) -> EpochReport:
    """One pass of ceil(edges / batch size) alternating batch updates.

    A numeric failure restores the parameters and optimizer state from the
    last completed batch before propagating.
    """
    num_batches = max(1, math.ceil(ds.num_train_edges / config.batch_size))
    run_independence = config.K > 1 and config.cor_weight > 0
    bpr_total = 0.0
    ind_total = 0.0
    started = time.perf_counter()
    for _ in range(num_batches):
        snapshot = (params.values.clone(), state.m.clone(), state.v.clone(), state.step)
        try:
            batch = sample_triplets(ds, config.batch_size, rng)
            loss, grad = _loss_and_grad("bpr", batch, params, g, config)
            adam_step(params, grad, state, config.lr)
            bpr_total += loss / len(batch)
            if run_independence:
                ind_value, ind_grad = _loss_and_grad(
                    "independence", batch, params, g, config
                )
                adam_step(params, config.cor_weight * ind_grad, state, config.lr)
                ind_total += ind_value
        except NumericError:
            params.values, state.m, state.v, state.step = snapshot
            raise
    return EpochReport(
        mean_bpr_loss=bpr_total / num_batches,
        mean_ind_loss=ind_total / num_batches,
        seconds=time.perf_counter() - started,
        num_batches=num_batches,
    )


def final_embeddings(
    params: ChunkedEmbeddingTable, g: InteractionGraph, config: TrainingConfig
):
    """Layer-summed representations and per-layer state, without autograd."""
    with torch.no_grad():
        return stack_layers(
            params.values,
            g,
            config.L,
            config.T,
            affinity=config.affinity,
            stop_routing_gradients=config.stop_routing_gradients,
        )


CHECKPOINT_VERSION = 1


@dataclass
class Checkpoint:
    config: TrainingConfig
    params: ChunkedEmbeddingTable
    state: OptimizerState
    epoch: int
    extra: dict = field(default_factory=dict)


def save_checkpoint(
    path,
    config: TrainingConfig,
    params: ChunkedEmbeddingTable,
    state: OptimizerState,
    epoch: int,
    extra: dict | None = None,
) -> None:
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "config": config.as_dict(),
        "values": params.values.detach().clone(),
        "adam_m": state.m.clone(),
        "adam_v": state.v.clone(),
        "adam_step": state.step,
        "epoch": epoch,
        "extra": dict(extra or {}),
    }
    torch.save(payload, path)


def load_checkpoint(path) -> Checkpoint:
    try:
        payload = torch.load(path, weights_only=True)
    except Exception as exc:
        raise DataError(f"cannot load checkpoint {path}: {exc}") from exc
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise DataError(
            f"unsupported checkpoint version {payload.get('format_version')!r}"
        )
    config = TrainingConfig.from_mapping(payload["config"])
    params = ChunkedEmbeddingTable(values=payload["values"])
    state = OptimizerState(
        m=payload["adam_m"], v=payload["adam_v"], step=int(payload["adam_step"])
    )
    return Checkpoint(
        config=config,
        params=params,
        state=state,
        epoch=int(payload["epoch"]),
        extra=dict(payload.get("extra", {})),
    )
