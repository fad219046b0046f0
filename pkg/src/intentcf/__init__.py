"""Intent-aware graph collaborative filtering engine."""

__version__ = "0.1.0"

from .dataset import InteractionDataset, TripletBatch, load_interactions, sample_triplets
from .disentangler import ChunkedEmbeddingTable, LayerState, route_layer, stack_layers
from .evaluator import RankingMetrics, evaluate, temperature_probe
from .graph import InteractionGraph, IntentScoreTensor, build_bipartite
from .independence import distance_correlation, independence_loss, measure_table_dcor
from .trainer import TrainingConfig, gradients, init_params, train_epoch

__all__ = [
    "__version__",
    "InteractionDataset",
    "TripletBatch",
    "load_interactions",
    "sample_triplets",
    "ChunkedEmbeddingTable",
    "LayerState",
    "route_layer",
    "stack_layers",
    "RankingMetrics",
    "evaluate",
    "temperature_probe",
    "InteractionGraph",
    "IntentScoreTensor",
    "build_bipartite",
    "distance_correlation",
    "independence_loss",
    "measure_table_dcor",
    "TrainingConfig",
    "gradients",
    "init_params",
    "train_epoch",
]
