"""Depth-adaptive mixture of experts over graph neural networks."""

__version__ = "0.1.0"

from .graphs import (Graph, GraphDataset, ScaleBucket, bucket_by_scale,
                     generate_depth_sensitive_dataset, load_tu_dataset,
                     normalized_adjacency, split_dataset)
from .model import DaMoeModel, SingleGnnModel, load_model, save_model
from .training import EvalReport, TrainConfig, evaluate, train

__all__ = [
    "Graph", "GraphDataset", "ScaleBucket", "bucket_by_scale",
    "generate_depth_sensitive_dataset", "load_tu_dataset",
    "normalized_adjacency", "split_dataset",
    "DaMoeModel", "SingleGnnModel", "load_model", "save_model",
    "EvalReport", "TrainConfig", "evaluate", "train",
]
