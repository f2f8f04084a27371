"""Substructure-aware graph-level OOD detection with a numpy autodiff core."""
from .encoder import EncoderConfig, encode, init_params
from .graph import Graph, GraphDataset, parse_tudataset, split_dataset, wl_distinguishable, wl_refine
from .oodscore import GaussianStats, aupr, auroc, estimate_gaussian, fpr95, mahalanobis_score
from .substructure import Partition, SuperGraph, build_super_graph, detect, novelty_rate, validate_partition
from .training import GraphSet, TrainConfig, train

__all__ = [
    "EncoderConfig", "encode", "init_params",
    "Graph", "GraphDataset", "parse_tudataset", "split_dataset", "wl_distinguishable", "wl_refine",
    "GaussianStats", "aupr", "auroc", "estimate_gaussian", "fpr95", "mahalanobis_score",
    "Partition", "SuperGraph", "build_super_graph", "detect", "novelty_rate", "validate_partition",
    "GraphSet", "TrainConfig", "train",
]
