"""Divide-and-conquer deep metric learning on feature vectors."""

from .dataset import LabeledDataset, SyntheticSpec, generate_synthetic, \
    load_features, zero_shot_split
from .embedder import Adam, EmbeddingNetwork, normalize_rows
from .estimator import DivideConquerEmbedding
from .losses import LossConfig
from .metrics import MetricsReport, evaluate, marp, nmi, recall_at_k
from .partition import Partition, kmeans
from .subspace import MaskSet
from .trainer import TrainConfig, fit

__version__ = "0.1.0"

__all__ = [
    "Adam", "DivideConquerEmbedding", "EmbeddingNetwork", "LabeledDataset",
    "LossConfig", "MaskSet", "MetricsReport", "Partition", "SyntheticSpec",
    "TrainConfig", "evaluate", "fit", "generate_synthetic", "kmeans",
    "load_features", "marp", "nmi", "normalize_rows", "recall_at_k",
    "zero_shot_split",
]
