"""Incomplete multi-view clustering with flow-based distribution transfer."""
from .dataio import MultiViewDataset, SyntheticSpec, generate_mask, generate_synthetic, load_dataset
from .estimator import BURG
from .metrics import accuracy, ari, kmeans, nmi, score
from .numerics import Rng
from .trainer import TrainConfig, Trainer, load_checkpoint, save_checkpoint

__all__ = [
    "BURG", "MultiViewDataset", "Rng", "SyntheticSpec", "TrainConfig", "Trainer",
    "accuracy", "ari", "generate_mask", "generate_synthetic", "kmeans", "load_checkpoint",
    "load_dataset", "nmi", "save_checkpoint", "score",
]
__version__ = "0.1.0"
