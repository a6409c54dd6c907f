"""Variable-length semantic IDs for item catalogs.

Learns per-item token sequences of adaptive length with a Gumbel-Softmax
residual dVAE, plus R-KMeans and REINFORCE baselines and a metric suite.
"""

from .catalog import (
    Catalog,
    ItemDistribution,
    empirical_distributions,
    load_catalog,
    normalize_embeddings,
    save_catalog,
    synth_zipf_catalog,
)
from .encoder import SemanticId, encode_hard, encode_hard_batch, encode_relaxed
from .trainer import ModelState, TrainConfig, load_checkpoint, save_checkpoint, train

__all__ = [
    "Catalog",
    "ItemDistribution",
    "ModelState",
    "SemanticId",
    "TrainConfig",
    "empirical_distributions",
    "encode_hard",
    "encode_hard_batch",
    "encode_relaxed",
    "load_catalog",
    "load_checkpoint",
    "normalize_embeddings",
    "save_catalog",
    "save_checkpoint",
    "synth_zipf_catalog",
    "train",
]

__version__ = "0.1.0"
