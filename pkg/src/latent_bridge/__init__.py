"""Bridging VAEs over the latent spaces of pretrained generative models.

Numpy-only: a small reverse-mode autodiff engine, dense layers, the bridge
objective (ELBO + sliced Wasserstein + latent classification), base models,
evaluation metrics, a checkpoint format and a command-line front end.
"""

from .autodiff import Tape, Tensor, backward
from .base_models import BetaVae, DataClassifier, DecoderOnly, IdentityBase, LatentBank
from .bridge import BridgeConfig, BridgingVae, ablation_variants, train_bridge
from .datasets import LabeledVectorDataset, SyntheticConfig, gen_synthetic_domains
from .losses import LossWeights
from .persistence import load_checkpoint, save_checkpoint

__all__ = [
    "Tape",
    "Tensor",
    "backward",
    "BetaVae",
    "DataClassifier",
    "DecoderOnly",
    "IdentityBase",
    "LatentBank",
    "BridgeConfig",
    "BridgingVae",
    "ablation_variants",
    "train_bridge",
    "LabeledVectorDataset",
    "SyntheticConfig",
    "gen_synthetic_domains",
    "LossWeights",
    "load_checkpoint",
    "save_checkpoint",
]

__version__ = "0.1.0"
