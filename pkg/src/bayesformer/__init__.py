"""Bayesian Transformer language models on a small numpy autograd engine."""

from .autograd import Tensor
from .bayes import BayesConfig, VariationalSite, kl_site, kl_total, materialize_mean, promote
from .checkpoint import load_checkpoint, save_checkpoint
from .corpus import SyntheticSpec, Vocabulary, build_vocab, generate_synthetic, tokenize
from .model import ModelConfig, TransformerLM
from .training import AdaptMode, TrainConfig, adapt, elbo_loss, train

__version__ = "0.1.0"

__all__ = [
    "AdaptMode", "BayesConfig", "ModelConfig", "SyntheticSpec", "Tensor", "TrainConfig",
    "TransformerLM", "VariationalSite", "Vocabulary", "adapt", "build_vocab", "elbo_loss",
    "generate_synthetic", "kl_site", "kl_total", "load_checkpoint", "materialize_mean",
    "promote", "save_checkpoint", "tokenize", "train",
]
