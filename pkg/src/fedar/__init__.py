"""Multi-aspect review rating classifier with attention keyword ranking and ensemble uncertainty."""

from fedar.corpus import Corpus, Review, Vocabulary, load_corpus
from fedar.model import Fedar, ModelConfig, load_checkpoint, save_checkpoint
from fedar.training import TrainConfig, evaluate, train

__all__ = [
    "Corpus",
    "Fedar",
    "ModelConfig",
    "Review",
    "TrainConfig",
    "Vocabulary",
    "evaluate",
    "load_checkpoint",
    "load_corpus",
    "save_checkpoint",
    "train",
]

__version__ = "0.1.0"
