"""mathscribe: synthesize handwritten-style formula images with a
self-attention GAN and train formula recognizers on the result."""

__version__ = "0.1.0"

from .corpus import FormulaRecord, Vocabulary, normalize, tokenize
from .gan import Discriminator, GANLosses, Generator, SelfAttention2d, combine_losses, hinge_d_loss, hinge_g_loss
from .metrics import exprate, perplexity, wer
from .recognizer import Recognizer, RecognizerConfig

__all__ = [
    "FormulaRecord",
    "Vocabulary",
    "tokenize",
    "normalize",
    "SelfAttention2d",
    "Generator",
    "Discriminator",
    "GANLosses",
    "hinge_d_loss",
    "hinge_g_loss",
    "combine_losses",
    "Recognizer",
    "RecognizerConfig",
    "wer",
    "exprate",
    "perplexity",
]
