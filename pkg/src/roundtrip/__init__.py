"""Bi-directional seq2seq training with a differentiable round-trip
reconstruction loss: translations are sampled with straight-through Gumbel
noise and back-translated by the same model, so reconstruction error flows
end-to-end into every parameter."""

__version__ = "0.1.0"

from .autodiff import Tape, Tensor, backward, grad_check
from .config import RunConfig, parse_config, serialize_config
from .data import Batch, ParallelPair, TaggedSentence, Vocab
from .model import ModelConfig, ModelParams
from .sampling import GumbelNoiseSource, STGSConfig, SampledSequence
from .training import Adam, LossBreakdown, LrScheduler, Trainer

__all__ = [
    "Adam", "Batch", "GumbelNoiseSource", "LossBreakdown", "LrScheduler",
    "ModelConfig", "ModelParams", "ParallelPair", "RunConfig", "STGSConfig",
    "SampledSequence", "TaggedSentence", "Tape", "Tensor", "Trainer", "Vocab",
    "backward", "grad_check", "parse_config", "serialize_config",
]
