"""Semantics-constrained VQ image tokenizer and unified autoregressive
vision-language model, at desk scale."""

from .lm import ARConfig, ARModel, VocabLayout
from .tokenizer import LossReport, SDEConfig, SDEModel
from .vq import Codebook, QuantizationResult, quantize

__all__ = [
    "ARConfig", "ARModel", "VocabLayout",
    "LossReport", "SDEConfig", "SDEModel",
    "Codebook", "QuantizationResult", "quantize",
]

__version__ = "0.1.0"
