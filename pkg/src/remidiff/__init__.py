"""Absorbing-state discrete diffusion over REMI symbolic-music tokens."""

from .diffusion import NoiseSchedule, make_schedule, p_reverse, posterior, q_sample, q_xt_given_x0, vb_loss
from .midi import NoteEvent, Score, parse_midi, write_midi
from .model import MFAConfig, MFANet, reorder_variant
from .remi import RemiVocab, decode, encode, quantize
from .sampler import SamplerConfig, batch_generate, generate
from .tensor import GradTape, Tensor, grad_check

__version__ = "0.1.0"

__all__ = [
    "NoiseSchedule",
    "make_schedule",
    "q_xt_given_x0",
    "q_sample",
    "posterior",
    "p_reverse",
    "vb_loss",
    "NoteEvent",
    "Score",
    "parse_midi",
    "write_midi",
    "MFAConfig",
    "MFANet",
    "reorder_variant",
    "RemiVocab",
    "quantize",
    "encode",
    "decode",
    "SamplerConfig",
    "generate",
    "batch_generate",
    "Tensor",
    "GradTape",
    "grad_check",
    "__version__",
]
