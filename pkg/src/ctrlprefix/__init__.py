"""Prefix-tuning with attribute-level control prefixes over a frozen encoder-decoder."""
from .decoding import DecodeConfig, beam_search, generate
from .guidance import Attribute, AttributeSchema, Guidance, GuidanceResolver, discretize_ratio, zero_shot_map
from .model import ControlPrefixModel, control_token_baseline, forward
from .prefix import PrefixBank, PrefixConfig, param_count
from .reparam import fold
from .transformer import ModelConfig, Seq2SeqTransformer

__all__ = [
    "Attribute", "AttributeSchema", "ControlPrefixModel", "DecodeConfig", "Guidance", "GuidanceResolver",
    "ModelConfig", "PrefixBank", "PrefixConfig", "Seq2SeqTransformer", "beam_search", "control_token_baseline",
    "discretize_ratio", "fold", "forward", "generate", "param_count", "zero_shot_map",
]
__version__ = "0.1.0"
