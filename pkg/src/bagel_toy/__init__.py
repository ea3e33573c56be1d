"""Desk-scale unified multimodal transformer: Mixture-of-Transformers with
generalized causal attention, rectified-flow image latents and KV-cached
interleaved decoding, all on a small float64 autodiff engine."""

from .errors import (BagelError, ConfigurationError, ContractError, DimensionError, InputError,
                     LayoutError, LoadError, NonFiniteLossError, PackingError, SamplingError)
from .layout import (DropFlags, ImageRecord, ImageSpec, Modality, PackedSequence, Regime,
                     SampleLayout, Split, TextBlock, apply_cfg_dropout, assign_noise_levels,
                     build_sample_layout, pack_sequences)
from .mask import MaskSpec, build_mask, mask_to_intervals, oracle_mask
from .model import ModelConfig, ModelParams, Variant, count_flops, forward_model, init_params

__version__ = "0.1.0"
