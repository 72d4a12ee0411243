"""Prompted multi-channel extraction network."""
from .checkpoint import load_model, load_tensors, save_model, save_tensors
from .config import FUSION_KINDS, PRESETS, ModelConfig, depth_from_lengths
from .flops import FlopBreakdown, block_macs_per_unit, estimate_flops, flop_breakdown
from .network import (
    decode,
    downsample_enrollment,
    downsampled_frames,
    encode,
    extract,
    forward,
    forward_blocks,
    fuse,
    grid_block,
    speaker_embedding,
)
from .params import ModelParams, init_params

__all__ = [
    "FUSION_KINDS",
    "PRESETS",
    "FlopBreakdown",
    "ModelConfig",
    "ModelParams",
    "block_macs_per_unit",
    "decode",
    "depth_from_lengths",
    "downsample_enrollment",
    "downsampled_frames",
    "encode",
    "estimate_flops",
    "extract",
    "flop_breakdown",
    "forward",
    "forward_blocks",
    "fuse",
    "grid_block",
    "init_params",
    "load_model",
    "load_tensors",
    "save_model",
    "save_tensors",
    "speaker_embedding",
]
