"""Swin-transformer encoder, convolutional decoder, and accounting helpers."""
from .complexity import count_flops, count_parameters, summarize
from .config import ModelConfig, padded_input
from .decoder import Decoder, ResidualBlock, UpBlock
from .swin import PatchEmbed, PatchMerging, SwinBlock, SwinStage, WindowAttention
from .unetr import StageOutputs, SwinUNETR

__all__ = [
    "ModelConfig",
    "padded_input",
    "SwinUNETR",
    "StageOutputs",
    "PatchEmbed",
    "PatchMerging",
    "SwinBlock",
    "SwinStage",
    "WindowAttention",
    "Decoder",
    "ResidualBlock",
    "UpBlock",
    "count_parameters",
    "count_flops",
    "summarize",
]
