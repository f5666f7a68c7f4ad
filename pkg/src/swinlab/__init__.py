"""Swin-transformer U-shaped volumetric segmentation on a numpy autodiff core."""

__version__ = "0.1.0"
