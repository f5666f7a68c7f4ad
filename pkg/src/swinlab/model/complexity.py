"""Parameter and FLOP accounting.

FLOP convention: one multiply-add is 2 FLOPs. Counted terms are linear
layers (qkv, output projection, MLP, patch-merging reduction), the two
attention products (``q k^T`` and attention-weighted ``v``) over padded
windows, and every convolution / transposed convolution as kernel MACs.
Normalizations, softmax, activations and additions are not counted.
"""
from __future__ import annotations

import numpy as np

from .. import windowing as W
from .config import ModelConfig, padded_input
from .unetr import SwinUNETR


def count_parameters(config: ModelConfig) -> int:
    """Exact parameter count: the model is built with zero-filled storage and summed."""
    return SwinUNETR(config, init_mode="zeros").num_parameters()


def _conv_flops(voxels_out: int, cin: int, cout: int, k: int) -> int:
    return 2 * voxels_out * cin * cout * k**3


def _res_block_flops(voxels: int, cin: int, cout: int) -> int:
    f = _conv_flops(voxels, cin, cout, 3) + _conv_flops(voxels, cout, cout, 3)
    if cin != cout:
        f += _conv_flops(voxels, cin, cout, 1)
    return f


def count_flops(config: ModelConfig, input_size=None) -> int:
    size = padded_input(input_size or config.input_size)
    c, s = config.embed_dim, config.in_channels
    vox = [int(np.prod([e // 2**i for e in size])) for i in range(6)]
    grids = [tuple(e // 2**i for e in size) for i in range(6)]

    total = _conv_flops(vox[1], s, c, 2)  # patch embedding
    for i in range(4):
        width = config.stage_width(i)
        heads = config.num_heads[i]
        grid = grids[i + 1]
        tokens = vox[i + 1]
        window, _ = W.effective_window(grid, config.window_size, shifted=False)
        padded = int(np.prod([-(-g // m) * m for g, m in zip(grid, window)]))
        t = int(np.prod(window))
        hidden = int(width * config.mlp_ratio)
        per_block = (
            2 * tokens * width * 3 * width          # qkv
            + 2 * 2 * padded * t * width            # q k^T and attn @ v, all heads
            + 2 * tokens * width * width            # output projection
            + 2 * 2 * tokens * width * hidden       # MLP
        )
        total += config.depths[i] * per_block
        total += 2 * vox[i + 2] * 8 * width * 2 * width  # patch merging
    total += _res_block_flops(vox[0], s, c)
    total += _res_block_flops(vox[1], c, c)
    total += _res_block_flops(vox[2], 2 * c, 2 * c)
    total += _res_block_flops(vox[3], 4 * c, 4 * c)
    total += _res_block_flops(vox[5], 16 * c, 16 * c)
    for lvl, cin, cout in ((4, 16 * c, 8 * c), (3, 8 * c, 4 * c), (2, 4 * c, 2 * c),
                           (1, 2 * c, c), (0, c, c)):
        total += _conv_flops(vox[lvl + 1], cin, cout, 2)  # transposed conv, per input voxel
        total += _res_block_flops(vox[lvl], 2 * cout, cout)
    total += _conv_flops(vox[0], c, config.out_channels, 1)
    return int(total)


def summarize(config: ModelConfig, input_size=None) -> dict:
    size = tuple(input_size or config.input_size)
    return {
        "config": config.to_dict(),
        "input_size": list(size),
        "level_shapes": [list(s) for s in config.level_shapes(size)],
        "output_shape": [config.out_channels] + list(size),
        "total_layers": config.total_layers,
        "parameters": count_parameters(config),
        "flops": count_flops(config, size),
        "flop_convention": "multiply-add = 2 FLOPs; linear, attention products, convolutions",
    }
