"""The assembled segmentation network."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..autodiff import Module, Tensor, no_grad
from ..autodiff import functional as F
from ..autodiff.nn import Init
from .config import ModelConfig, padded_input
from .decoder import Decoder
from .swin import PatchEmbed, SwinStage, to_channels_first, to_channels_last


@dataclass
class StageOutputs:
    """Six feature levels, channels-first, from full resolution down to 1/32."""

    levels: list

    @property
    def shapes(self) -> list:
        return [tuple(t.shape[1:]) for t in self.levels]


class SwinUNETR(Module):
    """Shifted-window transformer encoder feeding a residual convolutional decoder.

    Calling the model maps ``(B, S, H, W, D)`` to logits ``(B, out, H, W, D)``;
    the sigmoid is left to the consumer (loss, inference).
    """

    def __init__(self, config: Optional[ModelConfig] = None, init_mode: str = "random",
                 shift_size: Optional[int] = None):
        self.config = config = config or ModelConfig()
        init = Init(config.seed, config.np_dtype, init_mode)
        c = config.embed_dim
        self.patch_embed = PatchEmbed(init, config.in_channels, c)
        self.stages = [
            SwinStage(init, config.stage_width(i), config.depths[i], config.num_heads[i],
                      config.window_size, config.mlp_ratio, config.use_relative_position_bias,
                      shift_size=shift_size)
            for i in range(4)
        ]
        self.decoder = Decoder(init, config.in_channels, c, config.out_channels)
        self.assign_names()

    # -- encoder -----------------------------------------------------------
    def encoder_forward(self, x: Tensor) -> StageOutputs:
        if x.ndim != 5 or x.shape[1] != self.config.in_channels:
            raise ValueError(
                f"expected (B, {self.config.in_channels}, H, W, D) input, got {x.shape}"
            )
        target = padded_input(x.shape[2:])
        x = F.pad(x, [(0, 0), (0, 0)] + [(0, t - s) for s, t in zip(x.shape[2:], target)])
        emb = self.patch_embed(x)
        levels = [x, emb]
        z = to_channels_last(emb)
        del emb
        for stage in self.stages:
            z = stage(z)
            levels.append(to_channels_first(z))
        return StageOutputs(levels)

    def decoder_forward(self, stages: StageOutputs) -> Tensor:
        """Logits at the padded input resolution; ``stages`` is left intact."""
        return self.decoder(list(stages.levels))

    def forward(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self.config.np_dtype))
        h, w, d = x.shape[2:]
        # hand the level list straight to the decoder so it can release features early
        logits = self.decoder(self.encoder_forward(x).levels)
        if logits.shape[2:] != (h, w, d):
            logits = logits[:, :, :h, :w, :d]
        return logits

    def predict_logits(self, x: np.ndarray) -> np.ndarray:
        """Tape-free forward on a raw array."""
        with no_grad():
            return self.forward(Tensor(np.asarray(x, dtype=self.config.np_dtype))).data

    __call__ = Module.__call__
