"""Hierarchical shifted-window transformer encoder."""
from __future__ import annotations

import functools
import math
from typing import Optional

import numpy as np

from ..autodiff import Module, Tensor, is_grad_enabled
from ..autodiff import functional as F
from ..autodiff.nn import Conv3d, Init, LayerNorm, Linear
from .. import windowing as W

# windows processed together when the tape is off
_INFER_WINDOW_CHUNK = 64


@functools.lru_cache(maxsize=32)
def relative_position_index(window: tuple, window_size: int) -> np.ndarray:
    """Flat index into a ``(2M-1)^3`` bias table for every token pair of a window."""
    coords = np.stack(np.meshgrid(*(np.arange(m) for m in window), indexing="ij")).reshape(3, -1)
    rel = coords[:, :, None] - coords[:, None, :] + (window_size - 1)
    span = 2 * window_size - 1
    idx = rel[0] * span * span + rel[1] * span + rel[2]
    idx.setflags(write=False)
    return idx


class PatchEmbed(Module):
    """Non-overlapping 2x2x2 patches projected to ``embed_dim`` (stride-2 convolution)."""

    def __init__(self, init: Init, in_channels: int, embed_dim: int):
        self.proj = Conv3d(init, in_channels, embed_dim, kernel=2, stride=2, bias=True)

    def forward(self, x: Tensor) -> Tensor:
        """(B, S, H, W, D) -> (B, C, H/2, W/2, D/2)."""
        pads = [(0, 0), (0, 0)] + [(0, s % 2) for s in x.shape[2:]]
        return self.proj(F.pad(x, pads))

    def forward_gather(self, x: Tensor) -> Tensor:
        """Same map written as patch gather + linear projection."""
        pads = [(0, 0), (0, 0)] + [(0, s % 2) for s in x.shape[2:]]
        x = F.pad(x, pads)
        b, s, h, w, d = x.shape
        p = x.reshape(b, s, h // 2, 2, w // 2, 2, d // 2, 2)
        p = p.permute(0, 2, 4, 6, 1, 3, 5, 7).reshape(b, h // 2, w // 2, d // 2, s * 8)
        wmat = self.proj.weight.reshape(self.proj.weight.shape[0], -1).permute(1, 0)
        out = F.linear(p, wmat, self.proj.bias)
        return out.permute(0, 4, 1, 2, 3)


class WindowAttention(Module):
    """Multi-head self-attention confined to each window.

    Logits are ``q k^T / sqrt(d)``, plus the learned relative position bias when
    enabled, plus the additive region mask for shifted/padded windows.
    """

    def __init__(self, init: Init, dim: int, num_heads: int, window_size: int, use_bias: bool = True):
        if dim % num_heads:
            raise ValueError(f"width {dim} not divisible by {num_heads} heads")
        self.dim = dim
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.window_size = window_size
        self.qkv = Linear(init, dim, 3 * dim)
        self.relative_position_bias_table = (
            init.trunc_normal(((2 * window_size - 1) ** 3, num_heads)) if use_bias else None
        )
        self.proj = Linear(init, dim, dim)

    def position_bias(self, window: tuple) -> Optional[Tensor]:
        if self.relative_position_bias_table is None:
            return None
        t = int(np.prod(window))
        idx = relative_position_index(tuple(window), self.window_size)
        b = F.take(self.relative_position_bias_table, idx.reshape(-1))
        return b.reshape(t, t, self.num_heads).permute(2, 0, 1)

    def _attend(self, x: Tensor, bias: Optional[Tensor], mask: Optional[np.ndarray]) -> Tensor:
        nb, t, c = x.shape
        h, d = self.num_heads, self.head_dim
        qkv = self.qkv(x).reshape(nb, t, 3, h, d).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        logits = F.matmul(F.scale(q, 1.0 / math.sqrt(d)), k.permute(0, 1, 3, 2))
        if bias is not None:
            logits = logits + bias
        if mask is not None:
            nw = mask.shape[0]
            m = Tensor(mask.astype(logits.dtype, copy=False)[None, :, None])
            logits = (logits.reshape(nb // nw, nw, h, t, t) + m).reshape(nb, h, t, t)
        attn = F.softmax(logits, axis=-1)
        out = F.matmul(attn, v).permute(0, 2, 1, 3).reshape(nb, t, c)
        return self.proj(out)

    def forward(self, ws: W.WindowSet, mask_ids: Optional[np.ndarray] = None,
                mask: Optional[np.ndarray] = None) -> W.WindowSet:
        """Attend within windows; ``mask_ids`` (nW, T) or ``mask`` (nW, T, T) restrict pairs."""
        x = ws.windows
        nw = ws.num_windows
        t = x.shape[1]
        if mask is not None and mask.shape != (nw, t, t):
            raise ValueError(f"mask shape {mask.shape} != ({nw}, {t}, {t})")
        if mask_ids is not None and mask_ids.shape != (nw, t):
            raise ValueError(f"mask ids shape {mask_ids.shape} != ({nw}, {t})")
        bias = self.position_bias(ws.window)
        recording = is_grad_enabled() and (
            x.requires_grad or any(p.requires_grad for p in self.parameters())
        )
        if recording or x.shape[0] <= _INFER_WINDOW_CHUNK:
            if mask is None and mask_ids is not None:
                mask = W.mask_from_ids(mask_ids, x.dtype)
            return W.WindowSet(self._attend(x, bias, mask), ws.grid, ws.window, ws.batch)

        out = np.empty(x.shape, dtype=x.dtype)
        for i0 in range(0, x.shape[0], _INFER_WINDOW_CHUNK):
            i1 = min(x.shape[0], i0 + _INFER_WINDOW_CHUNK)
            rows = np.arange(i0, i1) % nw
            m = None
            if mask is not None:
                m = mask[rows]
            elif mask_ids is not None:
                m = W.mask_from_ids(mask_ids[rows], x.dtype)
            # one pseudo-batch per chunk: each chunk row carries its own mask
            out[i0:i1] = self._attend(Tensor(x.data[i0:i1]), bias, m).data
        return W.WindowSet(Tensor(out), ws.grid, ws.window, ws.batch)


class Mlp(Module):
    def __init__(self, init: Init, dim: int, hidden: int):
        self.fc1 = Linear(init, dim, hidden)
        self.fc2 = Linear(init, hidden, dim)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


class SwinBlock(Module):
    """Pre-norm window attention and MLP, each with a residual connection.

    ``shifted`` blocks roll the grid by ``shift_size`` before partitioning and
    roll back afterwards; the region mask keeps wrapped-around tokens apart.
    """

    def __init__(self, init: Init, dim: int, num_heads: int, window_size: int, shifted: bool,
                 mlp_ratio: float = 4.0, use_bias: bool = True, shift_size: Optional[int] = None):
        self.norm1 = LayerNorm(init, dim)
        self.attn = WindowAttention(init, dim, num_heads, window_size, use_bias)
        self.norm2 = LayerNorm(init, dim)
        self.mlp = Mlp(init, dim, int(dim * mlp_ratio))
        self.window_size = window_size
        self.shift_size = (window_size // 2 if shift_size is None else shift_size) if shifted else 0

    def geometry(self, grid) -> tuple:
        window, shift = W.effective_window(grid, self.window_size, shifted=self.shift_size > 0)
        return window, tuple(self.shift_size if s else 0 for s in shift)

    def forward(self, x: Tensor) -> Tensor:
        window, shift = self.geometry(x.shape[1:4])
        h = self.norm1(x)
        h, rec = W.pad_to_window_multiple(h, window)
        ids = None
        if W.needs_mask(rec.padded, shift, rec.original):
            ids = W.region_ids(rec.padded, window, shift, valid=rec.original)
        h = W.cyclic_shift(h, shift)
        ws = self.attn(W.window_partition(h, window), mask_ids=ids)
        h = W.cyclic_shift(W.window_reverse(ws), shift, inverse=True)
        x = x + W.crop_padding(h, rec)
        return x + self.mlp(self.norm2(x))


class PatchMerging(Module):
    """Concatenate each 2x2x2 neighbourhood (8c features), normalize, project to 2c."""

    def __init__(self, init: Init, dim: int):
        self.norm = LayerNorm(init, 8 * dim)
        self.reduction = Linear(init, 8 * dim, 2 * dim, bias=False)

    def forward(self, x: Tensor) -> Tensor:
        pads = [(0, 0)] + [(0, s % 2) for s in x.shape[1:4]] + [(0, 0)]
        x = F.pad(x, pads)
        b, h, w, d, c = x.shape
        y = x.reshape(b, h // 2, 2, w // 2, 2, d // 2, 2, c)
        y = y.permute(0, 1, 3, 5, 2, 4, 6, 7).reshape(b, h // 2, w // 2, d // 2, 8 * c)
        return self.reduction(self.norm(y))


class SwinStage(Module):
    def __init__(self, init: Init, dim: int, depth: int, num_heads: int, window_size: int,
                 mlp_ratio: float, use_bias: bool, shift_size: Optional[int] = None):
        self.blocks = [
            SwinBlock(init, dim, num_heads, window_size, shifted=bool(i % 2), mlp_ratio=mlp_ratio,
                      use_bias=use_bias, shift_size=shift_size)
            for i in range(depth)
        ]
        self.downsample = PatchMerging(init, dim)

    def forward(self, x: Tensor) -> Tensor:
        for blk in self.blocks:
            x = blk(x)
        return self.downsample(x)


def to_channels_first(x: Tensor) -> Tensor:
    return x.permute(0, 4, 1, 2, 3)


def to_channels_last(x: Tensor) -> Tensor:
    return x.permute(0, 2, 3, 4, 1)
