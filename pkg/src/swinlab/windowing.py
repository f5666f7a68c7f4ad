"""Geometry of 3D window attention.

Token grids are channels-last ``(B, H, W, D, C)``. Windows may be non-cubic
internally (a stage whose grid is thinner than ``M`` along one axis uses the
grid extent there), although configured windows are always ``M x M x M``.
"""
from __future__ import annotations

from dataclasses import dataclass
from itertools import product
from typing import Optional, Sequence

import numpy as np

from .autodiff import Tensor, as_tensor
from .autodiff import functional as F

NEG_LARGE = -1e9


def _triple(v) -> tuple:
    if isinstance(v, (tuple, list, np.ndarray)):
        return tuple(int(a) for a in v)
    return (int(v),) * 3


@dataclass(frozen=True)
class WindowConfig:
    window: tuple
    shift: tuple
    grid: tuple  # padded token extents

    def __post_init__(self):
        for m, s, g in zip(self.window, self.shift, self.grid):
            if not 0 <= s < m:
                raise ValueError(f"shift {self.shift} must satisfy 0 <= s < window {self.window}")
            if g % m:
                raise ValueError(f"padded grid {self.grid} is not a multiple of window {self.window}")

    @property
    def num_windows(self) -> int:
        return int(np.prod([g // m for g, m in zip(self.grid, self.window)]))

    @property
    def tokens_per_window(self) -> int:
        return int(np.prod(self.window))


@dataclass
class WindowSet:
    """Windows ``(B * num_windows, T, C)`` plus the grid they came from."""

    windows: Tensor
    grid: tuple
    window: tuple
    batch: int

    @property
    def num_windows(self) -> int:
        return int(np.prod([g // m for g, m in zip(self.grid, self.window)]))


@dataclass(frozen=True)
class PadRecord:
    original: tuple
    padded: tuple

    @property
    def is_identity(self) -> bool:
        return self.original == self.padded


def effective_window(grid: Sequence[int], window_size: int, shifted: bool) -> tuple:
    """Clamp the window to thin grids and disable shifting on those axes.

    Returns ``(window, shift)`` as per-axis tuples.
    """
    win, shift = [], []
    for g in grid:
        if g <= window_size:
            win.append(int(g))
            shift.append(0)
        else:
            win.append(int(window_size))
            shift.append(window_size // 2 if shifted else 0)
    return tuple(win), tuple(shift)


def pad_to_window_multiple(x, window) -> tuple:
    """Zero-pad the spatial axes of ``(B, H, W, D, C)`` up to multiples of the window."""
    x = as_tensor(x)
    window = _triple(window)
    grid = tuple(x.shape[1:4])
    padded = tuple(-(-g // m) * m for g, m in zip(grid, window))
    widths = [(0, 0)] + [(0, p - g) for g, p in zip(grid, padded)] + [(0, 0)]
    return F.pad(x, widths), PadRecord(grid, padded)


def crop_padding(x, record: PadRecord):
    if record.is_identity:
        return x
    h, w, d = record.original
    return as_tensor(x)[:, :h, :w, :d, :]


def window_partition(x, window) -> WindowSet:
    """``(B, H, W, D, C)`` -> ``(B * nW, prod(window), C)``, windows in row-major grid order."""
    x = as_tensor(x)
    window = _triple(window)
    b, h, w, d, c = x.shape
    if h % window[0] or w % window[1] or d % window[2]:
        raise ValueError(f"grid {(h, w, d)} is not a multiple of window {window}; pad first")
    m0, m1, m2 = window
    y = x.reshape(b, h // m0, m0, w // m1, m1, d // m2, m2, c)
    y = y.permute(0, 1, 3, 5, 2, 4, 6, 7)
    y = y.reshape(-1, m0 * m1 * m2, c)
    return WindowSet(y, (h, w, d), window, b)


def window_reverse(ws: WindowSet) -> Tensor:
    """Exact inverse of :func:`window_partition`."""
    h, w, d = ws.grid
    m0, m1, m2 = ws.window
    nw = (h // m0) * (w // m1) * (d // m2)
    t = ws.windows
    if t.shape[0] != ws.batch * nw or t.shape[1] != m0 * m1 * m2:
        raise ValueError(
            f"window tensor {t.shape} does not match grid {ws.grid} / window {ws.window} "
            f"with batch {ws.batch}"
        )
    c = t.shape[2]
    y = t.reshape(ws.batch, h // m0, w // m1, d // m2, m0, m1, m2, c)
    y = y.permute(0, 1, 4, 2, 5, 3, 6, 7)
    return y.reshape(ws.batch, h, w, d, c)


def cyclic_shift(x, shift, inverse: bool = False):
    """Torus roll of the spatial axes: by ``-shift`` forward, ``+shift`` for the inverse."""
    shift = _triple(shift)
    if not any(shift):
        return as_tensor(x)
    sign = 1 if inverse else -1
    return F.roll(as_tensor(x), tuple(sign * s for s in shift), (1, 2, 3))


def _partition_array(a: np.ndarray, window) -> np.ndarray:
    """numpy window partition of a ``(H, W, D)`` array -> ``(nW, T)``."""
    h, w, d = a.shape
    m0, m1, m2 = window
    y = a.reshape(h // m0, m0, w // m1, m1, d // m2, m2).transpose(0, 2, 4, 1, 3, 5)
    return y.reshape(-1, m0 * m1 * m2)


def region_ids(grid, window, shift, valid: Optional[Sequence[int]] = None) -> np.ndarray:
    """Per-window region labels ``(nW, T)`` after cyclic shift and partition.

    Each axis of the shifted grid is cut into ``[0, -M)``, ``[-M, -s)`` and
    ``[-s, 0)`` (27 regions at most); padding tokens (beyond ``valid``) get a
    separate label so they never share a region with real tokens.
    """
    grid, window, shift = _triple(grid), _triple(window), _triple(shift)
    cfg = WindowConfig(window, shift, grid)
    labels = np.zeros(grid, dtype=np.int64)
    for axis, (g, m, s) in enumerate(zip(grid, window, shift)):
        if s == 0:
            continue
        seg = np.zeros(g, dtype=np.int64)
        seg[g - m : g - s] = 1
        seg[g - s :] = 2
        shape = [1, 1, 1]
        shape[axis] = g
        labels = labels * 3 + seg.reshape(shape)
    if valid is not None:
        valid = _triple(valid)
        pad = np.zeros(grid, dtype=bool)
        pad[valid[0] :, :, :] = True
        pad[:, valid[1] :, :] = True
        pad[:, :, valid[2] :] = True
        if any(shift):
            pad = np.roll(pad, tuple(-s for s in shift), axis=(0, 1, 2))
        labels = labels * 2 + pad
    return _partition_array(labels, cfg.window)


def mask_from_ids(ids: np.ndarray, dtype=np.float32) -> np.ndarray:
    """Additive mask ``(nW, T, T)``: 0 within a region, ``NEG_LARGE`` across."""
    same = ids[:, :, None] == ids[:, None, :]
    return np.where(same, 0.0, NEG_LARGE).astype(dtype)


def needs_mask(grid, shift, valid=None) -> bool:
    return any(_triple(shift)) or (valid is not None and _triple(valid) != _triple(grid))


def compute_shift_mask(grid, window_size, shift, valid=None, dtype=np.float32) -> np.ndarray:
    """Additive attention mask for every window of a shifted, padded grid."""
    grid = _triple(grid)
    window, shift = _triple(window_size), _triple(shift)
    for m, s in zip(window, shift):
        if s >= m:
            raise ValueError(f"shift {shift} must be smaller than window {window}")
    return mask_from_ids(region_ids(grid, window, shift, valid), dtype)


def window_count(grid, window_size: int) -> int:
    """Number of windows covering ``grid`` after padding to multiples of the window."""
    return int(np.prod([-(-g // window_size) for g in _triple(grid)]))


def window_origins(grid, window) -> list:
    """Grid coordinate of each window's first token, in partition order."""
    grid, window = _triple(grid), _triple(window)
    return list(product(*(range(0, g, m) for g, m in zip(grid, window))))
