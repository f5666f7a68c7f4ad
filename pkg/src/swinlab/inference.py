"""Sliding-window inference, ensembling and label fusion."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from itertools import product
from pathlib import Path
from typing import Callable, Sequence, Union

import numpy as np
from scipy.special import expit

from .volume_io import Volume, channels_to_labels, pad_to_size

Predictor = Callable[[np.ndarray], np.ndarray]
BLEND_MODES = ("uniform", "gaussian")


class NonFiniteOutputError(FloatingPointError):
    """The model produced NaN or Inf on a tile."""


def _triple(v) -> tuple:
    if isinstance(v, (int, np.integer)):
        return (int(v),) * 3
    return tuple(int(a) for a in v)


def _check_overlap(overlap: float) -> None:
    if not 0.0 <= overlap < 1.0:
        raise ValueError(f"overlap must satisfy 0 <= overlap < 1, got {overlap}")


def tile_step(roi, overlap: float) -> tuple:
    """``max(1, floor(roi * (1 - overlap)))`` per axis; overlap is a fraction of the roi."""
    _check_overlap(overlap)
    return tuple(max(1, int(math.floor(r * (1.0 - overlap) + 1e-9))) for r in _triple(roi))


def plan_tiles(extents, roi, overlap: float = 0.7) -> list:
    """Tile origins in lexicographic order; the last origin per axis is clamped to ``extent - roi``."""
    extents, roi = _triple(extents), _triple(roi)
    if any(r > e for r, e in zip(roi, extents)):
        raise ValueError(f"roi {roi} larger than (padded) volume {extents}")
    if min(roi) < 1:
        raise ValueError(f"roi must be positive, got {roi}")
    axes = []
    for e, r, s in zip(extents, roi, tile_step(roi, overlap)):
        starts = list(range(0, e - r + 1, s))
        if starts[-1] != e - r:
            starts.append(e - r)
        axes.append(starts)
    return list(product(*axes))


def blend_weights(roi, mode: str = "uniform", sigma_scale: float = 1.0 / 8) -> np.ndarray:
    """Per-voxel tile weight: ones, or a separable gaussian with sigma = roi * sigma_scale."""
    roi = _triple(roi)
    if mode == "uniform":
        return np.ones(roi, dtype=np.float64)
    if mode != "gaussian":
        raise ValueError(f"blend mode must be one of {BLEND_MODES}, got {mode!r}")
    w = np.ones(roi, dtype=np.float64)
    for axis, r in enumerate(roi):
        c = (r - 1) / 2.0
        sigma = max(r * sigma_scale, 1e-6)
        g = np.exp(-((np.arange(r) - c) ** 2) / (2 * sigma**2))
        shape = [1, 1, 1]
        shape[axis] = r
        w = w * g.reshape(shape)
    return w / w.max()


@dataclass
class SlidingWindowPlan:
    roi: tuple = (128, 128, 128)
    overlap: float = 0.7
    blend: str = "uniform"
    sigma_scale: float = 1.0 / 8

    def __post_init__(self):
        self.roi = _triple(self.roi)
        _check_overlap(self.overlap)
        if self.blend not in BLEND_MODES:
            raise ValueError(f"blend mode must be one of {BLEND_MODES}, got {self.blend!r}")

    @property
    def step(self) -> tuple:
        return tile_step(self.roi, self.overlap)

    def origins(self, extents) -> list:
        return plan_tiles(extents, self.roi, self.overlap)

    def to_dict(self) -> dict:
        return {
            "roi": list(self.roi),
            "overlap": self.overlap,
            "overlap_interpretation": "fraction of roi",
            "step": list(self.step),
            "blend": self.blend,
            "gaussian_sigma": [r * self.sigma_scale for r in self.roi] if self.blend == "gaussian" else None,
        }


def as_predictor(model) -> Predictor:
    """Models expose ``predict_logits``; plain callables are used as is."""
    if hasattr(model, "predict_logits"):
        return model.predict_logits
    if callable(model):
        return model
    raise TypeError(f"cannot use {type(model).__name__} as a predictor")


def sliding_window_infer(volume: Union[Volume, np.ndarray], model, plan: SlidingWindowPlan) -> np.ndarray:
    """Sigmoid probabilities ``(out, H, W, D)`` blended over overlapping tiles.

    Each tile's probabilities are accumulated with the blend weights in
    lexicographic tile order; the result is the weighted mean. Volumes smaller
    than the roi are zero-padded symmetrically and cropped back.
    """
    data = volume.data if isinstance(volume, Volume) else np.asarray(volume, dtype=np.float32)
    if data.ndim != 4:
        raise ValueError(f"expected (C, H, W, D) volume, got shape {data.shape}")
    predict = as_predictor(model)
    shape = data.shape[1:]
    padded = pad_to_size(data, plan.roi)
    offset = tuple((p - s) // 2 for p, s in zip(padded.shape[1:], shape))
    weight = blend_weights(plan.roi, plan.blend, plan.sigma_scale)
    acc = None
    norm = np.zeros(padded.shape[1:], dtype=np.float64)
    for origin in plan.origins(padded.shape[1:]):
        sl = tuple(slice(o, o + r) for o, r in zip(origin, plan.roi))
        tile = np.ascontiguousarray(padded[(slice(None),) + sl][None])
        logits = np.asarray(predict(tile))
        if not np.all(np.isfinite(logits)):
            raise NonFiniteOutputError(f"non-finite model output on tile at origin {tuple(origin)}")
        if logits.ndim != 5 or logits.shape[0] != 1 or logits.shape[2:] != tuple(plan.roi):
            raise ValueError(f"model returned shape {logits.shape} for tile {tile.shape}")
        probs = expit(logits[0].astype(np.float64))
        if acc is None:
            acc = np.zeros((probs.shape[0],) + padded.shape[1:], dtype=np.float64)
        acc[(slice(None),) + sl] += probs * weight
        norm[sl] += weight
    out = acc / norm
    crop = tuple(slice(o, o + s) for o, s in zip(offset, shape))
    return np.ascontiguousarray(out[(slice(None),) + crop], dtype=np.float32)


def average_probabilities(members: Sequence[np.ndarray]) -> np.ndarray:
    """Arithmetic mean with float64 accumulation in the given order."""
    if not members:
        raise ValueError("no member outputs to average")
    acc = np.zeros(members[0].shape, dtype=np.float64)
    for i, m in enumerate(members):
        if m.shape != acc.shape:
            raise ValueError(f"ensemble member {i} output shape {m.shape} != {acc.shape}")
        acc += m
    return (acc / len(members)).astype(np.float32)


@dataclass
class EnsembleSpec:
    """Checkpoint paths; members run in sorted path order so the sum order is canonical."""

    paths: list

    def __post_init__(self):
        if not self.paths:
            raise ValueError("an ensemble needs at least one checkpoint")
        self.paths = sorted(str(p) for p in self.paths)


def _member_models(members):
    if isinstance(members, EnsembleSpec):
        from .training.checkpoint import load_model

        for path in members.paths:
            yield load_model(path)
    else:
        yield from members


def ensemble_infer(volume, members, plan: SlidingWindowPlan) -> np.ndarray:
    """Mean of per-member sliding-window probabilities.

    ``members`` is an :class:`EnsembleSpec` (checkpoints loaded one at a time)
    or a sequence of models/predictors used in the given order.
    """
    acc, count = None, 0
    for i, model in enumerate(_member_models(members)):
        probs = sliding_window_infer(volume, model, plan)
        if acc is None:
            acc = np.zeros(probs.shape, dtype=np.float64)
        elif probs.shape != acc.shape:
            raise ValueError(f"ensemble member {i} output shape {probs.shape} != {acc.shape}")
        acc += probs
        count += 1
    if acc is None:
        raise ValueError("an ensemble needs at least one member")
    return (acc / count).astype(np.float32)


def fuse_labels(probs: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Binarize (ET, WT, TC) at ``p > threshold`` and decode with precedence ET > TC > WT."""
    probs = np.asarray(probs)
    if probs.ndim != 4 or probs.shape[0] != 3:
        raise ValueError(f"expected (3, H, W, D) probabilities, got {probs.shape}")
    return channels_to_labels(probs > threshold)


def write_inference_manifest(path, plan: SlidingWindowPlan, checkpoints: Sequence[str], inputs: Sequence[str],
                             outputs: dict, threshold: float = 0.5, extra: dict = None) -> None:
    record = {
        "plan": plan.to_dict(),
        "checkpoints": sorted(str(c) for c in checkpoints),
        "aggregation": "mean of sigmoid probabilities",
        "threshold": threshold,
        "label_precedence": ["ET", "TC", "WT"],
        "inputs": [str(i) for i in inputs],
        "outputs": outputs,
    }
    if extra:
        record.update(extra)
    Path(path).write_text(json.dumps(record, indent=2) + "\n")
