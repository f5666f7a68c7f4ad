"""Dice score, Hausdorff distance and evaluation reports."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .volume_io import MASK_CHANNELS, labels_to_channels

_SIX_NEIGHBORS = ndimage.generate_binary_structure(3, 1)


def dice_score(pred, gt) -> float:
    """``2|P ∩ G| / (|P| + |G|)``; two empty masks score 1."""
    p, g = np.asarray(pred, bool), np.asarray(gt, bool)
    if p.shape != g.shape:
        raise ValueError(f"mask shapes differ: {p.shape} vs {g.shape}")
    total = int(p.sum()) + int(g.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, g).sum()) / total


def boundary_voxels(mask) -> np.ndarray:
    """Foreground voxels with a six-connected background neighbour or on the volume edge."""
    m = np.asarray(mask, bool)
    interior = ndimage.binary_erosion(m, structure=_SIX_NEIGHBORS, border_value=0)
    return np.argwhere(m & ~interior)


def _directed(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    _, idx = cKDTree(dst).query(src, k=1)
    # recompute from the chosen neighbour so values do not depend on tree internals
    return np.sqrt(((src - dst[idx]) ** 2).sum(-1))


def hausdorff_distance(pred, gt, spacing=(1.0, 1.0, 1.0), percentile: float = 95) -> float:
    """Symmetric boundary Hausdorff distance in spacing units.

    ``percentile=100`` is the classic maximum; 95 is the robust variant. The
    result is ``max(q(d(P->G)), q(d(G->P)))``. Returns NaN when either mask is
    empty (undefined; reports skip and count these).
    """
    if not 0 < percentile <= 100:
        raise ValueError(f"percentile must be in (0, 100], got {percentile}")
    p, g = np.asarray(pred, bool), np.asarray(gt, bool)
    if p.shape != g.shape:
        raise ValueError(f"mask shapes differ: {p.shape} vs {g.shape}")
    if not p.any() or not g.any():
        return float("nan")
    sp = np.asarray(spacing, dtype=np.float64)
    bp = boundary_voxels(p) * sp
    bg = boundary_voxels(g) * sp
    return float(max(np.percentile(_directed(bp, bg), percentile),
                     np.percentile(_directed(bg, bp), percentile)))


def _channels(mask) -> np.ndarray:
    m = np.asarray(mask)
    return m.astype(bool) if m.ndim == 4 else labels_to_channels(m).astype(bool)


@dataclass
class CaseMetrics:
    id: str
    dice: dict
    hausdorff: dict


def evaluate_case(case_id: str, pred, gt, spacing=(1.0, 1.0, 1.0), percentile: float = 95) -> CaseMetrics:
    """Per-region Dice and Hausdorff for label maps or (ET, WT, TC) channel masks."""
    pc, gc = _channels(pred), _channels(gt)
    if pc.shape != gc.shape:
        raise ValueError(f"prediction {pc.shape} and ground truth {gc.shape} differ")
    dice = {name: dice_score(pc[i], gc[i]) for i, name in enumerate(MASK_CHANNELS)}
    hd = {name: hausdorff_distance(pc[i], gc[i], spacing, percentile) for i, name in enumerate(MASK_CHANNELS)}
    return CaseMetrics(case_id, dice, hd)


def _finite_or_none(v: float):
    return None if v is None or math.isnan(v) else float(v)


def hausdorff_label(percentile: float) -> str:
    return "HD" if percentile == 100 else f"HD{percentile:g}"


@dataclass
class EvaluationReport:
    cases: list
    hausdorff_percentile: float = 95

    def aggregate(self) -> dict:
        dice, hd, undefined = {}, {}, {}
        for name in MASK_CHANNELS:
            vals = [c.dice[name] for c in self.cases]
            dice[name] = float(np.mean(vals)) if vals else float("nan")
            h = [c.hausdorff[name] for c in self.cases]
            good = [v for v in h if not math.isnan(v)]
            hd[name] = float(np.mean(good)) if good else float("nan")
            undefined[name] = len(h) - len(good)
        dice["Avg"] = float(np.mean([dice[n] for n in MASK_CHANNELS]))
        return {"dice": dice, "hausdorff": hd, "hausdorff_undefined": undefined}

    def to_dict(self) -> dict:
        agg = self.aggregate()
        return {
            "hausdorff_variant": hausdorff_label(self.hausdorff_percentile),
            "hausdorff_percentile": self.hausdorff_percentile,
            "cases": [
                {"id": c.id, "dice": dict(c.dice),
                 "hausdorff": {k: _finite_or_none(v) for k, v in c.hausdorff.items()}}
                for c in self.cases
            ],
            "mean": {
                "dice": agg["dice"],
                "hausdorff": {k: _finite_or_none(v) for k, v in agg["hausdorff"].items()},
            },
            "hausdorff_undefined": agg["hausdorff_undefined"],
        }

    def save_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    def save_csv(self, path) -> None:
        """One row per case plus a ``mean`` row: Dice ET, WT, TC, Avg then Hausdorff columns."""
        label = hausdorff_label(self.hausdorff_percentile)
        header = ["case", *MASK_CHANNELS, "Avg", *(f"{label}_{n}" for n in MASK_CHANNELS)]
        agg = self.aggregate()

        def fmt(v):
            return "" if v is None or math.isnan(v) else f"{v:.6g}"

        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for c in self.cases:
                avg = float(np.mean([c.dice[n] for n in MASK_CHANNELS]))
                w.writerow([c.id, *(fmt(c.dice[n]) for n in MASK_CHANNELS), fmt(avg),
                            *(fmt(c.hausdorff[n]) for n in MASK_CHANNELS)])
            w.writerow(["mean", *(fmt(agg["dice"][n]) for n in MASK_CHANNELS), fmt(agg["dice"]["Avg"]),
                        *(fmt(agg["hausdorff"][n]) for n in MASK_CHANNELS)])


def write_fold_table(rows: Sequence[tuple], path) -> None:
    """Cross-validation summary: ``(name, {ET, WT, TC})`` per fold, then the mean row."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["fold", *MASK_CHANNELS, "Avg"])
        for name, d in rows:
            vals = [d[n] for n in MASK_CHANNELS]
            w.writerow([name, *(f"{v:.6g}" for v in vals), f"{np.mean(vals):.6g}"])
        if rows:
            means = [float(np.mean([d[n] for _, d in rows])) for n in MASK_CHANNELS]
            w.writerow(["mean", *(f"{v:.6g}" for v in means), f"{np.mean(means):.6g}"])
