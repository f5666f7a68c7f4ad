"""Procedural toy dataset: four-channel volumes with three nested ellipsoids."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from ..volume_io import CaseEntry, DatasetManifest, SegmentationMask, Volume, save_mask, save_volume, split_folds

# mean intensity per channel (T1, T1c, T2, FLAIR) for brain, edema, core and enhancing regions
CONTRASTS = np.array([
    [1.0, 0.8, 0.6, 0.9],
    [1.0, 1.0, 0.9, 2.0],
    [1.0, 1.8, 1.4, 1.2],
    [1.0, 2.0, 1.5, 1.3],
], dtype=np.float64)
NOISE = 0.05


def _ellipsoid(grid, center, radii) -> np.ndarray:
    return sum(((g - c) / r) ** 2 for g, c, r in zip(grid, center, radii)) <= 1.0


def toy_case(shape=(48, 48, 48), rng: np.random.Generator = None) -> tuple:
    """One ``(Volume, SegmentationMask)`` pair; labels 2 (edema) ⊃ 1 (core) ⊃ 4 (enhancing)."""
    rng = rng if rng is not None else np.random.default_rng(0)
    shape = tuple(int(s) for s in shape)
    grid = np.meshgrid(*(np.arange(s, dtype=np.float64) for s in shape), indexing="ij")
    mid = np.array([(s - 1) / 2 for s in shape])
    ext = np.array(shape, dtype=np.float64)
    brain = _ellipsoid(grid, mid, 0.46 * ext)
    center = mid + rng.uniform(-0.08, 0.08, 3) * ext
    radii = rng.uniform(0.22, 0.3, 3) * ext
    wt = _ellipsoid(grid, center, radii) & brain
    tc = _ellipsoid(grid, center, 0.65 * radii) & wt
    et = _ellipsoid(grid, center, 0.35 * radii) & tc
    labels = np.zeros(shape, dtype=np.uint8)
    labels[wt] = 2
    labels[tc] = 1
    labels[et] = 4
    region = np.select([et, tc, wt, brain], [3, 2, 1, 0], default=-1)
    img = np.zeros((4,) + shape, dtype=np.float64)
    for c in range(4):
        mean = np.where(region >= 0, CONTRASTS[c][np.clip(region, 0, 3)], 0.0)
        img[c] = np.where(brain, mean + NOISE * rng.standard_normal(shape), 0.0)
    return Volume(img.astype(np.float32)), SegmentationMask(labels)


def make_toy_dataset(out_dir, n_cases: int = 2, shape=(48, 48, 48), seed: int = 0, k: int = 2) -> DatasetManifest:
    """Write ``caseNNN_image.svol`` / ``caseNNN_mask.svol`` and ``manifest.json`` under ``out_dir``.

    Folds are assigned with ``split_folds`` when there are at least ``k`` cases.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(n_cases):
        vol, mask = toy_case(shape, np.random.default_rng([seed, i]))
        cid = f"case{i:03d}"
        save_volume(vol, out / f"{cid}_image.svol")
        save_mask(mask, out / f"{cid}_mask.svol")
        entries.append(CaseEntry(cid, f"{cid}_image.svol", f"{cid}_mask.svol"))
    ids = [e.id for e in entries]
    folds = split_folds(ids, k=k, seed=seed) if k >= 1 and n_cases >= k else {}
    manifest = DatasetManifest(entries, folds, root=out)
    manifest.save(out / "manifest.json")
    return manifest
