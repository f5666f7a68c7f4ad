"""Volumes, masks, the SVOL container, normalization, augmentation and dataset manifests.

SVOL v1 layout: a 4-byte little-endian unsigned header length, the UTF-8 JSON
header, then the raw little-endian payload (``f32`` for images, ``u8`` for
masks) in channel-major, then row-major ``H, W, D`` order.
"""
from __future__ import annotations

import json
import logging
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

log = logging.getLogger(__name__)

BRATS_CHANNELS = ("T1", "T1c", "T2", "FLAIR")
MASK_CHANNELS = ("ET", "WT", "TC")
VALID_LABELS = (0, 1, 2, 4)

_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}
_LEN = struct.Struct("<I")


class SvolError(ValueError):
    """Malformed or inconsistent SVOL file."""


class DegenerateChannelError(ValueError):
    """A channel's non-zero voxels have zero spread."""


def _spacing(spacing) -> tuple:
    sp = tuple(float(s) for s in spacing)
    if len(sp) != 3 or min(sp) <= 0:
        raise ValueError(f"spacing must be three positive values, got {spacing}")
    return sp


@dataclass
class Volume:
    """Multi-channel image ``(C, H, W, D)`` in float32."""

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    channel_names: tuple = ()

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 4 or min(self.data.shape) < 1:
            raise ValueError(f"volume data must be (C, H, W, D) with positive extents, got {self.data.shape}")
        self.spacing = _spacing(self.spacing)
        if not self.channel_names:
            self.channel_names = (
                BRATS_CHANNELS if self.channels == 4 else tuple(f"c{i}" for i in range(self.channels))
            )
        self.channel_names = tuple(self.channel_names)
        if len(self.channel_names) != self.channels:
            raise ValueError(
                f"{len(self.channel_names)} channel names for {self.channels} channels"
            )

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def shape(self) -> tuple:
        return tuple(self.data.shape[1:])


@dataclass
class SegmentationMask:
    """Label map ``(H, W, D)`` or binary channels ``(3, H, W, D)`` ordered ET, WT, TC."""

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim not in (3, 4) or (self.data.ndim == 4 and self.data.shape[0] != 3):
            raise ValueError(f"mask must be (H, W, D) or (3, H, W, D), got {self.data.shape}")
        if self.data.dtype != np.uint8:
            self.data = self.data.astype(np.uint8)
        self.spacing = _spacing(self.spacing)

    @property
    def is_channels(self) -> bool:
        return self.data.ndim == 4

    @property
    def shape(self) -> tuple:
        return tuple(self.data.shape[-3:])

    def as_channels(self) -> np.ndarray:
        return self.data if self.is_channels else labels_to_channels(self.data)


# ---------------------------------------------------------------------------
# SVOL container


def write_svol(path, array: np.ndarray, spacing, channel_names: Sequence[str], dtype: str) -> None:
    arr = np.ascontiguousarray(array, dtype=_DTYPES[dtype])
    header = {
        "magic": "SVOL",
        "version": 1,
        "shape": list(arr.shape),
        "spacing": list(_spacing(spacing)),
        "dtype": dtype,
        "channel_names": list(channel_names),
    }
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_LEN.pack(len(blob)))
        fh.write(blob)
        fh.write(arr.tobytes())


def read_svol(path) -> tuple:
    """Return ``(header, array)`` after validating the header against the payload."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    raw = path.read_bytes()
    if len(raw) < _LEN.size:
        raise SvolError(f"{path}: file too short for a header")
    (n,) = _LEN.unpack_from(raw)
    try:
        header = json.loads(raw[_LEN.size : _LEN.size + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise SvolError(f"{path}: corrupt header ({exc})") from None
    if not isinstance(header, dict) or header.get("magic") != "SVOL":
        raise SvolError(f"{path}: bad magic, expected 'SVOL'")
    if header.get("version") != 1:
        raise SvolError(f"{path}: unsupported version {header.get('version')!r}")
    dtype = header.get("dtype")
    if dtype not in _DTYPES:
        raise SvolError(f"{path}: unknown dtype {dtype!r}")
    shape = header.get("shape")
    if not isinstance(shape, list) or not all(isinstance(s, int) and s >= 1 for s in shape):
        raise SvolError(f"{path}: header shape {shape!r} is invalid")
    payload = raw[_LEN.size + n :]
    itemsize = _DTYPES[dtype].itemsize
    declared = int(np.prod(shape))
    if len(payload) % itemsize:
        raise SvolError(f"{path}: payload of {len(payload)} bytes is not a whole number of {dtype} elements")
    have = len(payload) // itemsize
    if have != declared:
        raise SvolError(f"{path}: payload has {have} elements, header declares {declared}")
    arr = np.frombuffer(payload, dtype=_DTYPES[dtype]).reshape(shape)
    return header, arr.astype(_DTYPES[dtype].newbyteorder("="), copy=True)


def save_volume(volume: Volume, path) -> None:
    write_svol(path, volume.data, volume.spacing, volume.channel_names, "f32")


def load_volume(path) -> Volume:
    header, arr = read_svol(path)
    if header["dtype"] != "f32" or arr.ndim != 4:
        raise SvolError(f"{path}: expected a 4-axis f32 volume, got dtype {header['dtype']} shape {list(arr.shape)}")
    try:
        return Volume(arr, tuple(header.get("spacing", (1, 1, 1))), tuple(header.get("channel_names", ())))
    except ValueError as exc:
        raise SvolError(f"{path}: {exc}") from None


def save_mask(mask: SegmentationMask, path) -> None:
    names = MASK_CHANNELS if mask.is_channels else ()
    write_svol(path, mask.data, mask.spacing, names, "u8")


def load_mask(path) -> SegmentationMask:
    header, arr = read_svol(path)
    if header["dtype"] != "u8":
        raise SvolError(f"{path}: expected a u8 mask, got dtype {header['dtype']}")
    try:
        return SegmentationMask(arr, tuple(header.get("spacing", (1, 1, 1))))
    except ValueError as exc:
        raise SvolError(f"{path}: {exc}") from None


# ---------------------------------------------------------------------------
# intensity normalization and augmentation


def normalize_nonzero(volume: Volume) -> Volume:
    """Standardize each channel using, and applying to, its non-zero voxels only.

    Population statistics; background (exact zeros) stays 0 and an all-zero
    channel is returned unchanged.
    """
    out = volume.data.copy()
    for c in range(volume.channels):
        ch = volume.data[c]
        nz = ch != 0
        if not nz.any():
            continue
        vals = ch[nz].astype(np.float64)
        mu, sigma = vals.mean(), vals.std()
        if sigma == 0 or vals.size < 2:
            raise DegenerateChannelError(
                f"channel {c} ({volume.channel_names[c]}): non-zero voxels have zero spread"
            )
        out[c][nz] = ((vals - mu) / sigma).astype(np.float32)
    return Volume(out, volume.spacing, volume.channel_names)


def pad_to_size(arr: np.ndarray, size: Sequence[int]) -> np.ndarray:
    """Centered zero padding of the last three axes up to at least ``size``."""
    widths = [(0, 0)] * (arr.ndim - 3)
    for e, s in zip(arr.shape[-3:], size):
        extra = max(0, int(s) - e)
        widths.append((extra // 2, extra - extra // 2))
    if all(w == (0, 0) for w in widths):
        return arr
    return np.pad(arr, widths)


def random_crop(volume: Volume, mask: SegmentationMask, crop_size, rng: np.random.Generator) -> tuple:
    """Crop image and mask at one offset drawn uniformly over valid positions."""
    crop = tuple(int(c) for c in crop_size)
    if volume.shape != mask.shape:
        raise ValueError(f"image extent {volume.shape} != mask extent {mask.shape}")
    img = pad_to_size(volume.data, crop)
    seg = pad_to_size(mask.data, crop)
    ext = img.shape[1:]
    origin = [int(rng.integers(0, e - c + 1)) for e, c in zip(ext, crop)]
    sl = tuple(slice(o, o + c) for o, c in zip(origin, crop))
    return (
        Volume(img[(slice(None),) + sl], volume.spacing, volume.channel_names),
        SegmentationMask(seg[(Ellipsis,) + sl], mask.spacing),
    )


@dataclass
class AugmentationConfig:
    crop_size: tuple = (128, 128, 128)
    flip_prob: tuple = (0.5, 0.5, 0.5)
    intensity_shift: tuple = (-0.1, 0.1)
    intensity_scale: tuple = (0.9, 1.1)
    seed: int = 0

    def __post_init__(self):
        self.crop_size = tuple(int(c) for c in self.crop_size)
        self.flip_prob = tuple(float(p) for p in self.flip_prob)
        self.intensity_shift = tuple(float(v) for v in self.intensity_shift)
        self.intensity_scale = tuple(float(v) for v in self.intensity_scale)
        if len(self.crop_size) != 3 or min(self.crop_size) < 1:
            raise ValueError(f"crop_size must be three positive extents, got {self.crop_size}")
        if len(self.flip_prob) != 3 or not all(0.0 <= p <= 1.0 for p in self.flip_prob):
            raise ValueError(f"flip probabilities must lie in [0, 1], got {self.flip_prob}")
        for name, (lo, hi) in (("intensity_shift", self.intensity_shift),
                               ("intensity_scale", self.intensity_scale)):
            if lo > hi:
                raise ValueError(f"{name} range ({lo}, {hi}) is not ordered")


def augment(volume: Volume, mask: SegmentationMask, config: AugmentationConfig,
            rng: np.random.Generator) -> tuple:
    """Flips, then per-channel intensity shift, then per-channel scale.

    The same number of draws is taken from ``rng`` regardless of the
    configured probabilities, so streams stay aligned across configurations.
    """
    img, seg = volume.data, mask.data
    flips = rng.random(3)
    for axis in range(3):
        if flips[axis] < config.flip_prob[axis]:
            img = np.flip(img, axis=axis + 1)
            seg = np.flip(seg, axis=seg.ndim - 3 + axis)
    c = volume.channels
    shift = rng.uniform(*config.intensity_shift, size=c).astype(np.float32)
    scale = rng.uniform(*config.intensity_scale, size=c).astype(np.float32)
    img = (img + shift[:, None, None, None]) * scale[:, None, None, None]
    return (
        Volume(np.ascontiguousarray(img), volume.spacing, volume.channel_names),
        SegmentationMask(np.ascontiguousarray(seg), mask.spacing),
    )


# ---------------------------------------------------------------------------
# label conversion


def labels_to_channels(labels: np.ndarray) -> np.ndarray:
    """Discrete labels {0, 1, 2, 4} -> uint8 channels (ET, WT, TC)."""
    labels = np.asarray(labels)
    bad = ~np.isin(labels, VALID_LABELS)
    if bad.any():
        raise ValueError(f"unexpected label values {sorted(np.unique(labels[bad]).tolist())}; "
                         f"allowed {list(VALID_LABELS)}")
    et = labels == 4
    wt = labels > 0
    tc = (labels == 1) | et
    return np.stack([et, wt, tc]).astype(np.uint8)


def channels_to_labels(channels: np.ndarray) -> np.ndarray:
    """Channels (ET, WT, TC) -> discrete labels with precedence ET > TC > WT.

    Voxels violating ET ⊆ TC ⊆ WT are still labelled by precedence; their
    count is logged.
    """
    ch = np.asarray(channels).astype(bool)
    if ch.ndim != 4 or ch.shape[0] != 3:
        raise ValueError(f"expected (3, H, W, D) channels, got {ch.shape}")
    et, wt, tc = ch
    violations = int(np.count_nonzero((et & ~tc) | (tc & ~wt)))
    if violations:
        log.warning("%d voxels violate ET/TC/WT nesting; resolved by precedence ET > TC > WT", violations)
    out = np.zeros(ch.shape[1:], dtype=np.uint8)
    out[wt] = 2
    out[tc] = 1
    out[et] = 4
    return out


# ---------------------------------------------------------------------------
# manifests and folds


def split_folds(case_ids: Sequence[str], k: int = 5, seed: int = 0) -> dict:
    """Seeded assignment of cases to ``k`` validation folds.

    Ids are sorted, shuffled with ``seed`` and cut into ``k`` contiguous
    chunks; the remainder goes one case each to the first folds.
    """
    ids = sorted(case_ids)
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate case ids")
    if k < 1 or len(ids) < k:
        raise ValueError(f"fewer cases ({len(ids)}) than folds ({k})")
    order = np.random.default_rng(seed).permutation(len(ids))
    base, rem = divmod(len(ids), k)
    folds, start = {}, 0
    for fold in range(k):
        size = base + (1 if fold < rem else 0)
        for j in order[start : start + size]:
            folds[ids[j]] = fold
        start += size
    return folds


def case_rng(seed: int, case_id: str, epoch: int) -> np.random.Generator:
    """Independent stream per (seed, case, epoch), unaffected by visiting order."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(case_id.encode()), int(epoch)]))


@dataclass
class CaseEntry:
    id: str
    image: str
    mask: str


@dataclass
class LoadedCase:
    id: str
    image: Volume
    mask: SegmentationMask


@dataclass
class DatasetManifest:
    cases: list
    folds: dict = field(default_factory=dict)
    root: Optional[Path] = None  # directory that relative paths resolve against

    def __post_init__(self):
        ids = [c.id for c in self.cases]
        dup = sorted({i for i in ids if ids.count(i) > 1})
        if dup:
            raise ValueError(f"duplicate case ids in manifest: {dup}")
        unknown = sorted(set(self.folds) - set(ids))
        if unknown:
            raise ValueError(f"fold assignments for unknown cases: {unknown}")

    @property
    def ids(self) -> list:
        return [c.id for c in self.cases]

    def entry(self, case_id: str) -> CaseEntry:
        for c in self.cases:
            if c.id == case_id:
                return c
        raise KeyError(f"case {case_id!r} not in manifest")

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() or self.root is None else self.root / p

    def load_case(self, case_id: str) -> LoadedCase:
        e = self.entry(case_id)
        return LoadedCase(e.id, load_volume(self.resolve(e.image)), load_mask(self.resolve(e.mask)))

    def fold_cases(self, fold: int) -> tuple:
        """``(train_ids, val_ids)`` for one fold, in manifest order."""
        if not self.folds:
            raise ValueError("manifest has no fold assignments")
        val = [i for i in self.ids if self.folds.get(i) == fold]
        if not val:
            raise ValueError(f"fold {fold} has no validation cases")
        return [i for i in self.ids if self.folds.get(i) != fold], val

    def to_dict(self) -> dict:
        return {
            "cases": [{"id": c.id, "image": c.image, "mask": c.mask} for c in self.cases],
            "folds": dict(self.folds),
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        try:
            raw = json.loads(path.read_text())
            cases = [CaseEntry(str(c["id"]), str(c["image"]), str(c["mask"])) for c in raw["cases"]]
            folds = {str(k): int(v) for k, v in raw.get("folds", {}).items()}
        except (KeyError, TypeError, json.JSONDecodeError) as exc:
            raise ValueError(f"{path}: malformed manifest ({exc})") from None
        return cls(cases, folds, root=path.parent)
