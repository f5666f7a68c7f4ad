"""Architecture hyperparameters."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np


@dataclass
class ModelConfig:
    in_channels: int = 4
    out_channels: int = 3
    patch_size: tuple = (2, 2, 2)
    embed_dim: int = 48
    depths: tuple = (2, 2, 2, 2)
    num_heads: tuple = (3, 6, 12, 24)
    window_size: int = 7
    mlp_ratio: float = 4.0
    use_relative_position_bias: bool = True
    input_size: tuple = (128, 128, 128)
    dtype: str = "float32"
    seed: int = 0
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.patch_size = tuple(int(v) for v in self.patch_size)
        self.depths = tuple(int(v) for v in self.depths)
        self.num_heads = tuple(int(v) for v in self.num_heads)
        self.input_size = tuple(int(v) for v in self.input_size)
        self.validate()

    def validate(self) -> None:
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("in_channels and out_channels must be positive")
        if self.patch_size != (2, 2, 2):
            raise ValueError(f"patch_size must be (2, 2, 2), got {self.patch_size}")
        if len(self.depths) != 4 or len(self.num_heads) != 4:
            raise ValueError("depths and num_heads need one entry per stage (4 stages)")
        for i, (d, h) in enumerate(zip(self.depths, self.num_heads)):
            if d < 0 or d % 2:
                raise ValueError(f"stage {i + 1} depth {d} must be even (W-MSA/SW-MSA pairs)")
            width = self.stage_width(i)
            if h < 1 or width % h:
                raise ValueError(f"stage {i + 1}: {h} heads do not divide width {width}")
        if self.embed_dim < 1 or self.window_size < 1 or self.mlp_ratio <= 0:
            raise ValueError("embed_dim, window_size and mlp_ratio must be positive")
        if len(self.input_size) != 3 or min(self.input_size) < 1:
            raise ValueError(f"input_size must be three positive extents, got {self.input_size}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype}")

    def stage_width(self, stage: int) -> int:
        """Token width inside encoder stage ``stage`` (0-based)."""
        return self.embed_dim * 2**stage

    @property
    def total_layers(self) -> int:
        return int(sum(self.depths))

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def level_channels(self) -> list:
        c = self.embed_dim
        return [self.in_channels, c, 2 * c, 4 * c, 8 * c, 16 * c]

    def level_shapes(self, input_size=None) -> list:
        """(channels, H, W, D) of the six feature levels for a padded input."""
        size = padded_input(input_size or self.input_size)
        return [
            (ch,) + tuple(s // 2**i for s in size) for i, ch in enumerate(self.level_channels())
        ]

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("patch_size", "depths", "num_heads", "input_size"):
            d[k] = list(d[k])
        if not d["extra"]:
            d.pop("extra")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown model config keys: {unknown}")
        return cls(**d)

    @classmethod
    def tiny(cls, **overrides) -> "ModelConfig":
        """Desk-scale configuration used by tests and the toy training run."""
        base = dict(
            embed_dim=6,
            num_heads=(1, 2, 4, 8),
            window_size=2,
            input_size=(32, 32, 32),
        )
        base.update(overrides)
        return cls(**base)


def padded_input(size) -> tuple:
    """Input extents rounded up to multiples of 32 (five halvings)."""
    return tuple(-(-int(s) // 32) * 32 for s in size)
