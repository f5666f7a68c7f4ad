"""Parameter containers and the small set of layers the model is built from."""
from __future__ import annotations

import math
from typing import Iterator, Optional

import numpy as np

from . import functional as F
from .tensor import Tensor


class Parameter(Tensor):
    """Leaf tensor that requires grad; ``name`` is assigned by the owning model."""

    __slots__ = ()

    def __init__(self, data, name: Optional[str] = None):
        super().__init__(data, requires_grad=True, name=name)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, dtype={self.dtype})"


class Init:
    """Seeded parameter factory.

    ``mode="random"`` follows the initialization policy (truncated normal
    std 0.02 for linear weights, fan-in scaled normal for convolutions, zeros
    for biases, ones/zeros for norm affine terms); ``mode="zeros"`` makes every
    parameter zero, which is useful for structural tests and cheap counting.
    """

    def __init__(self, seed: int = 0, dtype=np.float32, mode: str = "random"):
        if mode not in ("random", "zeros"):
            raise ValueError(f"unknown init mode {mode!r}")
        self.rng = np.random.default_rng(seed)
        self.dtype = np.dtype(dtype)
        self.mode = mode

    def zeros(self, shape) -> Parameter:
        return Parameter(np.zeros(shape, dtype=self.dtype))

    def ones(self, shape) -> Parameter:
        if self.mode == "zeros":
            return self.zeros(shape)
        return Parameter(np.ones(shape, dtype=self.dtype))

    def trunc_normal(self, shape, std: float = 0.02) -> Parameter:
        if self.mode == "zeros":
            return self.zeros(shape)
        v = self.rng.standard_normal(shape)
        bad = np.abs(v) > 2.0
        while bad.any():
            v[bad] = self.rng.standard_normal(int(bad.sum()))
            bad = np.abs(v) > 2.0
        return Parameter((v * std).astype(self.dtype))

    def kaiming(self, shape, fan_in: int) -> Parameter:
        if self.mode == "zeros":
            return self.zeros(shape)
        std = math.sqrt(2.0 / fan_in)
        return Parameter((self.rng.standard_normal(shape) * std).astype(self.dtype))


class Module:
    """Tree of sub-modules and parameters, traversed in attribute order."""

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def named_parameters(self, prefix: str = "") -> Iterator:
        for key, val in vars(self).items():
            path = f"{prefix}{key}"
            if isinstance(val, Parameter):
                yield path, val
            elif isinstance(val, Module):
                yield from val.named_parameters(path + ".")
            elif isinstance(val, (list, tuple)) and val and all(isinstance(v, Module) for v in val):
                for i, sub in enumerate(val):
                    yield from sub.named_parameters(f"{path}.{i}.")

    def assign_names(self) -> None:
        seen = set()
        for name, p in self.named_parameters():
            if name in seen:
                raise ValueError(f"duplicate parameter name {name}")
            seen.add(name)
            p.name = name

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def state_dict(self) -> dict:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={extra[:5]}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    def __init__(self, init: Init, in_features: int, out_features: int, bias: bool = True):
        self.weight = init.trunc_normal((in_features, out_features))
        self.bias = init.zeros((out_features,)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, init: Init, dim: int, eps: float = 1e-5):
        self.weight = init.ones((dim,))
        self.bias = init.zeros((dim,))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return F.layer_norm(x, self.weight, self.bias, self.eps)


class InstanceNorm3d(Module):
    def __init__(self, init: Init, channels: int, affine: bool = True, eps: float = 1e-5):
        self.weight = init.ones((channels,)) if affine else None
        self.bias = init.zeros((channels,)) if affine else None
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return F.instance_norm(x, self.weight, self.bias, self.eps)


class Conv3d(Module):
    def __init__(self, init: Init, cin: int, cout: int, kernel: int, stride: int = 1,
                 padding: int = 0, bias: bool = True):
        self.weight = init.kaiming((cout, cin, kernel, kernel, kernel), fan_in=cin * kernel**3)
        self.bias = init.zeros((cout,)) if bias else None
        self.stride = stride
        self.padding = padding

    def forward(self, x: Tensor) -> Tensor:
        return F.conv3d(x, self.weight, self.bias, self.stride, self.padding)


class ConvTranspose3d(Module):
    def __init__(self, init: Init, cin: int, cout: int, kernel: int = 2, stride: int = 2,
                 bias: bool = False):
        self.weight = init.kaiming((cin, cout, kernel, kernel, kernel), fan_in=cin * kernel**3)
        self.bias = init.zeros((cout,)) if bias else None
        self.stride = stride

    def forward(self, x: Tensor) -> Tensor:
        return F.conv_transpose3d(x, self.weight, self.bias, self.stride)
