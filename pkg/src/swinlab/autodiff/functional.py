"""Differentiable operations on :class:`Tensor`.

Each function computes its forward result with numpy and registers a closure
returning the gradients of its inputs, in input order.
"""
from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np
from scipy.special import erf, expit

from . import kernels
from .tensor import Tensor, as_tensor, is_grad_enabled, make_result

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: shapes {a.shape} and {b.shape} are not broadcastable") from None


def _coerce_pair(a, b):
    if not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    return a, b


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    _broadcast_shape(a, b, "add")

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return make_result(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    _broadcast_shape(a, b, "sub")

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return make_result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    _broadcast_shape(a, b, "mul")

    def backward(g):
        ga = unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    _broadcast_shape(a, b, "div")
    out = a.data / b.data

    def backward(g):
        ga = unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(out, (a, b), backward, "div")


def scale(x: Tensor, factor: float) -> Tensor:
    factor = float(factor)

    def backward(g):
        return (g * factor,)

    return make_result(x.data * x.dtype.type(factor), (x,), backward, "scale")


def square(x: Tensor) -> Tensor:
    def backward(g):
        return (2.0 * g * x.data,)

    return make_result(x.data * x.data, (x,), backward, "square")


def sigmoid(x: Tensor) -> Tensor:
    y = expit(x.data)

    def backward(g):
        return (g * y * (1.0 - y),)

    return make_result(y, (x,), backward, "sigmoid")


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    cdf = 0.5 * (1.0 + erf(x.data / x.dtype.type(_SQRT2)))
    out = x.data * cdf

    def backward(g):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT_2PI
        return (g * (cdf + x.data * pdf),)

    return make_result(out.astype(x.dtype, copy=False), (x,), backward, "gelu")


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    pos = x.data > 0
    out = np.where(pos, x.data, x.data * x.dtype.type(slope))

    def backward(g):
        return (np.where(pos, g, g * slope),)

    return make_result(out, (x,), backward, "leaky_relu")


def elementwise(op: str, *operands, **kwargs) -> Tensor:
    """Dispatch by name: add, mul, gelu, sigmoid, scale, leaky_relu."""
    table = {
        "add": add,
        "mul": mul,
        "gelu": gelu,
        "sigmoid": sigmoid,
        "scale": scale,
        "leaky_relu": leaky_relu,
    }
    if op not in table:
        raise ValueError(f"unknown elementwise op {op!r}; choose from {sorted(table)}")
    return table[op](*operands, **kwargs)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------
def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_result(np.asarray(out), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return scale(sum(x, axis=axes, keepdims=keepdims), 1.0 / count)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product ``a[..., m, k] @ b[..., k, n]``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs >= 2-d operands, got shapes {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(
            f"matmul inner extents differ: {a.shape} @ {b.shape} "
            f"({a.shape[-1]} != {b.shape[-2]})"
        )
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ValueError(f"matmul batch extents not broadcastable: {a.shape} @ {b.shape}") from None

    def backward(g):
        ga = unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(a.data @ b.data, (a, b), backward, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x[..., in] @ weight[in, out] + bias[out]`` as one tape entry."""
    if x.shape[-1] != weight.shape[0]:
        raise ValueError(f"linear: input {x.shape} does not match weight {weight.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ weight.data
    if bias is not None:
        out += bias.data
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ weight.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return make_result(out.reshape(lead + (weight.shape[1],)), inputs, backward, "linear")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ValueError(f"softmax axis {axis} invalid for {x.ndim}-d tensor")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=axis, keepdims=True)
    y = z

    def backward(g):
        gy = g * y
        return (gy - y * gy.sum(axis=axis, keepdims=True),)

    return make_result(y, (x,), backward, "softmax")


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------
def _normalize(x: np.ndarray, axes: tuple, eps: float):
    mu = x.mean(axis=axes, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    rstd = 1.0 / np.sqrt(var + x.dtype.type(eps))
    return xc * rstd, rstd


def _normalize_backward(gx_hat: np.ndarray, x_hat: np.ndarray, rstd: np.ndarray, axes: tuple):
    m = gx_hat.mean(axis=axes, keepdims=True)
    mx = (gx_hat * x_hat).mean(axis=axes, keepdims=True)
    return rstd * (gx_hat - m - x_hat * mx)


def layer_norm(x: Tensor, gamma: Optional[Tensor] = None, beta: Optional[Tensor] = None,
               eps: float = 1e-5, normalized_extent: Optional[int] = None) -> Tensor:
    """Normalize over the trailing axis (or trailing ``normalized_extent`` axes)."""
    nd = 1 if normalized_extent is None else int(normalized_extent)
    axes = tuple(range(x.ndim - nd, x.ndim))
    pshape = x.shape[x.ndim - nd:]
    for name, p in (("gamma", gamma), ("beta", beta)):
        if p is not None and p.shape != pshape:
            raise ValueError(f"layer_norm {name} shape {p.shape} != normalized extent {pshape}")
    x_hat, rstd = _normalize(x.data, axes, eps)
    out = x_hat
    if gamma is not None:
        out = out * gamma.data
    if beta is not None:
        out = out + beta.data
    inputs = tuple(t for t in (x, gamma, beta) if t is not None)
    lead = tuple(range(x.ndim - nd))

    def backward(g):
        gx_hat = g * gamma.data if gamma is not None else g
        grads = [_normalize_backward(gx_hat, x_hat, rstd, axes) if x.requires_grad else None]
        if gamma is not None:
            grads.append((g * x_hat).sum(axis=lead))
        if beta is not None:
            grads.append(g.sum(axis=lead))
        return tuple(grads)

    return make_result(out, inputs, backward, "layer_norm")


def instance_norm(x: Tensor, gamma: Optional[Tensor] = None, beta: Optional[Tensor] = None,
                  eps: float = 1e-5) -> Tensor:
    """Per (sample, channel) normalization over the spatial extents of (N, C, H, W, D)."""
    if x.ndim != 5:
        raise ValueError(f"instance_norm expects (N, C, H, W, D), got {x.shape}")
    axes = (2, 3, 4)
    c = x.shape[1]
    for name, p in (("gamma", gamma), ("beta", beta)):
        if p is not None and p.shape != (c,):
            raise ValueError(f"instance_norm {name} shape {p.shape} != ({c},)")
    inputs = tuple(t for t in (x, gamma, beta) if t is not None)
    recording = is_grad_enabled() and any(t.requires_grad for t in inputs)
    x_hat, rstd = _normalize(x.data, axes, eps)
    # affine applied in place when nothing needs x_hat later
    out = x_hat.copy() if recording and gamma is not None else x_hat
    if gamma is not None:
        out *= gamma.data.reshape(1, c, 1, 1, 1)
    if beta is not None:
        out += beta.data.reshape(1, c, 1, 1, 1)
    if not recording:
        return make_result(out, inputs, None, "instance_norm")

    def backward(g):
        gx_hat = g * gamma.data.reshape(1, c, 1, 1, 1) if gamma is not None else g
        grads = [_normalize_backward(gx_hat, x_hat, rstd, axes) if x.requires_grad else None]
        if gamma is not None:
            grads.append((g * x_hat).sum(axis=(0, 2, 3, 4)))
        if beta is not None:
            grads.append(g.sum(axis=(0, 2, 3, 4)))
        return tuple(grads)

    return make_result(out, inputs, backward, "instance_norm")


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------
def conv3d(x: Tensor, w: Tensor, bias: Optional[Tensor] = None, stride=1, padding=0) -> Tensor:
    """3D cross-correlation; x (N, Cin, H, W, D), w (Cout, Cin, kh, kw, kd)."""
    out = kernels.conv3d_forward(x.data, w.data, None if bias is None else bias.data, stride, padding)
    inputs = (x, w) if bias is None else (x, w, bias)

    def backward(g):
        gx, gw = kernels.conv3d_backward(
            x.data, w.data, g, stride, padding, need_x=x.requires_grad, need_w=w.requires_grad
        )
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3, 4))

    return make_result(out, inputs, backward, "conv3d")


def conv_transpose3d(x: Tensor, w: Tensor, bias: Optional[Tensor] = None, stride=2, padding=0) -> Tensor:
    """Transposed convolution; w (Cin, Cout, kh, kw, kd)."""
    out = kernels.conv_transpose3d_forward(
        x.data, w.data, None if bias is None else bias.data, stride, padding
    )
    inputs = (x, w) if bias is None else (x, w, bias)

    def backward(g):
        gx = kernels.conv3d_forward(g, w.data, None, stride, padding) if x.requires_grad else None
        gw = None
        if w.requires_grad:
            _, gw = kernels.conv3d_backward(g, w.data, x.data, stride, padding, need_x=False)
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3, 4))

    return make_result(out, inputs, backward, "conv_transpose3d")


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------
def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    known = [s for s in shape if s != -1]
    if shape.count(-1) > 1 or (
        -1 not in shape and int(np.prod(shape)) != x.size
    ) or (-1 in shape and (np.prod(known) == 0 or x.size % int(np.prod(known)))):
        raise ValueError(f"cannot reshape {x.shape} ({x.size} elements) into {shape}")

    def backward(g):
        return (g.reshape(x.shape),)

    return make_result(x.data.reshape(shape), (x,), backward, "reshape")


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(int(a) for a in axes)
    if sorted(a % x.ndim for a in axes) != list(range(x.ndim)):
        raise ValueError(f"invalid permutation {axes} for {x.ndim}-d tensor")
    inv = tuple(np.argsort([a % x.ndim for a in axes]))

    def backward(g):
        return (g.transpose(inv),)

    return make_result(x.data.transpose(axes), (x,), backward, "permute")


def contiguous(x: Tensor) -> Tensor:
    def backward(g):
        return (g,)

    return make_result(np.ascontiguousarray(x.data), (x,), backward, "contiguous")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat needs at least one tensor")
    nd = tensors[0].ndim
    ax = axis % nd
    for t in tensors[1:]:
        if t.ndim != nd or any(
            t.shape[i] != tensors[0].shape[i] for i in range(nd) if i != ax
        ):
            raise ValueError(
                f"concat: shapes {[t.shape for t in tensors]} differ off axis {axis}"
            )
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=ax))

    return make_result(np.concatenate([t.data for t in tensors], axis=ax), tensors, backward, "concat")


def roll(x: Tensor, shifts, axes) -> Tensor:
    shifts = tuple(int(s) for s in np.atleast_1d(shifts))
    axes = tuple(int(a) for a in np.atleast_1d(axes))

    def backward(g):
        return (np.roll(g, tuple(-s for s in shifts), axis=axes),)

    return make_result(np.roll(x.data, shifts, axis=axes), (x,), backward, "roll")


def reshape_permute_concat_roll(variant: str, *args, **kwargs) -> Tensor:
    """Dispatch by name for the structural operations."""
    table = {"reshape": reshape, "permute": permute, "concat": concat, "roll": roll}
    if variant not in table:
        raise ValueError(f"unknown variant {variant!r}; choose from {sorted(table)}")
    return table[variant](*args, **kwargs)


def pad(x: Tensor, widths: Sequence[tuple]) -> Tensor:
    """Zero padding; ``widths`` is one (before, after) pair per axis."""
    widths = tuple((int(a), int(b)) for a, b in widths)
    if len(widths) != x.ndim:
        raise ValueError(f"pad widths {widths} do not match {x.ndim}-d tensor")
    if all(a == 0 and b == 0 for a, b in widths):
        return x
    crop = tuple(slice(a, a + n) for (a, _), n in zip(widths, x.shape))

    def backward(g):
        return (g[crop],)

    return make_result(np.pad(x.data, widths), (x,), backward, "pad")


def index(x: Tensor, idx) -> Tensor:
    """Basic (slice/int) indexing."""
    out = x.data[idx]

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[idx] = g
        return (gx,)

    return make_result(np.array(out, copy=True), (x,), backward, "index")


def take(x: Tensor, indices: np.ndarray) -> Tensor:
    """Gather rows of ``x`` (axis 0); repeated indices accumulate in backward."""
    indices = np.asarray(indices, dtype=np.intp)

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, indices.reshape(-1), g.reshape((-1,) + x.shape[1:]))
        return (gx,)

    return make_result(np.take(x.data, indices, axis=0), (x,), backward, "take")
