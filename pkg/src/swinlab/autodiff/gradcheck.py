"""Central finite-difference verification of analytic gradients."""
from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Tensor


class NondeterministicError(RuntimeError):
    pass


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)


def _scalar(out: Tensor) -> float:
    if out.size != 1:
        raise ValueError(f"checked function must be scalar-valued, got shape {out.shape}")
    return float(out.data.reshape(()))


def finite_difference_check(
    f: Callable[..., Tensor],
    *inputs: Tensor,
    eps: float = 1e-4,
    coords: Optional[Sequence[np.ndarray]] = None,
    max_coords: Optional[int] = None,
    seed: int = 0,
    return_details: bool = False,
    analytic: Optional[Sequence[np.ndarray]] = None,
):
    """Compare ``backward`` gradients of ``f(*inputs)`` with central differences.

    Returns the maximum over checked coordinates of
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)``.

    ``coords`` optionally gives, per input, the flat indices to check;
    ``max_coords`` samples that many per input at random instead of checking
    every coordinate (large parameter tensors).

    ``analytic`` supplies precomputed gradients, one array per input, in place
    of calling ``backward``; this lets a low-precision backward pass be judged
    against differences taken on a float64 copy of the same function.
    """
    for t in inputs:
        t.grad = None
        t.data = np.ascontiguousarray(t.data)
    base = f(*inputs)
    again = f(*inputs)
    if _scalar(base) != _scalar(again):
        raise NondeterministicError(
            f"two forward passes disagree: {_scalar(base)!r} vs {_scalar(again)!r}"
        )
    if analytic is None:
        base.backward()
        analytic = [t.grad for t in inputs]
    elif len(analytic) != len(inputs):
        raise ValueError(f"got {len(analytic)} analytic gradients for {len(inputs)} inputs")

    rng = np.random.default_rng(seed)
    worst = 0.0
    details = []
    for k, t in enumerate(inputs):
        grad = analytic[k]
        grad = np.zeros(t.size) if grad is None else np.asarray(grad).reshape(-1).astype(np.float64)
        if coords is not None:
            idx = np.asarray(coords[k], dtype=np.intp)
        elif max_coords is not None and t.size > max_coords:
            idx = rng.choice(t.size, size=max_coords, replace=False)
        else:
            idx = np.arange(t.size)
        flat = t.data.reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            fp = _scalar(f(*inputs))
            flat[i] = orig - eps
            fm = _scalar(f(*inputs))
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * eps)
            err = relative_error(float(grad[i]), numeric)
            details.append((k, int(i), float(grad[i]), numeric, err))
            worst = max(worst, err)
    if return_details:
        return worst, details
    return worst
