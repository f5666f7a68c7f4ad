"""Learning-rate schedule: linear warmup followed by cosine annealing."""
from __future__ import annotations

import math


def warmup_steps(total_steps: int, warmup_fraction: float = 0.05) -> int:
    tw = int(math.floor(warmup_fraction * total_steps + 1e-9))
    if total_steps < 1:
        raise ValueError(f"total_steps must be positive, got {total_steps}")
    if not 0 <= tw < total_steps:
        raise ValueError(f"warmup of {tw} steps must be shorter than the {total_steps} total steps")
    return tw


def lr_at(step: int, total_steps: int, lr_max: float = 8e-4, warmup_fraction: float = 0.05) -> float:
    """``lr_max * step / T_w`` during warmup, then ``lr_max * (1 + cos(pi * progress)) / 2``.

    ``T_w = floor(warmup_fraction * total_steps)``; the value reaches ``lr_max``
    at ``T_w`` and 0 at ``total_steps``.
    """
    tw = warmup_steps(total_steps, warmup_fraction)
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if step < tw:
        return lr_max * step / tw
    progress = (step - tw) / (total_steps - tw)
    return lr_max * 0.5 * (1.0 + math.cos(math.pi * progress))
