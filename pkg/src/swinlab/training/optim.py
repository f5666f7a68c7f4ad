"""Adaptive-moment optimizer with decoupled weight decay."""
from __future__ import annotations

from typing import Sequence

import numpy as np


class NonFiniteGradientError(FloatingPointError):
    """A parameter received a NaN or Inf gradient."""


class AdamW:
    """Bias-corrected first/second moments; decay multiplies the weights before the moment update.

    Parameters whose ``grad`` is None are left untouched for that step.
    """

    def __init__(self, params: Sequence, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 1e-5):
        self.params = list(params)
        self.betas = (float(betas[0]), float(betas[1]))
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, lr: float) -> None:
        # validate everything first so a bad gradient leaves the state untouched
        for i, p in enumerate(self.params):
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise NonFiniteGradientError(f"non-finite gradient in parameter {p.name or i}")
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1.0 - b1**self.t, 1.0 - b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if g is None:
                continue
            g = np.asarray(g, dtype=p.dtype)
            if self.weight_decay:
                p.data *= 1.0 - lr * self.weight_decay
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def hyperparameters(self) -> dict:
        return {"betas": list(self.betas), "eps": self.eps, "weight_decay": self.weight_decay}

    def state(self) -> dict:
        return {"t": self.t, "m": self.m, "v": self.v}

    def load_state(self, state: dict) -> None:
        if len(state["m"]) != len(self.params) or len(state["v"]) != len(self.params):
            raise ValueError("optimizer state does not match the parameter list")
        for i, p in enumerate(self.params):
            for key in ("m", "v"):
                if state[key][i].shape != p.shape:
                    raise ValueError(f"{key} moment {i} shape {state[key][i].shape} != {p.shape}")
        self.t = int(state["t"])
        self.m = [np.array(a, dtype=p.dtype) for a, p in zip(state["m"], self.params)]
        self.v = [np.array(a, dtype=p.dtype) for a, p in zip(state["v"], self.params)]
