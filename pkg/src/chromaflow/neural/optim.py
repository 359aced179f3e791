"""Adam with bias correction over named parameter arrays."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict

import numpy as np


@dataclass
class AdamState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(weights: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Update ``weights`` in place. Parameters without a gradient are skipped."""
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, w in weights.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != w.shape:
            raise ValueError(f"gradient for {name!r} has shape {g.shape}, parameter has {w.shape}")
        g = g.astype(np.float64)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros(w.shape, np.float64)
            state.v[name] = np.zeros(w.shape, np.float64)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        w[...] = (w.astype(np.float64) - update).astype(w.dtype)
