"""Adam with bias correction; non-finite gradient batches are skipped."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray

from .autodiff import Tensor

Array = NDArray[np.float64]

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8


@dataclass
class AdamState:
    m: dict[str, Array]
    v: dict[str, Array]
    step: int = 0
    skipped: int = 0


def init_adam(params: dict[str, Tensor]) -> AdamState:
    return AdamState(m={k: np.zeros_like(t.data) for k, t in params.items()},
                     v={k: np.zeros_like(t.data) for k, t in params.items()})


def zero_grads(params: dict[str, Tensor]) -> None:
    for t in params.values():
        t.grad = None


def collect_grads(params: dict[str, Tensor]) -> dict[str, Array]:
    """Gradients after backward; parameters a loss never touched get zeros."""
    return {k: (t.grad if t.grad is not None else np.zeros_like(t.data))
            for k, t in params.items()}


def adam_step(params: dict[str, Tensor], grads: dict[str, Array],
              state: AdamState, lr: float) -> AdamState:
    """In-place parameter update.  A batch with any non-finite gradient is
    flagged in ``state.skipped`` and applied not at all."""
    for name, t in params.items():
        g = grads[name]
        if g.shape != t.data.shape:
            raise ValueError(f"gradient shape mismatch for {name}: "
                             f"{g.shape} vs {t.data.shape}")
    if any(not np.isfinite(grads[name]).all() for name in params):
        state.skipped += 1
        return state
    state.step += 1
    bc1 = 1.0 - BETA1 ** state.step
    bc2 = 1.0 - BETA2 ** state.step
    for name, t in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= BETA1
        m += (1.0 - BETA1) * g
        v *= BETA2
        v += (1.0 - BETA2) * g * g
        t.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + EPS)
    return state
