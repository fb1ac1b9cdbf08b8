from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import NonFiniteGradient, ShapeMismatch
from .config import TrainConfig
from .model import ModelParams


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "AdamState":
        return cls(
            {k: np.zeros_like(t) for k, t in params.tensors.items()},
            {k: np.zeros_like(t) for k, t in params.tensors.items()},
        )


def adamw_step(params: ModelParams, grads: dict, state: AdamState, tc: TrainConfig, step: int | None = None) -> None:
    """One AdamW update, in place on ``params`` and ``state``.

    ``p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)``; the decay term
    uses the pre-update weights and applies to every tensor.
    """
    step = state.step + 1 if step is None else step
    if step < 1:
        raise ValueError("step must be >= 1")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient in {name}")
    b1, b2 = tc.beta1, tc.beta2
    c1 = 1.0 - b1**step
    c2 = 1.0 - b2**step
    for name, p in params.tensors.items():
        g = grads[name]
        if g.shape != p.shape or name not in state.m:
            raise ShapeMismatch(f"{name}: gradient/state shape does not match parameter")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        upd = (m / c1) / (np.sqrt(v / c2) + tc.epsilon) + tc.weight_decay * p
        p -= (tc.lr * upd).astype(p.dtype, copy=False)
    state.step = step
