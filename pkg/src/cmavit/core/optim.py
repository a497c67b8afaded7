"""AdamW with decoupled weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from cmavit.core.tensor import Tensor
from cmavit.errors import DimensionError, ParameterError


@dataclass
class AdamWState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adamw_step(
    params: Mapping[str, Tensor],
    state: AdamWState,
    grads: Mapping[str, np.ndarray] | None = None,
    *,
    lr: float = 1e-4,
    beta1: float = 0.98,
    beta2: float = 0.95,
    eps: float = 1e-8,
    weight_decay: float = 0.01,
) -> AdamWState:
    """One AdamW update, in place on ``params`` (new arrays are assigned).

    theta <- theta - lr*wd*theta - lr * m_hat / (sqrt(v_hat) + eps)

    ``grads`` defaults to each parameter's ``.grad``; a missing grad counts
    as zero. The defaults are the published settings, beta2 < beta1 included.
    """
    if lr < 0:
        raise ParameterError(f"learning rate must be non-negative, got {lr}")
    if not (0.0 <= beta1 < 1.0 and 0.0 <= beta2 < 1.0):
        raise ParameterError("betas must lie in [0, 1)")
    if state.t < 0:
        raise ParameterError("step counter must be non-negative")
    state.t += 1
    bc1 = 1.0 - beta1**state.t
    bc2 = 1.0 - beta2**state.t
    for name, p in params.items():
        g = grads[name] if grads is not None else p.grad
        if g is None:
            g = np.zeros_like(p.data)
        elif g.shape != p.shape:
            raise DimensionError(f"grad for {name!r} has shape {g.shape}, param has {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * (g * g)
        state.m[name], state.v[name] = m, v
        step = (m / bc1) / (np.sqrt(v / bc2) + eps)
        p.data = p.data - lr * weight_decay * p.data - lr * step
    return state

