from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .tensor import ShapeError, Tensor


@dataclass
class OptimizerState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(state: OptimizerState, params: Mapping[str, Tensor],
              grads: Mapping[str, np.ndarray]) -> Mapping[str, Tensor]:
    """One bias-corrected Adam update, applied in place.

    Parameters without an entry in ``grads`` are left alone; their moments
    are not advanced.
    """
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if np.shape(g) != params[name].shape:
            raise ShapeError(
                f"adam_step: gradient shape {np.shape(g)} does not match parameter "
                f"{name!r} shape {params[name].shape}"
            )
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, g in grads.items():
        p = params[name]
        g = np.asarray(g, dtype=p.data.dtype)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if state.lr == 0.0:
            continue
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data -= (state.lr * update).astype(p.data.dtype, copy=False)
    return params
