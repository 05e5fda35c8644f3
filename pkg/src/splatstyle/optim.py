"""Adaptive-moment (Adam) updates over named numpy arrays."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, MutableMapping

import numpy as np

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(
    params: MutableMapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    lr: float | Mapping[str, float],
) -> AdamState:
    """Update ``params`` in place; names missing from ``grads`` are left alone.

    ``lr`` is either one rate or a per-name mapping. Moments are created lazily
    with the parameter's shape.
    """
    state.step += 1
    t = state.step
    bc1 = 1.0 - BETA1 ** t
    bc2 = 1.0 - BETA2 ** t
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ValueError(f"adam_step: gradient for {name!r} has shape {g.shape}, param {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        elif m.shape != p.shape:
            raise ValueError(f"adam_step: state for {name!r} has shape {m.shape}, param {p.shape}")
        v = state.v[name]
        m *= BETA1
        m += (1.0 - BETA1) * g
        v *= BETA2
        v += (1.0 - BETA2) * (g * g)
        rate = lr[name] if isinstance(lr, Mapping) else lr
        if rate == 0.0:
            continue
        step = (rate / bc1) * m / (np.sqrt(v / bc2) + EPS)
        p -= step.astype(p.dtype)
    return state
