from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .params import ParamStore


class MissingGradError(RuntimeError):
    pass


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(store: ParamStore, state: AdamState) -> None:
    """Bias-corrected Adam update of every trainable parameter, in place.

    Frozen parameters are skipped even if they carry a gradient.
    """
    trainable = [p for p in store.values() if p.trainable]
    for p in trainable:
        if p.grad is None:
            raise MissingGradError(f"no gradient for {p.name}; run backward first")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for p in trainable:
        g = p.grad.astype(np.float64)
        m = state.m.get(p.name)
        v = state.v.get(p.name)
        if m is None:
            m = np.zeros_like(g)
            v = np.zeros_like(g)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[p.name] = m
        state.v[p.name] = v
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.value = (p.value.astype(np.float64) - update).astype(p.value.dtype)
