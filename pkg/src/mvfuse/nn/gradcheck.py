"""Central finite-difference checks of tape gradients."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .params import ParamStore
from .tensor import Tape


@dataclass
class GradCheckResult:
    name: str
    worst_rel_err: float
    checked: int

    @property
    def ok(self) -> bool:
        return self.worst_rel_err <= 1e-4


def rel_err(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-8)


def analytic_grads(store: ParamStore, loss_fn) -> dict:
    store.zero_grad()
    with Tape() as tape:
        loss = loss_fn()
    tape.backward(loss, store)
    return {name: p.grad.copy() for name, p in store.items() if p.trainable}


def check_gradients(
    store: ParamStore,
    loss_fn,
    h: float = 1e-5,
    entries_per_param: int = 3,
    seed: int = 0,
    names=None,
) -> list[GradCheckResult]:
    """Compare tape gradients with central differences on a sample of entries.

    For each trainable parameter the entries with the largest analytic
    gradient magnitude are checked, plus random ones; ``loss_fn`` must be a
    zero-argument callable returning a scalar tensor built from ``store``.
    The store should be float64.
    """
    if store.dtype != np.float64:
        raise ValueError("finite-difference checks need a float64 store")
    grads = analytic_grads(store, loss_fn)
    rng = np.random.default_rng(seed)
    results = []
    for name, g in grads.items():
        if names is not None and name not in names:
            continue
        p = store[name]
        flat = g.ravel()
        k = min(entries_per_param, flat.size)
        top = np.argsort(-np.abs(flat), kind="stable")[: max(1, k - 1)]
        extra = rng.integers(0, flat.size, size=1)
        picks = list(dict.fromkeys([*top.tolist(), *extra.tolist()]))
        worst = 0.0
        for idx in picks:
            pos = np.unravel_index(idx, p.value.shape)
            orig = p.value[pos]
            p.value[pos] = orig + h
            up = float(loss_fn().data)
            p.value[pos] = orig - h
            down = float(loss_fn().data)
            p.value[pos] = orig
            numeric = (up - down) / (2 * h)
            worst = max(worst, rel_err(float(flat[idx]), numeric))
        results.append(GradCheckResult(name, worst, len(picks)))
    return results
