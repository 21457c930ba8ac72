"""Parameterised building blocks.

Each layer registers its parameters in a :class:`ParamStore` under a dotted
prefix at construction time and reads them afresh on every call, so a store
can be reloaded from a checkpoint without rebuilding the layers.
"""
from __future__ import annotations

from dataclasses import dataclass

from . import tensor as T
from .params import ParamStore, ones_init, uniform_init, zeros_init


@dataclass(frozen=True)
class AttentionConfig:
    model_dim: int
    heads: int

    def __post_init__(self):
        if self.model_dim <= 0 or self.heads <= 0:
            raise ValueError("model_dim and heads must be positive")
        if self.model_dim % self.heads:
            raise ValueError(f"model_dim {self.model_dim} not divisible by heads {self.heads}")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.heads


def linear(x, W, b=None):
    """``x @ W (+ b)`` over the last axis; rank-1 inputs are treated as one row."""
    x = T.as_tensor(x)
    W = W.tensor() if hasattr(W, "tensor") else T.as_tensor(W)
    if x.shape[-1] != W.shape[0]:
        raise T.ShapeError(f"linear: input width {x.shape[-1]} vs weight {W.shape}")
    if x.ndim == 1:
        y = T.reshape(T.matmul(T.reshape(x, (1, -1)), W), (W.shape[1],))
    else:
        y = T.matmul(x, W)
    if b is not None:
        y = y + (b.tensor() if hasattr(b, "tensor") else T.as_tensor(b))
    return y


class Linear:
    def __init__(self, store: ParamStore, name: str, fan_in: int, fan_out: int, bias: bool = True):
        self.W = store.add(f"{name}.W", (fan_in, fan_out), uniform_init(fan_in))
        self.b = store.add(f"{name}.b", (fan_out,), zeros_init) if bias else None

    def __call__(self, x):
        return linear(x, self.W, self.b)


class LayerNorm:
    def __init__(self, store: ParamStore, name: str, dim: int, eps: float = 1e-5):
        if dim < 2:
            raise ValueError("layer norm needs width >= 2")
        self.gamma = store.add(f"{name}.gamma", (dim,), ones_init)
        self.beta = store.add(f"{name}.beta", (dim,), zeros_init)
        self.eps = eps

    def __call__(self, x):
        return T.layer_norm(x, self.gamma.tensor(), self.beta.tensor(), self.eps)


class MultiHeadAttention:
    """Projected multi-head attention with an output projection after the head concat."""

    def __init__(self, store: ParamStore, name: str, cfg: AttentionConfig):
        d = cfg.model_dim
        self.cfg = cfg
        # q/k/v are bias-free; a key bias would get an identically zero gradient.
        self.wq = Linear(store, f"{name}.wq", d, d, bias=False)
        self.wk = Linear(store, f"{name}.wk", d, d, bias=False)
        self.wv = Linear(store, f"{name}.wv", d, d, bias=False)
        self.wo = Linear(store, f"{name}.wo", d, d)

    def __call__(self, queries, keys_values):
        """Returns ``(output, weights)``; weights are (..., heads, m, n)."""
        queries, keys_values = T.as_tensor(queries), T.as_tensor(keys_values)
        if queries.shape[-1] != self.cfg.model_dim or keys_values.shape[-1] != self.cfg.model_dim:
            raise T.ShapeError("attention input width does not match model_dim")
        mixed, weights = T.attention(
            self.wq(queries), self.wk(keys_values), self.wv(keys_values), self.cfg.heads
        )
        return self.wo(mixed), weights


class FeedForward:
    def __init__(self, store: ParamStore, name: str, dim: int, expansion: int, activation=T.gelu):
        if expansion < 1:
            raise ValueError("expansion must be >= 1")
        self.fc1 = Linear(store, f"{name}.fc1", dim, dim * expansion)
        self.fc2 = Linear(store, f"{name}.fc2", dim * expansion, dim)
        self.activation = activation

    def __call__(self, x):
        return self.fc2(self.activation(self.fc1(x)))


def multi_head_attention(queries, keys_values, layer: MultiHeadAttention):
    return layer(queries, keys_values)[0]


def feed_forward(x, layer: FeedForward):
    return layer(x)
