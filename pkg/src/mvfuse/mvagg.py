"""Two-stage multi-view feature aggregation.

Stage one refines the V view features with post-LN self-attention blocks
(no positional encoding, so rows stay exchangeable).  Stage two uses the
mean of the refined rows as the single query of a multi-head
cross-attention over those rows, then LayerNorm and L2 normalisation.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import tensor as T
from .nn.layers import AttentionConfig, FeedForward, LayerNorm, MultiHeadAttention
from .nn.params import ParamStore

PREFIX = "agg"


class DegenerateMeanError(ValueError):
    pass


@dataclass(frozen=True)
class AggregatorConfig:
    dim: int = 64
    layers: int = 2
    heads: int = 4
    ffn_expansion: int = 4

    def __post_init__(self):
        if min(self.dim, self.layers, self.heads, self.ffn_expansion) <= 0:
            raise ValueError("aggregator sizes must be positive")
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")

    @classmethod
    def full_scale(cls) -> "AggregatorConfig":
        return cls(dim=1280, layers=6, heads=8)


@dataclass
class FusedViewEmbedding:
    f_mvimg: np.ndarray
    beta: np.ndarray


class _PostLNBlock:
    def __init__(self, store, name, cfg: AggregatorConfig):
        self.attn = MultiHeadAttention(store, f"{name}.attn", AttentionConfig(cfg.dim, cfg.heads))
        self.ln1 = LayerNorm(store, f"{name}.ln1", cfg.dim)
        self.ffn = FeedForward(store, f"{name}.ffn", cfg.dim, cfg.ffn_expansion)
        self.ln2 = LayerNorm(store, f"{name}.ln2", cfg.dim)

    def __call__(self, x):
        y = self.ln1(x + self.attn(x, x)[0])
        return self.ln2(y + self.ffn(y))


class MultiViewAggregator:
    def __init__(self, store: ParamStore, cfg: AggregatorConfig, prefix: str = PREFIX):
        self.store = store
        self.cfg = cfg
        self.blocks = [_PostLNBlock(store, f"{prefix}.block{i}", cfg) for i in range(cfg.layers)]
        self.ln_in = LayerNorm(store, f"{prefix}.pool.ln_in", cfg.dim)
        self.pool_attn = MultiHeadAttention(
            store, f"{prefix}.pool.attn", AttentionConfig(cfg.dim, cfg.heads)
        )
        self.ln_out = LayerNorm(store, f"{prefix}.pool.ln_out", cfg.dim)

    def _input(self, views):
        x = views if isinstance(views, T.Tensor) else T.Tensor(np.asarray(views, dtype=self.store.dtype))
        if x.shape[-1] != self.cfg.dim:
            raise T.ShapeError(f"view features have width {x.shape[-1]}, expected {self.cfg.dim}")
        return x

    def self_attend(self, views):
        """(..., V, C) -> (..., V, C)."""
        x = self._input(views)
        for block in self.blocks:
            x = block(x)
        return x

    def consensus_pool(self, refined):
        """Returns the unit-norm fused tensor (..., C) and head-averaged weights (..., V)."""
        refined = self._input(refined)
        query = self.ln_in(T.mean(refined, axis=-2, keepdims=True))
        pooled, weights = self.pool_attn(query, self.ln_in(refined))
        pooled = self.ln_out(pooled)
        lead = pooled.shape[:-2]
        fused = T.l2_normalize(T.reshape(pooled, lead + (self.cfg.dim,)))
        beta = weights.mean(axis=-3)[..., 0, :]
        return fused, beta

    def __call__(self, views):
        return self.consensus_pool(self.self_attend(views))

    def aggregate(self, views) -> FusedViewEmbedding:
        """Fuse one object's (V, C) view matrix.

        Views are treated as a set: bitwise-identical rows are merged before
        attention and their weight is split evenly in the reported ``beta``.
        """
        x = np.asarray(views)
        if x.ndim != 2 or len(x) < 1:
            raise T.ShapeError(f"expected a (V, C) matrix, got shape {x.shape}")
        if not np.isfinite(x).all():
            raise T.NumericError("non-finite view feature")
        uniq, first, inverse, counts = _unique_rows(x)
        fused, beta = self(x[first])
        beta_full = beta[inverse] / counts[inverse]
        return FusedViewEmbedding(fused.data.copy(), beta_full)


def _unique_rows(x: np.ndarray):
    seen = {}
    first, inverse = [], []
    for i, row in enumerate(x):
        key = row.tobytes()
        if key not in seen:
            seen[key] = len(first)
            first.append(i)
        inverse.append(seen[key])
    inverse = np.asarray(inverse)
    counts = np.bincount(inverse)
    return len(first), np.asarray(first), inverse, counts


def self_attend_views(views, aggregator: MultiViewAggregator) -> np.ndarray:
    return aggregator.self_attend(views).data


def consensus_pool(refined, aggregator: MultiViewAggregator) -> FusedViewEmbedding:
    fused, beta = aggregator.consensus_pool(refined)
    return FusedViewEmbedding(fused.data, beta)


def aggregate(views, aggregator: MultiViewAggregator) -> FusedViewEmbedding:
    return aggregator.aggregate(views)


def mean_pool_baseline(views) -> np.ndarray:
    """Row mean, L2-normalised."""
    x = np.asarray(views, dtype=np.float64)
    if x.ndim != 2 or len(x) < 1:
        raise T.ShapeError(f"expected a (V, C) matrix, got shape {x.shape}")
    m = x.mean(axis=0)
    norm = np.linalg.norm(m)
    if norm < 1e-12:
        raise DegenerateMeanError("degenerate mean: view features cancel out")
    return m / norm
