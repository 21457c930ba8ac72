"""Slow reference implementations used to cross-check the fast paths.

These use plain Python loops and full sorts, and share no code with the
modules they check.
"""
from __future__ import annotations

import math

import numpy as np


def _dist2(a, b) -> float:
    return sum((float(x) - float(y)) ** 2 for x, y in zip(a, b))


def fps_oracle(positions, count: int, start: int = 0) -> list[int]:
    """Greedy farthest point selection, recomputing every min-distance each round."""
    pts = [tuple(p) for p in np.asarray(positions)[:, :3]]
    chosen = [start]
    while len(chosen) < count:
        best, best_d = None, -1.0
        for i, p in enumerate(pts):
            if i in chosen:
                continue
            d = min(_dist2(p, pts[j]) for j in chosen)
            if d > best_d:
                best, best_d = i, d
        chosen.append(best)
    return chosen


def knn_oracle(positions, center_positions, size: int) -> list[list[int]]:
    """Indices of the ``size`` nearest points per center; ties go to the lower index."""
    pts = [tuple(p) for p in np.asarray(positions)[:, :3]]
    out = []
    for c in np.asarray(center_positions)[:, :3]:
        order = sorted(range(len(pts)), key=lambda i: (_dist2(pts[i], c), i))
        out.append(order[:size])
    return out


def topk_oracle(embeddings, query, k: int) -> list[int]:
    """Full sort of row scores, descending, earlier row first on ties."""
    emb = np.asarray(embeddings, dtype=np.float64)
    q = np.asarray(query, dtype=np.float64)
    scores = [float(row @ q) for row in emb]
    return sorted(range(len(scores)), key=lambda i: (-scores[i], i))[:k]


def info_nce_oracle(anchors, targets, tau: float) -> float:
    a = np.asarray(anchors, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    total = 0.0
    for i in range(len(a)):
        logits = [sum(a[i, c] * t[j, c] for c in range(a.shape[1])) / tau for j in range(len(t))]
        m = max(logits)
        denom = sum(math.exp(x - m) for x in logits)
        total -= (logits[i] - m) - math.log(denom)
    return total / len(a)


def recall_oracle(pairs, k: int) -> float:
    """``pairs`` are ``(true_id, ranked_ids)``."""
    hits = 0
    for true_id, ranked in pairs:
        for oid in ranked[:k]:
            if oid == true_id:
                hits += 1
                break
    return hits / len(pairs)


def softmax_oracle(row) -> list[float]:
    m = max(row)
    e = [math.exp(x - m) for x in row]
    s = sum(e)
    return [x / s for x in e]
