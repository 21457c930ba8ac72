"""Recall tables over a dataset and the end-to-end desk pipeline.

The database holds the visual-head shape embedding of every object; a
query fuses the first ``V`` view features of an object either with the
learned aggregator or with plain mean pooling.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import RunConfig
from .data import generate_synthetic_dataset, load_dataset
from .mvagg import mean_pool_baseline
from .retrieval import RetrievalIndex, build_index, encode_index, query_topk, recall_at_k
from .training import LossLog, RetrievalModel, frozen_targets, train_stage1, train_stage2

DEFAULT_VIEWS = (1, 2, 3, 6, 12)
DEFAULT_KS = (1, 3, 5, 10)
POOLING = ("learned", "mean")


@dataclass
class RecallTable:
    """Recall keyed by ``(views, K)``."""

    recall: dict

    def __getitem__(self, key):
        return self.recall[key]

    def csv(self) -> str:
        rows = ["views,K,recall"]
        for (v, k), r in sorted(self.recall.items()):
            rows.append(f"{v},{k},{r:.6f}")
        return "\n".join(rows) + "\n"

    def views(self) -> list[int]:
        return sorted({v for v, _ in self.recall})


def embed_database(model: RetrievalModel, dataset) -> RetrievalIndex:
    targets = frozen_targets(model, dataset)
    return build_index((s.object_id, e) for s, e in zip(dataset.samples, targets))


def fuse_views(model: RetrievalModel, views: np.ndarray, pooling: str = "learned") -> np.ndarray:
    if pooling == "learned":
        return model.aggregator.aggregate(views).f_mvimg
    if pooling == "mean":
        return mean_pool_baseline(views)
    raise ValueError(f"unknown pooling {pooling!r}; expected one of {POOLING}")


def evaluate(model: RetrievalModel, dataset, index: RetrievalIndex, views=DEFAULT_VIEWS,
             ks=DEFAULT_KS, pooling: str = "learned") -> RecallTable:
    """Recall@K for queries made of each object's first ``V`` views."""
    ks = sorted(set(ks))
    top = min(max(ks), len(index))
    table = {}
    for v in views:
        results = []
        for s in dataset.samples:
            if v > len(s.views):
                raise ValueError(f"{s.object_id} has {len(s.views)} views, {v} requested")
            results.append((s.object_id, query_topk(index, fuse_views(model, s.views[:v], pooling), top)))
        report = recall_at_k(results, [k for k in ks if k <= top])
        for k, r in report.recall.items():
            table[(v, k)] = r
    return RecallTable(table)


@dataclass
class PipelineResult:
    model: RetrievalModel
    dataset: object
    stage1: bytes
    stage2: bytes
    index: RetrievalIndex
    table: RecallTable
    timings: dict

    @property
    def index_bytes(self) -> bytes:
        return encode_index(self.index)


def run_pipeline(cfg: RunConfig, workdir, views=DEFAULT_VIEWS, ks=DEFAULT_KS,
                 pooling: str = "learned") -> PipelineResult:
    """gen-data, stage 1, stage 2, index over all objects, recall table."""
    workdir = Path(workdir)
    d = cfg.data
    timings = {}
    t0 = time.perf_counter()
    generate_synthetic_dataset(
        workdir / "data", n_objects=d.n_objects, n_classes=d.n_classes, views_per_object=d.views,
        seed=cfg.seed, points=d.points, dim=d.dim, text=d.text, textureless=d.textureless,
    )
    dataset = load_dataset(workdir / "data")
    timings["gen"] = time.perf_counter() - t0
    model = RetrievalModel(cfg)
    t0 = time.perf_counter()
    ck1 = train_stage1(dataset, model, LossLog(workdir / "loss.csv"))
    timings["stage1"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    ck2 = train_stage2(dataset, model, ck1, LossLog(workdir / "loss.csv"))
    timings["stage2"] = time.perf_counter() - t0
    index = embed_database(model, dataset)
    views = [v for v in views if v <= d.views]
    table = evaluate(model, dataset, index, views, ks, pooling)
    return PipelineResult(model, dataset, ck1.to_bytes(), ck2.to_bytes(), index, table, timings)
