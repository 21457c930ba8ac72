"""FastAPI application: the index and model are loaded once at startup."""
from __future__ import annotations

import numpy as np
from fastapi import FastAPI, HTTPException

from ..config import RunConfig
from ..evaluation import fuse_views
from ..mvagg import DegenerateMeanError
from ..nn.tensor import NumericError, ShapeError
from ..retrieval import IndexError_, RetrievalIndex, load_index, query_topk
from ..training import Checkpoint, RetrievalModel, model_from_checkpoint
from .schemas import FusedViews, Health, Hit, IndexInfo, QueryRequest, QueryResponse, ViewsRequest

_INPUT_ERRORS = (IndexError_, ShapeError, NumericError, DegenerateMeanError, ValueError)


def _fuse(model: RetrievalModel, views, pooling: str):
    x = np.asarray(views, dtype=np.float32)
    if x.ndim != 2:
        raise ShapeError("views must be a rectangular V x C matrix")
    if pooling == "learned":
        out = model.aggregator.aggregate(x)
        return out.f_mvimg, out.beta
    return fuse_views(model, x, "mean"), None


def build_app(index: RetrievalIndex, model: RetrievalModel) -> FastAPI:
    app = FastAPI(title="mvfuse retrieval")
    cfg_hash = f"{model.cfg.config_hash():016x}"

    @app.get("/health", response_model=Health)
    def health():
        return Health(status="ok", objects=len(index), dim=index.dim, config_hash=cfg_hash)

    @app.get("/index", response_model=IndexInfo)
    def index_info():
        return IndexInfo(dim=index.dim, count=len(index), ids=list(index.ids))

    @app.post("/embed/views", response_model=FusedViews)
    def embed_views(req: ViewsRequest):
        try:
            fused, beta = _fuse(model, req.views, req.pooling)
        except _INPUT_ERRORS as exc:
            raise HTTPException(status_code=400, detail=str(exc)) from None
        return FusedViews(embedding=[float(v) for v in fused],
                          beta=None if beta is None else [float(b) for b in beta])

    @app.post("/query", response_model=QueryResponse)
    def query(req: QueryRequest):
        beta = None
        try:
            if req.views is not None:
                q, beta = _fuse(model, req.views, req.pooling)
            else:
                q = np.asarray(req.embedding, dtype=np.float64)
            result = query_topk(index, q, req.topk)
        except _INPUT_ERRORS as exc:
            raise HTTPException(status_code=400, detail=str(exc)) from None
        hits = [Hit(rank=i, id=oid, score=s) for i, (oid, s) in enumerate(result.hits, 1)]
        return QueryResponse(hits=hits, beta=None if beta is None else [float(b) for b in beta])

    return app


def create_app(index_path, ckpt_path, cfg: RunConfig) -> FastAPI:
    model = model_from_checkpoint(cfg, Checkpoint.load(ckpt_path))
    return build_app(load_index(index_path), model)
