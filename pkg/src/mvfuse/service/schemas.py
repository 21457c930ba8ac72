"""Request and response bodies."""
from __future__ import annotations

from typing import Literal

from pydantic import BaseModel, Field, model_validator


class Health(BaseModel):
    status: str
    objects: int
    dim: int
    config_hash: str


class IndexInfo(BaseModel):
    dim: int
    count: int
    ids: list[str]


class ViewsRequest(BaseModel):
    views: list[list[float]] = Field(min_length=1, description="V x C view features")
    pooling: Literal["learned", "mean"] = "learned"


class FusedViews(BaseModel):
    embedding: list[float]
    beta: list[float] | None = None


class QueryRequest(BaseModel):
    """Either a ready embedding or a view matrix to fuse first."""

    embedding: list[float] | None = Field(default=None, min_length=1)
    views: list[list[float]] | None = Field(default=None, min_length=1)
    pooling: Literal["learned", "mean"] = "learned"
    topk: int = Field(default=5, ge=1)

    @model_validator(mode="after")
    def _one_input(self):
        if (self.embedding is None) == (self.views is None):
            raise ValueError("give exactly one of 'embedding' or 'views'")
        return self


class Hit(BaseModel):
    rank: int
    id: str
    score: float


class QueryResponse(BaseModel):
    hits: list[Hit]
    beta: list[float] | None = None
