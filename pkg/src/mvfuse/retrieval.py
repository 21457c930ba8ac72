"""Exact cosine Top-K search over an ID-indexed embedding table.

Index file layout (little-endian)::

    b"FBIX" | u32 version | u32 d | u64 count
    count x ( u32 id_len | utf-8 id | d x f32 )
    u64 fnv1a of everything before
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .io import FormatError, Reader, seal, unseal

INDEX_MAGIC = b"FBIX"
INDEX_VERSION = 1


class IndexError_(ValueError):
    pass


@dataclass(frozen=True)
class RetrievalIndex:
    ids: tuple
    embeddings: np.ndarray  # (n, d) float32, unit rows
    _pos: dict = field(default_factory=dict, compare=False, repr=False)

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    def __len__(self):
        return len(self.ids)

    def position(self, object_id: str) -> int:
        if not self._pos:
            self._pos.update({oid: i for i, oid in enumerate(self.ids)})
        return self._pos[object_id]


@dataclass(frozen=True)
class QueryResult:
    hits: tuple  # ((object_id, score), ...), best first

    @property
    def ids(self) -> list[str]:
        return [h[0] for h in self.hits]

    @property
    def scores(self) -> list[float]:
        return [h[1] for h in self.hits]

    def __len__(self):
        return len(self.hits)


@dataclass
class RecallReport:
    recall: dict  # K -> fraction
    queries: int

    def __getitem__(self, k: int) -> float:
        return self.recall[k]


def build_index(entries) -> RetrievalIndex:
    """``entries`` is an iterable of ``(object_id, embedding)``; rows are re-normalised."""
    entries = list(entries)
    if not entries:
        raise IndexError_("empty index")
    ids = [str(e[0]) for e in entries]
    if len(set(ids)) != len(ids):
        seen, dup = set(), None
        for i in ids:
            if i in seen:
                dup = i
                break
            seen.add(i)
        raise IndexError_(f"duplicate id {dup!r}")
    dims = {np.asarray(e[1]).reshape(-1).shape[0] for e in entries}
    if len(dims) != 1:
        raise IndexError_(f"inconsistent embedding dims {sorted(dims)}")
    mat = np.stack([np.asarray(e[1], dtype=np.float64).reshape(-1) for e in entries])
    if not np.isfinite(mat).all():
        raise IndexError_("non-finite embedding")
    norms = np.linalg.norm(mat, axis=1)
    if (norms == 0).any():
        raise IndexError_(f"zero embedding for id {ids[int(np.argmin(norms))]!r}")
    emb = (mat / norms[:, None]).astype(np.float32)
    emb.setflags(write=False)
    return RetrievalIndex(tuple(ids), emb)


def _normalized_query(index: RetrievalIndex, q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64).reshape(-1)
    if q.shape[0] != index.dim:
        raise IndexError_(f"query dim {q.shape[0]} != index dim {index.dim}")
    n = np.linalg.norm(q)
    if not np.isfinite(n) or n == 0:
        raise IndexError_("zero or non-finite query")
    # rounding to the index precision makes results identical under positive rescaling
    return (q / n).astype(np.float32).astype(np.float64)


def scores(index: RetrievalIndex, q) -> np.ndarray:
    return index.embeddings.astype(np.float64) @ _normalized_query(index, q)


def query_topk(index: RetrievalIndex, q, k: int) -> QueryResult:
    """Exact cosine ranking; ties go to the earlier-inserted record."""
    if not 1 <= k <= len(index):
        raise IndexError_(f"K={k} out of range for an index of {len(index)}")
    s = scores(index, q)
    order = np.argsort(-s, kind="stable")[:k]
    return QueryResult(tuple((index.ids[i], float(s[i])) for i in order))


def recall_at_k(results, ks) -> RecallReport:
    """Fraction of ``(true_id, QueryResult)`` pairs whose true id is in the Top-K.

    ``ks`` is one K or an iterable of them.
    """
    ks = [ks] if isinstance(ks, int) else list(ks)
    results = list(results)
    recall = {}
    for k in ks:
        if k < 1:
            raise IndexError_("K must be >= 1")
        hits = 0
        for true_id, res in results:
            if len(res) < k:
                raise IndexError_(f"K={k} exceeds result length {len(res)}")
            hits += true_id in res.ids[:k]
        recall[k] = hits / len(results) if results else 0.0
    return RecallReport(recall, len(results))


def encode_index(index: RetrievalIndex) -> bytes:
    parts = [INDEX_MAGIC, struct.pack("<IIQ", INDEX_VERSION, index.dim, len(index))]
    for oid, row in zip(index.ids, index.embeddings):
        raw = oid.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(np.ascontiguousarray(row, dtype="<f4").tobytes())
    return seal(b"".join(parts))


def decode_index(blob: bytes) -> RetrievalIndex:
    reader = Reader(unseal(blob, INDEX_MAGIC), len(INDEX_MAGIC))
    version, dim, count = reader.unpack("<IIQ")
    if version != INDEX_VERSION:
        raise FormatError(f"unsupported index version {version}")
    ids, rows = [], []
    for _ in range(count):
        (n,) = reader.unpack("<I")
        try:
            ids.append(reader.take(n).decode("utf-8"))
        except UnicodeDecodeError as exc:
            raise FormatError("index id is not UTF-8") from exc
        rows.append(np.frombuffer(reader.take(4 * dim), dtype="<f4"))
    if not reader.at_end():
        raise FormatError("trailing bytes in index file")
    if count == 0:
        raise FormatError("index file holds no records")
    if len(set(ids)) != len(ids):
        raise FormatError("duplicate ids in index file")
    emb = np.stack(rows).astype(np.float32)
    emb.setflags(write=False)
    return RetrievalIndex(tuple(ids), emb)


def save_index(index: RetrievalIndex, path) -> None:
    Path(path).write_bytes(encode_index(index))


def load_index(path) -> RetrievalIndex:
    return decode_index(Path(path).read_bytes())
