"""Mesh ingestion and point-set geometry.

Point clouds are ``(N, 9)`` arrays with columns
``[x, y, z, R, G, B, Nx, Ny, Nz]``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

GRAY_FILL = 0.8
POS = slice(0, 3)
COLOR = slice(3, 6)
NORMAL = slice(6, 9)


class MeshError(ValueError):
    pass


@dataclass
class MeshModel:
    vertices: np.ndarray  # (V, 3)
    faces: np.ndarray  # (F, 3) int
    colors: np.ndarray | None = None  # (V, 3) in [0, 1]

    def face_areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(_face_cross(self), axis=1)

    def face_normals(self) -> np.ndarray:
        cross = _face_cross(self)
        return cross / np.linalg.norm(cross, axis=1, keepdims=True)


def _face_cross(mesh: MeshModel) -> np.ndarray:
    a, b, c = (mesh.vertices[mesh.faces[:, i]] for i in range(3))
    return np.cross(b - a, c - a)


@dataclass
class PatchSet:
    centers: np.ndarray  # (P,) indices into the cloud
    center_pos: np.ndarray  # (P, 3) positions before re-centering
    members: np.ndarray  # (P, N') indices
    patches: np.ndarray  # (P, N', 9) with positions relative to the center


def _parse_index(tok: str, n_vertices: int, lineno: int) -> int:
    head = tok.split("/")[0]
    try:
        idx = int(head)
    except ValueError:
        raise MeshError(f"line {lineno}: bad face index {tok!r}") from None
    if idx < 0:
        idx = n_vertices + idx
    else:
        idx -= 1
    if not 0 <= idx < n_vertices:
        raise MeshError(f"line {lineno}: face index {tok!r} out of range")
    return idx


def load_obj(data) -> MeshModel:
    """Parse the ``v``/``f`` subset of Wavefront OBJ.

    ``v x y z [r g b]`` lines supply positions and optional colours.  Faces
    with more than three corners are fan-triangulated from their first
    corner.  ``vn``/``vt`` and other statements are ignored.  Zero-area
    triangles are dropped.
    """
    text = data.decode("utf-8") if isinstance(data, (bytes, bytearray)) else str(data)
    verts, cols, faces = [], [], []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tag, *rest = line.split()
        if tag == "v":
            if len(rest) not in (3, 6):
                raise MeshError(f"line {lineno}: expected 3 or 6 numbers after 'v'")
            try:
                nums = [float(t) for t in rest]
            except ValueError:
                raise MeshError(f"line {lineno}: non-numeric vertex") from None
            verts.append(nums[:3])
            cols.append(nums[3:] if len(nums) == 6 else None)
        elif tag == "f":
            if len(rest) < 3:
                raise MeshError(f"line {lineno}: face needs at least 3 corners")
            idx = [_parse_index(t, len(verts), lineno) for t in rest]
            for i in range(1, len(idx) - 1):
                faces.append((idx[0], idx[i], idx[i + 1]))
    if not faces:
        raise MeshError("mesh has no faces")
    vertices = np.asarray(verts, dtype=np.float64)
    if not np.isfinite(vertices).all():
        raise MeshError("non-finite vertex coordinate")
    colors = None
    if any(c is not None for c in cols):
        if any(c is None for c in cols):
            raise MeshError("vertex colours given for some vertices only")
        colors = np.clip(np.asarray(cols, dtype=np.float64), 0.0, 1.0)
    mesh = MeshModel(vertices, np.asarray(faces, dtype=np.int64), colors)
    keep = mesh.face_areas() > 0
    if not keep.any():
        raise MeshError("all faces are degenerate")
    mesh.faces = mesh.faces[keep]
    return mesh


def sample_surface(mesh: MeshModel, n: int, seed: int) -> np.ndarray:
    """Area-weighted uniform surface sample of ``n`` points.

    Each point inherits the unit normal of its face; colours are
    barycentric blends of vertex colours, or the 0.8 gray fill when the mesh
    carries none.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    areas = mesh.face_areas()
    total = areas.sum()
    if not total > 0:
        raise MeshError("all faces are degenerate")
    rng = np.random.default_rng(seed)
    face = rng.choice(len(areas), size=n, p=areas / total)
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    w = np.stack([1.0 - r1, r1 * (1.0 - r2), r1 * r2], axis=1)
    tri = mesh.faces[face]
    pos = np.einsum("nk,nkd->nd", w, mesh.vertices[tri])
    if mesh.colors is None:
        color = np.full((n, 3), GRAY_FILL)
    else:
        color = np.clip(np.einsum("nk,nkd->nd", w, mesh.colors[tri]), 0.0, 1.0)
    normal = mesh.face_normals()[face]
    return np.concatenate([pos, color, normal], axis=1)


def sample_faces(mesh: MeshModel, n: int, seed: int) -> np.ndarray:
    """Face indices that :func:`sample_surface` draws for the same seed."""
    areas = mesh.face_areas()
    rng = np.random.default_rng(seed)
    return rng.choice(len(areas), size=n, p=areas / areas.sum())


def normalize_cloud(pc: np.ndarray) -> np.ndarray:
    """Centre positions on the centroid and scale the farthest point to radius 1."""
    out = np.array(pc, dtype=np.float64, copy=True)
    pos = out[:, POS] - out[:, POS].mean(axis=0)
    radius = np.sqrt((pos * pos).sum(axis=1)).max()
    if radius > 0:
        pos = pos / radius
    out[:, POS] = pos
    return out


def fill_textureless(pc: np.ndarray) -> np.ndarray:
    out = np.array(pc, copy=True)
    out[:, COLOR] = GRAY_FILL
    return out


def farthest_point_sample(pc: np.ndarray, count: int, start: int = 0) -> np.ndarray:
    """Greedy farthest point sampling on positions.

    Ties go to the lowest index; points already chosen are never re-chosen.
    """
    pos = np.asarray(pc)[:, POS].astype(np.float64)
    n = len(pos)
    if not 1 <= count <= n:
        raise ValueError(f"cannot pick {count} of {n} points")
    if not 0 <= start < n:
        raise ValueError(f"start index {start} out of range")
    chosen = np.empty(count, dtype=np.int64)
    chosen[0] = start
    diff = pos - pos[start]
    dist = (diff * diff).sum(axis=1)
    dist[start] = -1.0
    for i in range(1, count):
        nxt = int(np.argmax(dist))
        chosen[i] = nxt
        diff = pos - pos[nxt]
        np.minimum(dist, (diff * diff).sum(axis=1), out=dist)
        dist[chosen[: i + 1]] = -1.0
    return chosen


def knn_group(pc: np.ndarray, centers, size: int) -> PatchSet:
    """``size`` nearest neighbours of each centre (ties by lowest index)."""
    pc = np.asarray(pc)
    centers = np.asarray(centers, dtype=np.int64)
    n = len(pc)
    if not 1 <= size <= n:
        raise ValueError(f"patch size {size} invalid for {n} points")
    pos = pc[:, POS].astype(np.float64)
    cpos = pos[centers]
    diff = pos[None, :, :] - cpos[:, None, :]
    dist = (diff * diff).sum(axis=2)
    members = np.argsort(dist, axis=1, kind="stable")[:, :size]
    patches = pc[members].astype(np.float64)
    patches[:, :, POS] -= cpos[:, None, :]
    return PatchSet(centers, cpos, members, patches)
