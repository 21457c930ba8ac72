"""Synthetic dataset of procedural meshes with matching view and text features.

The view-feature provider is a deterministic stand-in for an image encoder:
it "looks" at a point cloud from a direction, rasterises a coarse 8x8 grid of
per-cell surface statistics and mixes it to ``C`` dims with a fixed random
projection.  Real encoder outputs can be dropped in as precomputed ``FBT1``
files instead.

Layout on disk::

    <root>/manifest.txt
    <root>/<object_id>/mesh.obj
    <root>/<object_id>/cloud.fbt        (N x 9, f32)
    <root>/<object_id>/views/<k>.fbt    (1 x C, f32)
    <root>/<object_id>/text.fbt         (C, f32; optional)
"""
from __future__ import annotations

import colorsys
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from . import geometry
from .io import FormatError, load_tensor, save_tensor
from .nn.tensor import NumericError

FAMILIES = ("box", "ellipsoid", "cylinder", "cone", "torus", "bracket")
GRID = 8
MANIFEST = "manifest.txt"
MANIFEST_HEADER = "mvfuse-dataset 1"


class DataError(ValueError):
    """Bad or missing dataset content."""


class NonFiniteDataError(DataError, NumericError):
    """An input file holds NaN or Inf; the CLI reports it as a numeric error."""


def object_rng(seed: int, key: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(key.encode())])


# -- procedural meshes -------------------------------------------------------


def _ring(n, radius_x, radius_y, z):
    t = 2 * np.pi * np.arange(n) / n
    return np.stack([radius_x * np.cos(t), radius_y * np.sin(t), np.full(n, z)], axis=1)


def _box(rng):
    sx, sy, sz = rng.uniform(0.5, 1.5, 3)
    v = np.array([[x, y, z] for x in (-sx, sx) for y in (-sy, sy) for z in (-sz, sz)]) / 2
    faces = [[0, 1, 3, 2], [4, 6, 7, 5], [0, 4, 5, 1], [2, 3, 7, 6], [0, 2, 6, 4], [1, 5, 7, 3]]
    return v, faces


def _ellipsoid(rng, stacks=8, slices=12):
    rx, ry, rz = rng.uniform(0.5, 1.3, 3)
    verts = [[0, 0, rz]]
    for i in range(1, stacks):
        phi = np.pi * i / stacks
        ring = _ring(slices, rx * np.sin(phi), ry * np.sin(phi), rz * np.cos(phi))
        verts.extend(ring.tolist())
    verts.append([0, 0, -rz])
    faces = []
    last = len(verts) - 1
    for j in range(slices):
        faces.append([0, 1 + j, 1 + (j + 1) % slices])
    for i in range(stacks - 2):
        a, b = 1 + i * slices, 1 + (i + 1) * slices
        for j in range(slices):
            k = (j + 1) % slices
            faces.append([a + j, b + j, b + k, a + k])
    base = 1 + (stacks - 2) * slices
    for j in range(slices):
        faces.append([last, base + (j + 1) % slices, base + j])
    return np.asarray(verts), faces


def _cylinder(rng, slices=12):
    rx, ry = rng.uniform(0.3, 0.8, 2)
    h = rng.uniform(0.8, 2.0)
    v = np.concatenate([_ring(slices, rx, ry, -h / 2), _ring(slices, rx, ry, h / 2)])
    faces = [[j, (j + 1) % slices, slices + (j + 1) % slices, slices + j] for j in range(slices)]
    faces.append(list(range(slices - 1, -1, -1)))
    faces.append(list(range(slices, 2 * slices)))
    return v, faces


def _cone(rng, slices=12):
    rx, ry = rng.uniform(0.4, 0.9, 2)
    h = rng.uniform(0.8, 2.0)
    tip = np.array([[rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3), h / 2]])
    v = np.concatenate([_ring(slices, rx, ry, -h / 2), tip])
    faces = [[j, (j + 1) % slices, slices] for j in range(slices)]
    faces.append(list(range(slices - 1, -1, -1)))
    return v, faces


def _torus(rng, major=12, minor=8):
    big = rng.uniform(0.6, 1.0)
    small = rng.uniform(0.15, 0.4)
    squash = rng.uniform(0.6, 1.4)
    verts = []
    for i in range(major):
        u = 2 * np.pi * i / major
        for j in range(minor):
            w = 2 * np.pi * j / minor
            r = big + small * np.cos(w)
            verts.append([r * np.cos(u), squash * r * np.sin(u), small * np.sin(w)])
    faces = []
    for i in range(major):
        for j in range(minor):
            a = i * minor + j
            b = ((i + 1) % major) * minor + j
            c = ((i + 1) % major) * minor + (j + 1) % minor
            d = i * minor + (j + 1) % minor
            faces.append([a, b, c, d])
    return np.asarray(verts), faces


def _bracket(rng):
    a, b = rng.uniform(0.8, 1.6, 2)
    t = rng.uniform(0.2, 0.45)
    depth = rng.uniform(0.4, 1.2)
    poly = np.array([[0, 0], [a, 0], [a, t], [t, t], [t, b], [0, b]])
    poly = poly - poly.mean(axis=0)
    n = len(poly)
    v = np.concatenate([
        np.column_stack([poly, np.full(n, -depth / 2)]),
        np.column_stack([poly, np.full(n, depth / 2)]),
    ])
    faces = [[j, (j + 1) % n, n + (j + 1) % n, n + j] for j in range(n)]
    # caps fan out from the outer corner of the L, which sees every other vertex
    faces.append([0] + list(range(n - 1, 0, -1)))
    faces.append(list(range(n, 2 * n)))
    return v, faces


_BUILDERS = {
    "box": _box, "ellipsoid": _ellipsoid, "cylinder": _cylinder,
    "cone": _cone, "torus": _torus, "bracket": _bracket,
}


def _class_color(label_index: int) -> np.ndarray:
    hue = (label_index * 0.61803398875) % 1.0
    return np.asarray(colorsys.hsv_to_rgb(hue, 0.75, 0.9))


def make_mesh(family: str, label_index: int, rng: np.random.Generator, colored: bool = True):
    """Vertices, polygon faces and optional vertex colours of one object."""
    verts, faces = _BUILDERS[family](rng)
    verts = np.asarray(verts, dtype=np.float64)
    # per-object deformation: anisotropic stretch and a taper along z
    verts = verts * rng.uniform(0.6, 1.5, 3)
    taper = rng.uniform(-0.5, 0.5)
    zspan = np.ptp(verts[:, 2]) or 1.0
    verts[:, :2] *= (1.0 + taper * (verts[:, 2] - verts[:, 2].mean()) / zspan)[:, None]
    colors = None
    if colored:
        # class hue, per-object brightness and a shading gradient along a random axis
        base = np.clip(_class_color(label_index) + rng.uniform(-0.12, 0.12, 3), 0.05, 1.0)
        base = base * rng.uniform(0.35, 1.0)
        axis = rng.normal(size=3)
        t = verts @ (axis / np.linalg.norm(axis))
        t = (t - t.min()) / (np.ptp(t) or 1.0)
        colors = np.clip(base[None, :] * (0.4 + 0.6 * t[:, None]), 0.0, 1.0)
    return verts, faces, colors


def mesh_to_obj(verts, faces, colors=None) -> str:
    lines = []
    for i, v in enumerate(verts):
        row = "v {:.6f} {:.6f} {:.6f}".format(*v)
        if colors is not None:
            row += " {:.6f} {:.6f} {:.6f}".format(*colors[i])
        lines.append(row)
    for f in faces:
        lines.append("f " + " ".join(str(i + 1) for i in f))
    return "\n".join(lines) + "\n"


# -- view / text feature providers -------------------------------------------


def fibonacci_directions(n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` quasi-uniform unit vectors, randomly rotated."""
    i = np.arange(n) + 0.5
    z = 1.0 - 2.0 * i / n
    r = np.sqrt(np.clip(1.0 - z * z, 0.0, None))
    theta = np.pi * (1.0 + 5**0.5) * i
    dirs = np.stack([r * np.cos(theta), r * np.sin(theta), z], axis=1)
    rot = Rotation.random(random_state=rng).as_matrix()
    dirs = dirs @ rot.T
    return dirs / np.linalg.norm(dirs, axis=1, keepdims=True)


def rotation_to_z(direction: np.ndarray) -> np.ndarray:
    """Rotation matrix ``R`` with ``R @ direction == +z``."""
    d = np.asarray(direction, dtype=np.float64)
    z = np.array([0.0, 0.0, 1.0])
    c = float(d @ z)
    if c > 1.0 - 1e-12:
        return np.eye(3)
    if c < -1.0 + 1e-12:
        return np.diag([1.0, -1.0, -1.0])
    axis = np.cross(d, z)
    s = np.linalg.norm(axis)
    k = axis / s
    K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + s * K + (1 - c) * (K @ K)


def projection_matrix(dim: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng([seed, 0x51E77])
    return rng.normal(0.0, 1.0 / math.sqrt(3 * GRID * GRID), size=(dim, 3 * GRID * GRID))


def view_descriptor(pc: np.ndarray, view_dir) -> np.ndarray:
    """Raw 8x8x3 grid (depth, facing, luminance), flattened to 192 values.

    Points whose normal makes ``normal . view_dir >= 0.2`` are treated as
    hidden.  Depth is measured from the far plane, so the nearest surface in
    a cell has the largest value.
    """
    v = np.asarray(view_dir, dtype=np.float64)
    norm = np.linalg.norm(v)
    if norm < 1e-12:
        raise ValueError("zero view direction")
    if abs(norm - 1.0) > 1e-5:
        raise ValueError(f"view direction must be unit length, got norm {norm:.6g}")
    pc = np.asarray(pc, dtype=np.float64)
    facing = pc[:, geometry.NORMAL] @ v
    vis = pc[facing < 0.2]
    grid = np.zeros((GRID * GRID, 3))
    if len(vis):
        p = vis[:, geometry.POS] @ rotation_to_z(v).T
        ij = np.clip(np.floor((p[:, :2] + 1.0) * 0.5 * GRID).astype(np.int64), 0, GRID - 1)
        cell = ij[:, 0] * GRID + ij[:, 1]
        count = np.bincount(cell, minlength=GRID * GRID)
        depth = 1.0 - p[:, 2]
        best = np.full(GRID * GRID, -np.inf)
        np.maximum.at(best, cell, depth)
        lum = vis[:, geometry.COLOR] @ np.array([0.299, 0.587, 0.114])
        filled = count > 0
        grid[filled, 0] = best[filled]
        grid[:, 1] = np.bincount(cell, weights=facing[facing < 0.2], minlength=GRID * GRID)
        grid[:, 2] = np.bincount(cell, weights=lum, minlength=GRID * GRID)
        grid[filled, 1:] /= count[filled, None]
    return grid.ravel()


def synthetic_view_features(pc: np.ndarray, view_dir, dim: int, seed: int) -> np.ndarray:
    raw = view_descriptor(pc, view_dir)
    feat = projection_matrix(dim, seed) @ raw
    n = np.linalg.norm(feat)
    if n == 0:
        raise ValueError("object is invisible from this direction")
    return feat / n


def text_feature(label: str, dim: int, seed: int) -> np.ndarray:
    rng = object_rng(seed, f"class:{label}")
    t = rng.normal(size=dim)
    return t / np.linalg.norm(t)


class SyntheticViewProvider:
    """Computes view features from a cloud and a list of directions."""

    def __init__(self, dim: int, seed: int):
        self.dim = dim
        self.seed = seed

    def __call__(self, pc: np.ndarray, directions) -> np.ndarray:
        return np.stack([synthetic_view_features(pc, d, self.dim, self.seed) for d in directions])


def load_view_features(path) -> np.ndarray:
    """Read a ``V x C`` FBT1 tensor and check it is finite."""
    try:
        arr = load_tensor(path)
    except FormatError as exc:
        raise DataError(f"{path}: {exc}") from exc
    if arr.ndim != 2:
        raise DataError(f"{path}: view features must be rank 2 (V x C), got rank {arr.ndim}")
    bad = np.argwhere(~np.isfinite(arr))
    if len(bad):
        r, c = bad[0]
        raise NonFiniteDataError(f"{path}: non-finite value at row {r}, col {c}")
    return arr


class PrecomputedViewProvider:
    """Reads ``views/<k>.fbt`` files written by ``gen-data`` or an external encoder."""

    def __init__(self, root):
        self.root = Path(root)

    def __call__(self, object_id: str) -> np.ndarray:
        vdir = self.root / object_id / "views"
        files = sorted(vdir.glob("*.fbt"), key=lambda p: int(p.stem))
        if not files:
            raise DataError(f"{vdir}: no view feature files")
        return np.concatenate([load_view_features(f) for f in files], axis=0)


# -- dataset -----------------------------------------------------------------


@dataclass
class TripletSample:
    object_id: str
    label: str
    views: np.ndarray  # (V, C)
    cloud: np.ndarray  # (N, 9)
    text: np.ndarray | None = None


@dataclass
class DatasetManifest:
    root: Path
    meta: dict = field(default_factory=dict)
    entries: list = field(default_factory=list)  # dicts: id, label, mesh, views, n_views, text


@dataclass
class Dataset:
    manifest: DatasetManifest
    samples: list

    def __len__(self):
        return len(self.samples)

    @property
    def feature_dim(self) -> int:
        return self.samples[0].views.shape[1]


def generate_synthetic_dataset(
    out_dir,
    n_objects: int = 64,
    n_classes: int = 6,
    views_per_object: int = 12,
    seed: int = 0,
    points: int = 2048,
    dim: int = 64,
    text: bool = True,
    textureless: bool = False,
) -> DatasetManifest:
    if not 1 <= n_classes <= n_objects:
        raise ValueError("need n_objects >= n_classes >= 1")
    if views_per_object < 1:
        raise ValueError("need at least one view per object")
    root = Path(out_dir)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create {root}: {exc}") from exc
    provider = SyntheticViewProvider(dim, seed)
    labels = [
        FAMILIES[c % len(FAMILIES)] + ("" if c < len(FAMILIES) else str(c // len(FAMILIES)))
        for c in range(n_classes)
    ]
    manifest = DatasetManifest(root, {
        "seed": seed, "points": points, "dim": dim, "views": views_per_object,
        "text": int(text), "textureless": int(textureless),
    })
    for i in range(n_objects):
        oid = f"obj_{i:04d}"
        cls = i % n_classes
        family = FAMILIES[cls % len(FAMILIES)]
        rng = object_rng(seed, oid)
        verts, faces, colors = make_mesh(family, cls, rng, colored=not textureless)
        obj_text = mesh_to_obj(verts, faces, colors)
        mesh = geometry.load_obj(obj_text)
        cloud = geometry.normalize_cloud(geometry.sample_surface(mesh, points, int(rng.integers(2**63))))
        cloud = cloud.astype(np.float32)
        dirs = fibonacci_directions(views_per_object, rng)
        feats = provider(cloud.astype(np.float64), dirs).astype(np.float32)
        odir = root / oid
        (odir / "views").mkdir(parents=True, exist_ok=True)
        (odir / "mesh.obj").write_text(obj_text)
        save_tensor(odir / "cloud.fbt", cloud)
        for k, f in enumerate(feats):
            save_tensor(odir / "views" / f"{k}.fbt", f[None, :])
        text_rel = "-"
        if text:
            save_tensor(odir / "text.fbt", text_feature(labels[cls], dim, seed).astype(np.float32))
            text_rel = f"{oid}/text.fbt"
        manifest.entries.append({
            "id": oid, "label": labels[cls], "mesh": f"{oid}/mesh.obj",
            "views": f"{oid}/views", "n_views": views_per_object, "text": text_rel,
        })
    write_manifest(manifest)
    return manifest


def write_manifest(manifest: DatasetManifest) -> None:
    lines = [MANIFEST_HEADER]
    for k in sorted(manifest.meta):
        lines.append(f"meta {k} {manifest.meta[k]}")
    for e in manifest.entries:
        lines.append(f"object {e['id']} {e['label']} {e['mesh']} {e['views']} {e['n_views']} {e['text']}")
    (manifest.root / MANIFEST).write_text("\n".join(lines) + "\n")


def read_manifest(root) -> DatasetManifest:
    root = Path(root)
    path = root / MANIFEST
    if not path.is_file():
        raise DataError(f"{path}: manifest not found")
    lines = path.read_text().splitlines()
    if not lines or lines[0].strip() != MANIFEST_HEADER:
        raise DataError(f"{path}: unrecognised manifest header")
    manifest = DatasetManifest(root)
    ids = set()
    for n, line in enumerate(lines[1:], 2):
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "meta" and len(parts) == 3:
            manifest.meta[parts[1]] = int(parts[2]) if parts[2].lstrip("-").isdigit() else parts[2]
        elif parts[0] == "object" and len(parts) == 7:
            _, oid, label, mesh, views, n_views, text = parts
            if oid in ids:
                raise DataError(f"{path}:{n}: duplicate object id {oid}")
            ids.add(oid)
            if int(n_views) < 1:
                raise DataError(f"{path}:{n}: object {oid} has no views")
            manifest.entries.append({
                "id": oid, "label": label, "mesh": mesh, "views": views,
                "n_views": int(n_views), "text": text,
            })
        else:
            raise DataError(f"{path}:{n}: malformed line")
    for e in manifest.entries:
        for key in ("mesh", "views") + (("text",) if e["text"] != "-" else ()):
            if not (root / e[key]).exists():
                raise DataError(f"{root / e[key]}: referenced file missing")
    return manifest


def load_dataset(root) -> Dataset:
    manifest = read_manifest(root)
    root = manifest.root
    views_of = PrecomputedViewProvider(root)
    seed = int(manifest.meta.get("seed", 0))
    points = int(manifest.meta.get("points", 2048))
    samples = []
    for e in manifest.entries:
        views = views_of(e["id"])
        if len(views) != e["n_views"]:
            raise DataError(f"{e['id']}: expected {e['n_views']} views, found {len(views)}")
        cloud_path = root / e["id"] / "cloud.fbt"
        if cloud_path.is_file():
            cloud = load_tensor(cloud_path)
        else:
            mesh = geometry.load_obj((root / e["mesh"]).read_bytes())
            cloud = geometry.normalize_cloud(
                geometry.sample_surface(mesh, points, zlib.crc32(f"{seed}:{e['id']}".encode()))
            )
        if cloud.ndim != 2 or cloud.shape[1] != 9:
            raise DataError(f"{cloud_path}: point cloud must be N x 9")
        text = None
        if e["text"] != "-":
            text = load_tensor(root / e["text"]).reshape(-1)
            if text.shape[0] != views.shape[1]:
                raise DataError(f"{e['id']}: text feature width differs from view width")
        samples.append(TripletSample(e["id"], e["label"], views, cloud, text))
    if not samples:
        raise DataError(f"{root}: dataset is empty")
    dims = {s.views.shape[1] for s in samples}
    if len(dims) != 1:
        raise DataError(f"{root}: inconsistent view feature widths {sorted(dims)}")
    return Dataset(manifest, samples)
