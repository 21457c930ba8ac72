"""Normal-aware point-cloud transformer encoder.

Pipeline: normalise -> FPS centres -> kNN patches -> Mini-PointNet tokens
plus a positional MLP on patch centres -> learned CLS token -> pre-LN
transformer blocks -> final LayerNorm -> CLS row -> shared projection.
Two adapter heads (image / text) branch off the CLS row with a residual
bypass through the shared projection.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import geometry
from .nn import tensor as T
from .nn.layers import AttentionConfig, FeedForward, LayerNorm, Linear, MultiHeadAttention
from .nn.params import ParamStore, normal_init

PREFIX = "enc"


@dataclass(frozen=True)
class Encoder3DConfig:
    layers: int = 4
    heads: int = 4
    hidden: int = 64
    mlp_expansion: int = 3
    patches: int = 32
    patch_size: int = 16
    joint_dim: int = 64
    pointnet_width: int = 128
    adapters: bool = True
    use_normals: bool = True

    def __post_init__(self):
        for name in ("layers", "heads", "hidden", "mlp_expansion", "patches", "patch_size",
                     "joint_dim", "pointnet_width"):
            if getattr(self, name) <= 0:
                raise ValueError(f"encoder {name} must be positive")
        if self.hidden % self.heads:
            raise ValueError(f"hidden {self.hidden} not divisible by heads {self.heads}")

    @classmethod
    def full_scale(cls, joint_dim: int = 1280) -> "Encoder3DConfig":
        return cls(layers=12, heads=8, hidden=512, mlp_expansion=3, patches=512,
                   patch_size=32, joint_dim=joint_dim)


@dataclass
class ShapeEmbedding:
    f_3d: np.ndarray
    f_3d_img: np.ndarray | None = None
    f_3d_txt: np.ndarray | None = None

    @property
    def visual(self) -> np.ndarray:
        """Embedding used for image retrieval: the image head when present."""
        return self.f_3d if self.f_3d_img is None else self.f_3d_img


def prepare_patches(pc: np.ndarray, cfg: Encoder3DConfig):
    """Geometry half of the pipeline: ``(patches (P, N', 9), centres (P, 3))``."""
    pc = np.asarray(pc, dtype=np.float64)
    if pc.ndim != 2 or pc.shape[1] != 9:
        raise T.ShapeError(f"point cloud must be (N, 9), got {pc.shape}")
    if len(pc) < cfg.patches or len(pc) < cfg.patch_size:
        raise ValueError(
            f"cloud of {len(pc)} points is smaller than patches={cfg.patches} "
            f"or patch_size={cfg.patch_size}"
        )
    pc = geometry.normalize_cloud(pc)
    centers = geometry.farthest_point_sample(pc, cfg.patches)
    group = geometry.knn_group(pc, centers, cfg.patch_size)
    patches = group.patches
    if not cfg.use_normals:
        patches = patches.copy()
        patches[:, :, geometry.NORMAL] = 0.0
    return patches, group.center_pos


class _PreLNBlock:
    def __init__(self, store, name, cfg: Encoder3DConfig):
        self.ln1 = LayerNorm(store, f"{name}.ln1", cfg.hidden)
        self.attn = MultiHeadAttention(store, f"{name}.attn", AttentionConfig(cfg.hidden, cfg.heads))
        self.ln2 = LayerNorm(store, f"{name}.ln2", cfg.hidden)
        self.ffn = FeedForward(store, f"{name}.ffn", cfg.hidden, cfg.mlp_expansion)

    def __call__(self, x):
        h = self.ln1(x)
        x = x + self.attn(h, h)[0]
        return x + self.ffn(self.ln2(x))


class _Adapter:
    def __init__(self, store, name, cfg: Encoder3DConfig):
        self.fc1 = Linear(store, f"{name}.fc1", cfg.hidden, cfg.hidden)
        self.fc2 = Linear(store, f"{name}.fc2", cfg.hidden, cfg.joint_dim)

    def __call__(self, h):
        return self.fc2(T.gelu(self.fc1(h)))


class PointEncoder:
    def __init__(self, store: ParamStore, cfg: Encoder3DConfig, prefix: str = PREFIX):
        self.store = store
        self.cfg = cfg
        self.prefix = prefix
        w = cfg.pointnet_width
        self.pn1 = Linear(store, f"{prefix}.pointnet.fc1", 9, w)
        self.pn2 = Linear(store, f"{prefix}.pointnet.fc2", w, cfg.hidden)
        self.pos1 = Linear(store, f"{prefix}.pos.fc1", 3, cfg.hidden)
        self.pos2 = Linear(store, f"{prefix}.pos.fc2", cfg.hidden, cfg.hidden)
        self.cls = store.add(f"{prefix}.cls", (cfg.hidden,), normal_init(0.02))
        self.blocks = [_PreLNBlock(store, f"{prefix}.block{i}", cfg) for i in range(cfg.layers)]
        self.ln_final = LayerNorm(store, f"{prefix}.ln_final", cfg.hidden)
        self.proj = Linear(store, f"{prefix}.proj", cfg.hidden, cfg.joint_dim)
        if cfg.adapters:
            self.iaa = _Adapter(store, f"{prefix}.iaa", cfg)
            self.taa = _Adapter(store, f"{prefix}.taa", cfg)
        else:
            self.iaa = self.taa = None

    @property
    def dtype(self):
        return self.store.dtype

    def mini_pointnet(self, patches):
        """Shared per-point MLP then max over the points of each patch.

        ``patches`` is (..., N', 9); the result is (..., hidden).
        """
        x = T.as_tensor(np.asarray(patches, dtype=self.dtype))
        if x.shape[-1] != 9:
            raise T.ShapeError(f"patch rows must have 9 features, got {x.shape[-1]}")
        h = self.pn2(T.gelu(self.pn1(x)))
        return T.max(h, axis=-2)

    def hidden_cls(self, patches: np.ndarray, centers: np.ndarray):
        """CLS state after the final LayerNorm for a batch.

        ``patches`` is (B, P, N', 9) and ``centers`` (B, P, 3); returns (B, hidden).
        """
        patches = np.asarray(patches, dtype=self.dtype)
        centers = np.asarray(centers, dtype=self.dtype)
        b, p, k, _ = patches.shape
        hd = self.cfg.hidden
        tokens = T.reshape(self.mini_pointnet(patches.reshape(b * p, k, 9)), (b, p, hd))
        tokens = tokens + self.pos2(T.gelu(self.pos1(centers)))
        cls = T.reshape(self.cls.tensor(), (1, 1, hd))
        if b > 1:
            cls = T.concat([cls] * b, axis=0)
        x = T.concat([cls, tokens], axis=1)
        for block in self.blocks:
            x = block(x)
        x = self.ln_final(x)
        return T.reshape(x[:, 0:1, :], (b, hd))

    def heads(self, h):
        """``(f_3d, f_img, f_txt)`` tensors; adapter outputs are None when disabled."""
        base = self.proj(h)
        f3d = T.l2_normalize(base)
        if self.iaa is None:
            return f3d, None, None
        f_img = T.l2_normalize(base + self.iaa(h))
        f_txt = T.l2_normalize(base + self.taa(h))
        return f3d, f_img, f_txt

    def apply_adapters(self, h):
        if self.iaa is None:
            raise RuntimeError("adapters are disabled in this encoder config")
        _, f_img, f_txt = self.heads(h)
        return f_img, f_txt

    def forward(self, patches, centers):
        return self.heads(self.hidden_cls(patches, centers))

    def encode_prepared(self, patches, centers) -> list[ShapeEmbedding]:
        f3d, f_img, f_txt = self.forward(patches, centers)
        out = []
        for i in range(f3d.shape[0]):
            out.append(ShapeEmbedding(
                f3d.data[i].copy(),
                None if f_img is None else f_img.data[i].copy(),
                None if f_txt is None else f_txt.data[i].copy(),
            ))
        return out

    def encode_cloud(self, pc: np.ndarray) -> ShapeEmbedding:
        patches, centers = prepare_patches(pc, self.cfg)
        return self.encode_prepared(patches[None], centers[None])[0]

    def encode_clouds(self, clouds, batch_size: int = 16) -> list[ShapeEmbedding]:
        prepared = [prepare_patches(pc, self.cfg) for pc in clouds]
        out = []
        for i in range(0, len(prepared), batch_size):
            chunk = prepared[i : i + batch_size]
            out.extend(self.encode_prepared(
                np.stack([c[0] for c in chunk]), np.stack([c[1] for c in chunk])
            ))
        return out


def mini_pointnet_embed(patch: np.ndarray, encoder: PointEncoder) -> np.ndarray:
    patch = np.asarray(patch)
    if patch.ndim != 2 or patch.shape[1] != 9:
        raise T.ShapeError(f"patch must be (N', 9), got {patch.shape}")
    return encoder.mini_pointnet(patch[None]).data[0]


def encode_cloud(pc: np.ndarray, encoder: PointEncoder) -> ShapeEmbedding:
    return encoder.encode_cloud(pc)


def fill_textureless(pc: np.ndarray) -> np.ndarray:
    return geometry.fill_textureless(pc)
