"""Two-stage contrastive alignment.

Stage 1 trains the point encoder (with its image/text adapter heads and a
learnable temperature) against single-view features and, when available,
text features.  Stage 2 freezes everything on the 3D side and trains the
multi-view aggregator against the frozen shape embeddings.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import RunConfig, TrainConfig
from .encoder3d import PointEncoder, prepare_patches
from .io import FormatError
from .mvagg import MultiViewAggregator
from .nn import tensor as T
from .nn.optim import AdamState, adam_step
from .nn.params import ParamStore, decode_checkpoint, encode_checkpoint

ENCODER_PREFIX = "enc."
AGGREGATOR_PREFIX = "agg."
TAU_KEYS = {1: "tau.stage1", 2: "tau.stage2"}
STAGE_KEY = "meta.stage"
HASH_KEY = "meta.config_hash"


class TrainingError(RuntimeError):
    pass


class FreezeViolation(TrainingError):
    pass


class RetrievalModel:
    """Point encoder, view aggregator and both temperatures in one store."""

    def __init__(self, cfg: RunConfig, dtype=np.float32):
        self.cfg = cfg
        self.store = ParamStore(cfg.seed, dtype)
        self.encoder = PointEncoder(self.store, cfg.encoder)
        self.aggregator = MultiViewAggregator(self.store, cfg.aggregator)
        for stage, tcfg in ((1, cfg.stage1), (2, cfg.stage2)):
            init = math.log(tcfg.tau_init)
            self.store.add(TAU_KEYS[stage], (1,), lambda rng, shape, v=init: np.full(shape, v))

    def log_tau(self, stage: int):
        return self.store[TAU_KEYS[stage]]

    def tau(self, stage: int) -> float:
        return float(np.exp(self.log_tau(stage).value[0]))

    def tau_tensor(self, stage: int):
        return T.reshape(T.exp(self.log_tau(stage).tensor()), ())

    def clamp_tau(self, stage: int, tcfg: TrainConfig) -> None:
        p = self.log_tau(stage)
        p.value = np.clip(p.value, math.log(tcfg.tau_min), math.log(tcfg.tau_max)).astype(p.value.dtype)

    def encoder_checksum(self) -> int:
        return self.store.checksum(ENCODER_PREFIX)

    def load(self, ckpt: "Checkpoint") -> None:
        self.store.load_state(ckpt.state)


@dataclass
class Checkpoint:
    state: dict
    stage: int
    config_hash: int

    def to_bytes(self) -> bytes:
        state = dict(self.state)
        state[STAGE_KEY] = np.array([float(self.stage)])
        hi, lo = divmod(self.config_hash, 1 << 32)
        state[HASH_KEY] = np.array([float(hi), float(lo)])
        return encode_checkpoint(state)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Checkpoint":
        state = decode_checkpoint(blob)
        try:
            stage = int(state.pop(STAGE_KEY)[0])
            hi, lo = (int(x) for x in state.pop(HASH_KEY))
        except KeyError as exc:
            raise FormatError(f"checkpoint lacks {exc.args[0]}") from None
        return cls(state, stage, (hi << 32) | lo)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())

    @classmethod
    def of(cls, model: RetrievalModel, stage: int) -> "Checkpoint":
        return cls(model.store.state(), stage, model.cfg.config_hash())


def model_from_checkpoint(cfg: RunConfig, ckpt: Checkpoint, dtype=np.float32) -> RetrievalModel:
    """Rebuild a model for ``cfg`` and load ``ckpt``, which must come from the same config."""
    if ckpt.config_hash != cfg.config_hash():
        raise TrainingError(
            f"checkpoint config hash {ckpt.config_hash:016x} does not match "
            f"the current config {cfg.config_hash():016x}"
        )
    model = RetrievalModel(cfg, dtype)
    try:
        model.load(ckpt)
    except (KeyError, ValueError) as exc:
        raise TrainingError(f"checkpoint does not fit the model: {exc}") from exc
    return model


# -- losses --------------------------------------------------------------------


def _check_unit_rows(x, what: str) -> None:
    norms = np.sqrt((x.data.astype(np.float64) ** 2).sum(axis=-1))
    tol = 1e-4 if x.dtype == np.float32 else 1e-8
    if np.abs(norms - 1.0).max() > tol:
        raise ValueError(f"{what} rows must be L2-normalised")


def info_nce(anchors, targets, tau):
    """Mean over rows of -log softmax_j(cos(a_i, t_j) / tau)[i].

    ``tau`` may be a float or a scalar tensor (then it is differentiated too).
    """
    anchors, targets = T.as_tensor(anchors), T.as_tensor(targets)
    if anchors.ndim != 2 or anchors.shape != targets.shape:
        raise T.ShapeError(f"anchors {anchors.shape} and targets {targets.shape} must be equal (B, d)")
    if anchors.shape[0] < 2:
        raise ValueError("InfoNCE needs a batch of at least 2")
    _check_unit_rows(anchors, "anchor")
    _check_unit_rows(targets, "target")
    if isinstance(tau, T.Tensor):
        if (tau.data <= 0).any():
            raise ValueError("temperature must be positive")
        scale = T.reciprocal(tau)
    else:
        if not tau > 0:
            raise ValueError("temperature must be positive")
        scale = 1.0 / tau
    logits = T.mul(T.matmul(anchors, T.transpose(targets)), scale)
    logp = T.log_softmax(logits, axis=1)
    idx = np.arange(anchors.shape[0])
    return T.mul(T.mean(logp[idx, idx]), -1.0)


def _unit_constant(x, dtype) -> T.Tensor:
    """Feature rows as a constant tensor, renormalised after the dtype cast."""
    x = np.asarray(x, dtype=np.float64)
    return T.Tensor((x / np.linalg.norm(x, axis=-1, keepdims=True)).astype(dtype))


def symmetric_info_nce(a, b, tau):
    return T.mul(T.add(info_nce(a, b, tau), info_nce(b, a, tau)), 0.5)


def symmetric_loss_stage1(model: RetrievalModel, patches, centers, image_feats, text_feats=None):
    """Stage-1 loss for one batch.

    ``image_feats`` holds one view feature per sample (B, C).  ``text_feats``
    is a (B, C) array, or a list with ``None`` for samples lacking text, or
    None.  Text terms use the text head and only the samples that have text.
    """
    b = len(image_feats)
    if b < 2:
        raise ValueError("stage-1 loss needs a batch of at least 2")
    f3d, f_img, f_txt = model.encoder.forward(patches, centers)
    if f_img is None:
        f_img = f_txt = f3d
    tau = model.tau_tensor(1)
    dtype = model.store.dtype
    img = _unit_constant(image_feats, dtype)
    loss = symmetric_info_nce(img, f_img, tau)
    if text_feats is not None:
        have = [i for i, t in enumerate(text_feats) if t is not None]
        if len(have) >= 2:
            txt = _unit_constant(np.stack([text_feats[i] for i in have]), dtype)
            sub = f_txt if len(have) == b else f_txt[np.asarray(have)]
            text_loss = symmetric_info_nce(txt, sub, tau)
            loss = T.add(loss, T.mul(text_loss, len(have) / b))
    return loss


def symmetric_loss_stage2(model: RetrievalModel, views, targets=None, patches=None, centers=None):
    """Stage-2 loss: fused views (B, V, C) against frozen shape embeddings.

    ``targets`` are precomputed frozen embeddings (B, d); otherwise the
    encoder is run on ``patches``/``centers`` (its parameters must be frozen).
    """
    frozen = [p.name for p in model.store.select(ENCODER_PREFIX) if p.trainable]
    if frozen:
        raise FreezeViolation(f"3D encoder parameters are trainable in stage 2: {frozen[:3]}")
    if targets is None:
        plain, f_img, _ = model.encoder.forward(patches, centers)
        f3d = plain if f_img is None else f_img
    else:
        f3d = _unit_constant(targets, model.store.dtype)
    fused, _ = model.aggregator(np.asarray(views, dtype=model.store.dtype))
    return symmetric_info_nce(fused, f3d, model.tau_tensor(2))


# -- training loops ------------------------------------------------------------


class LossLog:
    """Append-only ``step,stage,loss,tau`` CSV."""

    def __init__(self, path=None):
        self.path = Path(path) if path else None
        self.rows = []

    def add(self, step: int, stage: int, loss: float, tau: float) -> None:
        self.rows.append((step, stage, loss, tau))
        if self.path is not None:
            new = not self.path.exists() or self.path.stat().st_size == 0
            with self.path.open("a") as fh:
                if new:
                    fh.write("step,stage,loss,tau\n")
                fh.write(f"{step},{stage},{loss!r},{tau!r}\n")


def prepare_all(model: RetrievalModel, dataset):
    prepared = [prepare_patches(s.cloud, model.cfg.encoder) for s in dataset.samples]
    return np.stack([p[0] for p in prepared]), np.stack([p[1] for p in prepared])


def _check_dataset(dataset, tcfg: TrainConfig) -> None:
    if len(dataset) == 0:
        raise TrainingError("dataset is empty")
    if tcfg.batch_size > len(dataset):
        raise TrainingError(f"batch_size {tcfg.batch_size} exceeds dataset size {len(dataset)}")


def _set_phase(model: RetrievalModel, stage: int) -> None:
    for name, p in model.store.items():
        if stage == 1:
            p.trainable = name.startswith(ENCODER_PREFIX) or name == TAU_KEYS[1]
        else:
            p.trainable = name.startswith(AGGREGATOR_PREFIX) or name == TAU_KEYS[2]


def _step(model: RetrievalModel, opt: AdamState, stage: int, tcfg: TrainConfig, loss_fn) -> float:
    model.store.zero_grad()
    with T.Tape() as tape:
        loss = loss_fn()
    tape.backward(loss, model.store)
    adam_step(model.store, opt)
    model.clamp_tau(stage, tcfg)
    return float(loss.data)


def train_stage1(dataset, model: RetrievalModel, log: LossLog | None = None, callback=None) -> Checkpoint:
    """Align the point encoder with single-view (and text) features."""
    tcfg = model.cfg.stage1
    _check_dataset(dataset, tcfg)
    _set_phase(model, 1)
    log = log or LossLog()
    patches, centers = prepare_all(model, dataset)
    texts = [s.text for s in dataset.samples]
    rng = np.random.default_rng([model.cfg.seed, 1])
    opt = AdamState(lr=tcfg.lr)
    n, b = len(dataset), tcfg.batch_size
    step = 0
    for epoch in range(tcfg.epochs):
        order = rng.permutation(n)
        picks = [int(rng.integers(len(s.views))) for s in dataset.samples]
        for start in range(0, n - b + 1, b):
            idx = order[start : start + b]
            img = np.stack([dataset.samples[i].views[picks[i]] for i in idx])
            txt = [texts[i] for i in idx]
            if all(t is None for t in txt):
                txt = None
            loss = _step(model, opt, 1, tcfg, lambda: symmetric_loss_stage1(
                model, patches[idx], centers[idx], img, txt))
            step += 1
            log.add(step, 1, loss, model.tau(1))
        if callback is not None:
            callback(epoch, log)
    return Checkpoint.of(model, 1)


def frozen_targets(model: RetrievalModel, dataset, batch_size: int = 16) -> np.ndarray:
    """Visual-head shape embeddings of every sample, computed without a tape."""
    patches, centers = prepare_all(model, dataset)
    out = []
    for i in range(0, len(dataset), batch_size):
        for emb in model.encoder.encode_prepared(patches[i : i + batch_size], centers[i : i + batch_size]):
            out.append(emb.visual)
    return np.stack(out)


def train_stage2(dataset, model: RetrievalModel, stage1: Checkpoint, log: LossLog | None = None,
                 callback=None) -> Checkpoint:
    """Train the aggregator against the frozen stage-1 encoder."""
    if stage1.stage != 1:
        raise TrainingError(f"stage 2 needs a stage-1 checkpoint, got stage {stage1.stage}")
    tcfg = model.cfg.stage2
    _check_dataset(dataset, tcfg)
    model.load(stage1)
    _set_phase(model, 2)
    before = model.encoder_checksum()
    log = log or LossLog()
    targets = frozen_targets(model, dataset)
    rng = np.random.default_rng([model.cfg.seed, 2])
    opt = AdamState(lr=tcfg.lr)
    n, b = len(dataset), tcfg.batch_size
    max_v = min(tcfg.max_views, min(len(s.views) for s in dataset.samples))
    min_v = min(tcfg.min_views, max_v)
    step = 0
    for epoch in range(tcfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n - b + 1, b):
            idx = order[start : start + b]
            v = int(rng.integers(min_v, max_v + 1))
            views = np.stack([
                dataset.samples[i].views[rng.choice(len(dataset.samples[i].views), v, replace=False)]
                for i in idx
            ])
            loss = _step(model, opt, 2, tcfg, lambda: symmetric_loss_stage2(model, views, targets[idx]))
            step += 1
            log.add(step, 2, loss, model.tau(2))
        if callback is not None:
            callback(epoch, log)
    if model.encoder_checksum() != before:
        raise FreezeViolation("3D encoder parameters changed during stage 2")
    return Checkpoint.of(model, 2)
