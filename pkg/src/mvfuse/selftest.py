"""Quick oracle and property checks runnable from the command line.

Each check is small enough that the whole suite finishes in a few
seconds; the pytest suite covers the same ground in more depth.
"""
from __future__ import annotations

import dataclasses
import math
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import geometry, oracles
from .config import DataConfig, RunConfig
from .encoder3d import Encoder3DConfig
from .io import decode_tensor, encode_tensor
from .mvagg import AggregatorConfig
from .nn import tensor as T
from .nn.gradcheck import check_gradients
from .retrieval import build_index, decode_index, encode_index, query_topk
from .training import (
    Checkpoint,
    RetrievalModel,
    _set_phase,
    info_nce,
    symmetric_loss_stage1,
    symmetric_loss_stage2,
)


@dataclass
class CheckOutcome:
    name: str
    ok: bool
    detail: str = ""


def tiny_config(seed: int = 0) -> RunConfig:
    """A very small model, for checks that only care about wiring."""
    return RunConfig(
        seed=seed,
        data=DataConfig(dim=8),
        encoder=Encoder3DConfig(layers=1, heads=2, hidden=8, mlp_expansion=2, patches=4,
                                patch_size=6, joint_dim=8, pointnet_width=8),
        aggregator=AggregatorConfig(dim=8, layers=1, heads=2, ffn_expansion=2),
    )


def random_cloud(rng: np.random.Generator, n: int) -> np.ndarray:
    pc = np.empty((n, 9))
    pc[:, geometry.POS] = rng.normal(size=(n, 3))
    pc[:, geometry.COLOR] = rng.uniform(size=(n, 3))
    normals = rng.normal(size=(n, 3))
    pc[:, geometry.NORMAL] = normals / np.linalg.norm(normals, axis=1, keepdims=True)
    return pc


def unit_rows(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    x = rng.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def check_fps(instances: int = 40, seed: int = 0) -> CheckOutcome:
    rng = np.random.default_rng(seed)
    for i in range(instances):
        n = int(rng.integers(2, 65))
        p = int(rng.integers(1, min(n, 16) + 1))
        pc = random_cloud(rng, n)
        got = geometry.farthest_point_sample(pc, p).tolist()
        if got != oracles.fps_oracle(pc, p):
            return CheckOutcome("fps", False, f"instance {i} differs")
    return CheckOutcome("fps", True, f"{instances} instances")


def check_knn(instances: int = 40, seed: int = 1) -> CheckOutcome:
    rng = np.random.default_rng(seed)
    for i in range(instances):
        n = int(rng.integers(2, 65))
        pc = random_cloud(rng, n)
        centers = rng.choice(n, size=int(rng.integers(1, min(n, 8) + 1)), replace=False)
        size = int(rng.integers(1, n + 1))
        got = geometry.knn_group(pc, centers, size).members.tolist()
        if got != oracles.knn_oracle(pc, pc[centers], size):
            return CheckOutcome("knn", False, f"instance {i} differs")
    return CheckOutcome("knn", True, f"{instances} instances")


def check_topk(instances: int = 40, seed: int = 2) -> CheckOutcome:
    rng = np.random.default_rng(seed)
    for i in range(instances):
        n, d = int(rng.integers(1, 200)), int(rng.integers(2, 9))
        index = build_index((f"id{j}", v) for j, v in enumerate(rng.normal(size=(n, d))))
        q = rng.normal(size=d)
        k = int(rng.integers(1, n + 1))
        got = [index.position(oid) for oid in query_topk(index, q, k).ids]
        qn = (q / np.linalg.norm(q)).astype(np.float32)
        if got != oracles.topk_oracle(index.embeddings, qn, k):
            return CheckOutcome("topk", False, f"instance {i} differs")
    return CheckOutcome("topk", True, f"{instances} instances")


def check_info_nce() -> CheckOutcome:
    worst = 0.0
    for b in (2, 4, 8):
        e = np.eye(b)
        loss = float(info_nce(T.Tensor(e), T.Tensor(e), 1.0).data)
        worst = max(worst, abs(loss + math.log(math.e / (math.e + b - 1))))
    if worst > 1e-8:
        return CheckOutcome("info_nce", False, f"closed form off by {worst:.3g}")
    rng = np.random.default_rng(3)
    for _ in range(20):
        b, d = int(rng.integers(2, 7)), int(rng.integers(2, 6))
        a, t = unit_rows(rng, b, d), unit_rows(rng, b, d)
        tau = float(rng.uniform(0.05, 2.0))
        diff = abs(float(info_nce(T.Tensor(a), T.Tensor(t), tau).data) - oracles.info_nce_oracle(a, t, tau))
        if diff > 1e-10:
            return CheckOutcome("info_nce", False, f"enumeration oracle off by {diff:.3g}")
    return CheckOutcome("info_nce", True)


def check_gradients_tiny() -> CheckOutcome:
    cfg = tiny_config()
    model = RetrievalModel(cfg, dtype=np.float64)
    rng = np.random.default_rng(4)
    b = 3
    patches = rng.normal(size=(b, cfg.encoder.patches, cfg.encoder.patch_size, 9))
    centers = rng.normal(size=(b, cfg.encoder.patches, 3))
    img, txt = unit_rows(rng, b, cfg.data.dim), unit_rows(rng, b, cfg.data.dim)
    views = rng.normal(size=(b, 3, cfg.data.dim))
    targets = unit_rows(rng, b, cfg.data.dim)
    _set_phase(model, 1)
    results = check_gradients(model.store, lambda: symmetric_loss_stage1(model, patches, centers, img, txt))
    _set_phase(model, 2)
    results += check_gradients(model.store, lambda: symmetric_loss_stage2(model, views, targets))
    bad = [r for r in results if not r.ok]
    if bad:
        return CheckOutcome("gradients", False, f"{bad[0].name} rel-err {bad[0].worst_rel_err:.3g}")
    return CheckOutcome("gradients", True, f"{len(results)} tensors")


def check_aggregator(instances: int = 20) -> CheckOutcome:
    model = RetrievalModel(tiny_config())
    agg = model.aggregator
    rng = np.random.default_rng(5)
    for i in range(instances):
        v = int(rng.integers(1, 7))
        x = rng.normal(size=(v, agg.cfg.dim)).astype(np.float32)
        base = agg.aggregate(x)
        perm = agg.aggregate(x[rng.permutation(v)])
        dup = agg.aggregate(np.concatenate([x, x[rng.integers(v)][None]]))
        for other in (perm, dup):
            if np.abs(other.f_mvimg - base.f_mvimg).max() > 1e-6:
                return CheckOutcome("aggregator", False, f"instance {i} not invariant")
            if (other.beta < 0).any() or abs(float(other.beta.sum()) - 1.0) > 1e-5:
                return CheckOutcome("aggregator", False, f"instance {i} beta off the simplex")
    return CheckOutcome("aggregator", True, f"{instances} inputs")


def check_round_trips() -> CheckOutcome:
    rng = np.random.default_rng(6)
    arr = rng.normal(size=(3, 4)).astype(np.float32)
    blob = encode_tensor(arr)
    if encode_tensor(decode_tensor(blob)) != blob:
        return CheckOutcome("round_trips", False, "tensor container")
    index = build_index((f"o{i}", v) for i, v in enumerate(rng.normal(size=(5, 4))))
    blob = encode_index(index)
    if encode_index(decode_index(blob)) != blob:
        return CheckOutcome("round_trips", False, "index file")
    model = RetrievalModel(tiny_config())
    blob = Checkpoint.of(model, 1).to_bytes()
    if Checkpoint.from_bytes(blob).to_bytes() != blob:
        return CheckOutcome("round_trips", False, "checkpoint")
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "ck.fbck"
        Checkpoint.of(model, 2).save(path)
        if Checkpoint.load(path).stage != 2:
            return CheckOutcome("round_trips", False, "checkpoint stage")
    return CheckOutcome("round_trips", True)


def check_determinism() -> CheckOutcome:
    cfg = tiny_config(seed=11)
    a = RetrievalModel(cfg).store.checksum("")
    b = RetrievalModel(dataclasses.replace(cfg)).store.checksum("")
    return CheckOutcome("init_determinism", a == b)


CHECKS = (
    check_fps, check_knn, check_topk, check_info_nce, check_gradients_tiny,
    check_aggregator, check_round_trips, check_determinism,
)


def run_selftest(report=print) -> bool:
    ok = True
    for check in CHECKS:
        try:
            outcome = check()
        except Exception as exc:  # a crash is a failed check, reported like any other
            outcome = CheckOutcome(check.__name__.removeprefix("check_"), False, f"{type(exc).__name__}: {exc}")
        ok &= outcome.ok
        report(f"{'PASS' if outcome.ok else 'FAIL'} {outcome.name} {outcome.detail}".rstrip())
    return ok
