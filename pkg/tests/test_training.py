import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mvfuse.config import TrainConfig
from mvfuse.data import Dataset
from mvfuse.io import FormatError
from mvfuse.nn import Tape
from mvfuse.nn import tensor as T
from mvfuse.nn.gradcheck import check_gradients
from mvfuse.oracles import info_nce_oracle
from mvfuse.selftest import unit_rows
from mvfuse.training import (
    Checkpoint,
    FreezeViolation,
    LossLog,
    RetrievalModel,
    TrainingError,
    _set_phase,
    frozen_targets,
    info_nce,
    model_from_checkpoint,
    prepare_all,
    symmetric_info_nce,
    symmetric_loss_stage1,
    symmetric_loss_stage2,
    train_stage1,
    train_stage2,
)


def nce(a, t, tau):
    return float(info_nce(T.Tensor(a), T.Tensor(t), tau).data)


class TestInfoNCE:
    def test_b2_orthogonal_negatives(self):
        assert nce(np.eye(2), np.eye(2), 1.0) == pytest.approx(-math.log(math.e / (math.e + 1)), abs=1e-12)
        assert nce(np.eye(2), np.eye(2), 1.0) == pytest.approx(0.31326, abs=1e-5)

    def test_all_identical_gives_log2(self):
        a = np.array([[1.0, 0.0], [1.0, 0.0]])
        assert nce(a, a, 1.0) == pytest.approx(math.log(2), abs=1e-15)

    @pytest.mark.parametrize("b", [2, 4, 8])
    @pytest.mark.parametrize("tau", [1.0, 0.5, 0.07])
    def test_orthonormal_closed_form(self, b, tau):
        expected = -math.log(math.exp(1 / tau) / (math.exp(1 / tau) + b - 1))
        assert abs(nce(np.eye(b), np.eye(b), tau) - expected) <= 1e-8

    @settings(deadline=None, max_examples=60)
    @given(st.integers(2, 8), st.integers(2, 16), st.floats(0.01, 2.0), st.integers(0, 10_000))
    def test_enumeration_oracle(self, b, d, tau, seed):
        r = np.random.default_rng(seed)
        a, t = unit_rows(r, b, d), unit_rows(r, b, d)
        assert abs(nce(a, t, tau) - info_nce_oracle(a, t, tau)) <= 1e-10

    @settings(deadline=None, max_examples=30)
    @given(st.integers(2, 8), st.integers(0, 10_000))
    def test_common_row_permutation(self, b, seed):
        r = np.random.default_rng(seed)
        a, t = unit_rows(r, b, 4), unit_rows(r, b, 4)
        p = r.permutation(b)
        assert nce(a[p], t[p], 0.3) == pytest.approx(nce(a, t, 0.3), abs=1e-12)

    def test_unnormalised_rows(self):
        with pytest.raises(ValueError, match="normalised"):
            nce(2 * np.eye(2), np.eye(2), 1.0)

    @pytest.mark.parametrize("tau", [0.0, -1.0])
    def test_bad_temperature(self, tau):
        with pytest.raises(ValueError):
            nce(np.eye(2), np.eye(2), tau)

    def test_batch_of_one(self):
        with pytest.raises(ValueError):
            nce(np.eye(1), np.eye(1), 1.0)

    def test_temperature_tensor_is_differentiated(self):
        from mvfuse.nn import ParamStore

        store = ParamStore(0, np.float64)
        log_tau = store.add("tau", (1,), lambda rng, shape: np.full(shape, math.log(0.5)))
        a, t = unit_rows(np.random.default_rng(0), 3, 4), unit_rows(np.random.default_rng(1), 3, 4)
        results = check_gradients(store, lambda: info_nce(
            T.Tensor(a), T.Tensor(t), T.reshape(T.exp(log_tau.tensor()), ())))
        assert results[0].ok


def unit(x):
    x = np.asarray(x, dtype=np.float64)
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def _batch(model, dataset, idx, view=0):
    patches, centers = prepare_all(model, dataset)
    img = unit(np.stack([dataset.samples[i].views[view] for i in idx]))
    txt = [unit(dataset.samples[i].text) for i in idx]
    return patches[idx], centers[idx], img, txt


class TestStage1Loss:
    def test_matches_enumeration_of_all_four_terms(self, tiny_cfg, tiny_dataset):
        model = RetrievalModel(tiny_cfg, np.float64)
        p, c, img, txt = _batch(model, tiny_dataset, [0, 1, 2, 3])
        loss = float(symmetric_loss_stage1(model, p, c, img, txt).data)
        _, f_img, f_txt = (x.data for x in model.encoder.forward(p, c))
        tau = model.tau(1)
        txt = np.stack(txt)
        expected = 0.5 * (info_nce_oracle(img, f_img, tau) + info_nce_oracle(f_img, img, tau)
                          + info_nce_oracle(txt, f_txt, tau) + info_nce_oracle(f_txt, txt, tau))
        assert loss == pytest.approx(expected, abs=1e-10)

    def test_without_text_only_image_terms(self, tiny_cfg, tiny_dataset):
        model = RetrievalModel(tiny_cfg, np.float64)
        p, c, img, _ = _batch(model, tiny_dataset, [0, 1, 2])
        loss = float(symmetric_loss_stage1(model, p, c, img, None).data)
        _, f_img, _ = (x.data for x in model.encoder.forward(p, c))
        tau = model.tau(1)
        assert loss == pytest.approx(0.5 * (info_nce_oracle(img, f_img, tau) + info_nce_oracle(f_img, img, tau)), abs=1e-10)

    def test_partial_text_weighted_by_share(self, tiny_cfg, tiny_dataset):
        model = RetrievalModel(tiny_cfg, np.float64)
        p, c, img, txt = _batch(model, tiny_dataset, [0, 1, 2, 3])
        partial = [txt[0], None, txt[2], None]
        loss = float(symmetric_loss_stage1(model, p, c, img, partial).data)
        _, f_img, f_txt = (x.data for x in model.encoder.forward(p, c))
        tau = model.tau(1)
        t, ft = np.stack([txt[0], txt[2]]), f_txt[[0, 2]]
        expected = (0.5 * (info_nce_oracle(img, f_img, tau) + info_nce_oracle(f_img, img, tau))
                    + 0.5 * 0.5 * (info_nce_oracle(t, ft, tau) + info_nce_oracle(ft, t, tau)))
        assert loss == pytest.approx(expected, abs=1e-10)

    def test_batch_order_invariant(self, tiny_cfg, tiny_dataset):
        model = RetrievalModel(tiny_cfg, np.float64)
        a = float(symmetric_loss_stage1(model, *_batch(model, tiny_dataset, [0, 1, 2, 3])).data)
        b = float(symmetric_loss_stage1(model, *_batch(model, tiny_dataset, [2, 1, 0, 3])).data)
        assert a == pytest.approx(b, abs=1e-12)

    def test_batch_of_one(self, tiny_cfg, tiny_dataset):
        model = RetrievalModel(tiny_cfg, np.float64)
        with pytest.raises(ValueError):
            symmetric_loss_stage1(model, *_batch(model, tiny_dataset, [0]))


class TestStage2Loss:
    def _setup(self, tiny_cfg, tiny_dataset, views=2):
        model = RetrievalModel(tiny_cfg, np.float64)
        _set_phase(model, 2)
        targets = frozen_targets(model, tiny_dataset)[:4]
        x = np.stack([s.views[:views] for s in tiny_dataset.samples[:4]])
        return model, x, targets

    def test_requires_frozen_encoder(self, tiny_cfg, tiny_dataset):
        model, x, targets = self._setup(tiny_cfg, tiny_dataset)
        model.store["enc.cls"].trainable = True
        with pytest.raises(FreezeViolation):
            symmetric_loss_stage2(model, x, targets)

    def test_matches_oracle_on_fused_views(self, tiny_cfg, tiny_dataset):
        model, x, targets = self._setup(tiny_cfg, tiny_dataset)
        loss = float(symmetric_loss_stage2(model, x, targets).data)
        fused = np.stack([model.aggregator.aggregate(v).f_mvimg for v in x])
        tau = model.tau(2)
        assert loss == pytest.approx(0.5 * (info_nce_oracle(fused, targets, tau)
                                            + info_nce_oracle(targets, fused, tau)), abs=1e-10)

    def test_single_view_degenerates_to_contrastive_loss(self, tiny_cfg, tiny_dataset):
        model, x, targets = self._setup(tiny_cfg, tiny_dataset, views=1)
        fused, _ = model.aggregator(x)
        expected = symmetric_info_nce(fused, T.Tensor(targets), model.tau(2))
        assert float(symmetric_loss_stage2(model, x, targets).data) == pytest.approx(float(expected.data), abs=1e-12)

    def test_encoder_gets_no_gradient(self, tiny_cfg, tiny_dataset):
        model, x, _ = self._setup(tiny_cfg, tiny_dataset)
        patches, centers = prepare_all(model, tiny_dataset)
        model.store.zero_grad()
        with Tape() as tape:
            loss = symmetric_loss_stage2(model, x, patches=patches[:4], centers=centers[:4])
        tape.backward(loss, model.store)
        for p in model.store.select("enc."):
            assert p.grad is None or not p.grad.any()
        assert any(p.grad.any() for p in model.store.select("agg."))


def test_stage_losses_pass_gradient_checks_including_tau(tiny_cfg, tiny_dataset):
    model = RetrievalModel(tiny_cfg, np.float64)
    _set_phase(model, 1)
    batch = _batch(model, tiny_dataset, [0, 1, 2, 3])
    r1 = check_gradients(model.store, lambda: symmetric_loss_stage1(model, *batch))
    _set_phase(model, 2)
    targets = frozen_targets(model, tiny_dataset)[:4]
    x = np.stack([s.views[:3] for s in tiny_dataset.samples[:4]])
    r2 = check_gradients(model.store, lambda: symmetric_loss_stage2(model, x, targets))
    names = {r.name for r in r1 + r2}
    assert {"tau.stage1", "tau.stage2"} <= names
    assert all(r.ok for r in r1 + r2), [r for r in r1 + r2 if not r.ok]


class TestCheckpoint:
    def test_round_trip_bytes_and_meta(self, tiny_cfg, tmp_path):
        ck = Checkpoint.of(RetrievalModel(tiny_cfg), 1)
        ck.save(tmp_path / "a.fbck")
        loaded = Checkpoint.load(tmp_path / "a.fbck")
        assert loaded.stage == 1
        assert loaded.config_hash == tiny_cfg.config_hash()
        assert loaded.to_bytes() == ck.to_bytes()

    def test_missing_meta(self, tiny_cfg):
        from mvfuse.nn import encode_checkpoint

        with pytest.raises(FormatError):
            Checkpoint.from_bytes(encode_checkpoint({"w": np.zeros(2)}))

    def test_config_mismatch(self, tiny_cfg):
        ck = Checkpoint.of(RetrievalModel(tiny_cfg), 1)
        with pytest.raises(TrainingError, match="config hash"):
            model_from_checkpoint(tiny_cfg.with_seed(99), ck)


class TestTrainLoops:
    def test_stage1_deterministic_and_tau_clamped(self, tiny_cfg, tiny_dataset, tmp_path):
        cfg = dataclasses.replace(tiny_cfg, stage1=TrainConfig(batch_size=4, epochs=3, tau_min=0.05, tau_max=0.08))
        log = LossLog(tmp_path / "loss.csv")
        a = train_stage1(tiny_dataset, RetrievalModel(cfg), log)
        b = train_stage1(tiny_dataset, RetrievalModel(cfg))
        assert a.to_bytes() == b.to_bytes()
        assert len(log.rows) == 3 * (8 // 4)
        assert all(0.05 - 1e-7 <= tau <= 0.08 + 1e-7 for *_, tau in log.rows)
        lines = (tmp_path / "loss.csv").read_text().splitlines()
        assert lines[0] == "step,stage,loss,tau"
        assert lines[1].startswith("1,1,")

    def test_partial_batch_dropped(self, tiny_cfg, tiny_dataset):
        cfg = dataclasses.replace(tiny_cfg, stage1=TrainConfig(batch_size=3, epochs=1))
        log = LossLog()
        train_stage1(tiny_dataset, RetrievalModel(cfg), log)
        assert len(log.rows) == 2

    def test_stage1_loss_decreases(self, tiny_cfg, tiny_dataset):
        cfg = dataclasses.replace(tiny_cfg, stage1=TrainConfig(batch_size=4, epochs=40, lr=3e-3))
        log = LossLog()
        train_stage1(tiny_dataset, RetrievalModel(cfg), log)
        assert np.mean([r[2] for r in log.rows[-2:]]) <= log.rows[0][2]

    def test_stage2_freezes_encoder_and_is_deterministic(self, tiny_cfg, tiny_dataset):
        model = RetrievalModel(tiny_cfg)
        ck1 = train_stage1(tiny_dataset, model)
        checksum = model.encoder_checksum()
        ck2a = train_stage2(tiny_dataset, model, ck1)
        assert model.encoder_checksum() == checksum
        assert ck2a.stage == 2
        assert all(np.array_equal(ck2a.state[k], ck1.state[k]) for k in ck1.state if k.startswith("enc."))
        ck2b = train_stage2(tiny_dataset, RetrievalModel(tiny_cfg), ck1)
        assert ck2a.to_bytes() == ck2b.to_bytes()

    def test_stage2_rejects_stage2_checkpoint(self, tiny_cfg, tiny_dataset):
        ck = Checkpoint.of(RetrievalModel(tiny_cfg), 2)
        with pytest.raises(TrainingError, match="stage-1"):
            train_stage2(tiny_dataset, RetrievalModel(tiny_cfg), ck)

    def test_empty_dataset(self, tiny_cfg, tiny_dataset):
        with pytest.raises(TrainingError, match="empty"):
            train_stage1(Dataset(tiny_dataset.manifest, []), RetrievalModel(tiny_cfg))

    def test_batch_larger_than_dataset(self, tiny_cfg, tiny_dataset):
        cfg = dataclasses.replace(tiny_cfg, stage1=TrainConfig(batch_size=16))
        with pytest.raises(TrainingError, match="batch_size"):
            train_stage1(tiny_dataset, RetrievalModel(cfg))
