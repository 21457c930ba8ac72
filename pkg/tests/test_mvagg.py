import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mvfuse.mvagg import (
    AggregatorConfig,
    DegenerateMeanError,
    MultiViewAggregator,
    aggregate,
    consensus_pool,
    mean_pool_baseline,
    self_attend_views,
)
from mvfuse.nn import NumericError, ParamStore, ShapeError
from mvfuse.nn import tensor as T
from mvfuse.nn.gradcheck import check_gradients

SMALL = AggregatorConfig(dim=8, layers=2, heads=2)


def make_agg(cfg=SMALL, seed=0, dtype=np.float64):
    store = ParamStore(seed, dtype)
    return store, MultiViewAggregator(store, cfg)


class TestConfig:
    def test_desk_and_full_scale_profiles(self):
        assert AggregatorConfig() == AggregatorConfig(dim=64, layers=2, heads=4, ffn_expansion=4)
        large = AggregatorConfig.full_scale()
        assert (large.dim, large.layers, large.heads) == (1280, 6, 8)

    def test_indivisible_heads(self):
        with pytest.raises(ValueError):
            AggregatorConfig(dim=10, heads=4)


class TestSelfAttend:
    def test_row_permutation_equivariance(self, rng):
        _, agg = make_agg()
        x = rng.normal(size=(5, 8))
        perm = rng.permutation(5)
        np.testing.assert_allclose(self_attend_views(x[perm], agg), self_attend_views(x, agg)[perm], atol=1e-12)

    def test_identical_rows_stay_identical(self, rng):
        _, agg = make_agg()
        out = self_attend_views(np.repeat(rng.normal(size=(1, 8)), 4, axis=0), agg)
        np.testing.assert_array_equal(out, np.repeat(out[:1], 4, axis=0))

    def test_single_view_is_a_row_transform(self, rng):
        _, agg = make_agg()
        x = rng.normal(size=(1, 8))
        block = agg.blocks[0]
        y = block.ln1(x + block.attn.wo(block.attn.wv(x)))
        expected = block.ln2(y + block.ffn(y))
        for block in agg.blocks[1:]:
            y = block.ln1(expected + block.attn.wo(block.attn.wv(expected)))
            expected = block.ln2(y + block.ffn(y))
        np.testing.assert_allclose(self_attend_views(x, agg), expected.data, atol=1e-12)

    def test_width_mismatch(self):
        _, agg = make_agg()
        with pytest.raises(ShapeError):
            self_attend_views(np.ones((2, 6)), agg)


def _hand_pool_oracle(rows, eps=1e-5):
    """Single head, C=2, identity projections, unit LayerNorms."""
    def ln(v):
        m = sum(v) / len(v)
        var = sum((a - m) ** 2 for a in v) / len(v)
        return [(a - m) / math.sqrt(var + eps) for a in v]

    q = ln([sum(r[c] for r in rows) / len(rows) for c in range(2)])
    keys = [ln(r) for r in rows]
    scores = [sum(q[c] * k[c] for c in range(2)) / math.sqrt(2) for k in keys]
    e = [math.exp(s - max(scores)) for s in scores]
    beta = [x / sum(e) for x in e]
    pooled = ln([sum(b * k[c] for b, k in zip(beta, keys)) for c in range(2)])
    norm = math.sqrt(sum(p * p for p in pooled))
    return [p / norm for p in pooled], beta


class TestConsensusPool:
    def test_single_view(self, rng):
        _, agg = make_agg()
        out = consensus_pool(rng.normal(size=(1, 8)), agg)
        assert out.beta.tolist() == [1.0]
        assert abs(np.linalg.norm(out.f_mvimg) - 1.0) < 1e-12

    def test_identical_rows_give_uniform_beta(self, rng):
        _, agg = make_agg()
        out = consensus_pool(np.repeat(rng.normal(size=(1, 8)), 4, axis=0), agg)
        np.testing.assert_allclose(out.beta, 0.25, atol=1e-15)

    def test_single_head_scalar_oracle(self):
        store, agg = make_agg(AggregatorConfig(dim=2, layers=1, heads=1))
        for name in ("wq", "wk", "wv", "wo"):
            store[f"agg.pool.attn.{name}.W"].value[:] = np.eye(2)
        store["agg.pool.attn.wo.b"].value[:] = 0.0
        rows = [[0.3, -1.2], [2.0, 0.5]]
        out = consensus_pool(np.array(rows), agg)
        f, beta = _hand_pool_oracle(rows)
        np.testing.assert_allclose(out.beta, beta, rtol=1e-12)
        np.testing.assert_allclose(out.f_mvimg, f, rtol=1e-12)


class TestAggregate:
    def test_unit_norm_and_simplex(self, rng):
        _, agg = make_agg()
        out = aggregate(rng.normal(size=(5, 8)), agg)
        assert abs(np.linalg.norm(out.f_mvimg) - 1.0) <= 1e-6
        assert (out.beta >= 0).all() and abs(out.beta.sum() - 1.0) <= 1e-6

    def test_single_view_equals_duplicated_pair(self, rng):
        _, agg = make_agg(dtype=np.float32)
        x = rng.normal(size=(1, 8)).astype(np.float32)
        a = aggregate(x, agg)
        b = aggregate(np.concatenate([x, x]), agg)
        np.testing.assert_allclose(a.f_mvimg, b.f_mvimg, atol=1e-6)
        np.testing.assert_allclose(b.beta, [0.5, 0.5])

    def test_non_finite_rejected(self):
        _, agg = make_agg()
        x = np.ones((2, 8))
        x[1, 3] = np.nan
        with pytest.raises(NumericError):
            aggregate(x, agg)

    def test_rank_checked(self):
        _, agg = make_agg()
        with pytest.raises(ShapeError):
            aggregate(np.ones(8), agg)

    def test_batched_call_matches_per_object(self, rng):
        _, agg = make_agg()
        x = rng.normal(size=(3, 4, 8))
        fused, beta = agg(x)
        for i in range(3):
            single = aggregate(x[i], agg)
            np.testing.assert_allclose(fused.data[i], single.f_mvimg, atol=1e-12)
            np.testing.assert_allclose(beta[i], single.beta, atol=1e-12)

    @settings(deadline=None, max_examples=40)
    @given(st.integers(1, 7), st.integers(0, 10_000))
    def test_permutation_and_duplication_invariance(self, v, seed):
        r = np.random.default_rng(seed)
        _, agg = make_agg(dtype=np.float32)
        x = r.normal(size=(v, 8)).astype(np.float32)
        base = aggregate(x, agg)
        perm = aggregate(x[r.permutation(v)], agg)
        dup = aggregate(np.concatenate([x, x[[int(r.integers(v))]]]), agg)
        np.testing.assert_allclose(perm.f_mvimg, base.f_mvimg, atol=1e-6)
        np.testing.assert_allclose(dup.f_mvimg, base.f_mvimg, atol=1e-6)
        for out in (base, perm, dup):
            assert (out.beta >= 0).all()
            assert abs(float(out.beta.sum()) - 1.0) <= 1e-6


class TestMeanPool:
    def test_single_view(self):
        np.testing.assert_allclose(mean_pool_baseline([[3.0, 4.0]]), [0.6, 0.8])

    def test_cancellation(self):
        with pytest.raises(DegenerateMeanError, match="degenerate mean"):
            mean_pool_baseline([[1.0, 2.0], [-1.0, -2.0]])

    def test_hand_case(self):
        np.testing.assert_allclose(mean_pool_baseline([[1.0, 0.0], [0.0, 1.0]]), [2**-0.5, 2**-0.5])


def test_all_aggregator_parameters_pass_gradient_check(rng):
    store, agg = make_agg(seed=2)
    x = rng.normal(size=(2, 4, 8))
    w = rng.normal(size=(2, 8))
    results = check_gradients(store, lambda: T.sum(T.mul(agg(x)[0], w)))
    assert len(results) == len(store)
    assert all(r.ok for r in results), [r for r in results if not r.ok]
