import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mvfuse.io import FormatError
from mvfuse.oracles import recall_oracle, topk_oracle
from mvfuse.retrieval import (
    IndexError_,
    QueryResult,
    build_index,
    decode_index,
    encode_index,
    load_index,
    query_topk,
    recall_at_k,
    save_index,
)


def random_index(rng, n, d):
    return build_index((f"obj{i}", v) for i, v in enumerate(rng.normal(size=(n, d))))


class TestBuildIndex:
    def test_empty(self):
        with pytest.raises(IndexError_, match="empty index"):
            build_index([])

    def test_single_entry(self):
        assert len(build_index([("a", [1.0, 0.0])])) == 1

    def test_renormalises(self):
        index = build_index([("a", [2.0, 0.0, 0.0])])
        assert np.linalg.norm(index.embeddings[0]) == pytest.approx(1.0, abs=1e-6)

    def test_duplicate_id(self):
        with pytest.raises(IndexError_, match="duplicate"):
            build_index([("a", [1.0, 0.0]), ("a", [0.0, 1.0])])

    def test_dim_mismatch(self):
        with pytest.raises(IndexError_):
            build_index([("a", [1.0, 0.0]), ("b", [0.0, 1.0, 0.0])])

    def test_zero_vector(self):
        with pytest.raises(IndexError_, match="zero"):
            build_index([("a", [0.0, 0.0])])

    def test_immutable(self, rng):
        index = random_index(rng, 3, 4)
        with pytest.raises(ValueError):
            index.embeddings[0, 0] = 5.0

    def test_insertion_order_kept(self, rng):
        index = build_index([("z", [1.0, 0.0]), ("a", [0.0, 1.0])])
        assert index.ids == ("z", "a")


class TestQuery:
    def test_exact_match_ranks_first(self):
        index = build_index([("x", [1.0, 0.0, 0.0]), ("y", [0.0, 1.0, 0.0]), ("z", [0.0, 0.0, 1.0])])
        res = query_topk(index, [0.0, 1.0, 0.0], 3)
        assert res.ids[0] == "y"
        assert res.scores[0] == 1.0

    def test_scaled_query_gives_identical_result(self, rng):
        index = random_index(rng, 50, 6)
        q = rng.normal(size=6)
        assert query_topk(index, q, 10) == query_topk(index, 5.0 * q, 10)

    def test_ties_go_to_earlier_record(self):
        index = build_index([("first", [1.0, 1.0]), ("second", [1.0, 1.0]), ("other", [1.0, -1.0])])
        assert query_topk(index, [1.0, 0.0], 2).ids == ["first", "second"]

    @pytest.mark.parametrize("k", [0, 4])
    def test_k_out_of_range(self, rng, k):
        with pytest.raises(IndexError_):
            query_topk(random_index(rng, 3, 2), [1.0, 0.0], k)

    def test_zero_query(self, rng):
        with pytest.raises(IndexError_):
            query_topk(random_index(rng, 3, 2), [0.0, 0.0], 1)

    def test_query_dim_mismatch(self, rng):
        with pytest.raises(IndexError_):
            query_topk(random_index(rng, 3, 2), [1.0, 0.0, 0.0], 1)

    @settings(deadline=None, max_examples=60)
    @given(st.integers(1, 300), st.integers(2, 8), st.integers(0, 10_000))
    def test_matches_full_sort_oracle(self, n, d, seed):
        r = np.random.default_rng(seed)
        index = random_index(r, n, d)
        q = r.normal(size=d)
        k = int(r.integers(1, n + 1))
        res = query_topk(index, q, k)
        qn = (q / np.linalg.norm(q)).astype(np.float32)
        assert [index.position(i) for i in res.ids] == topk_oracle(index.embeddings, qn, k)
        assert all(a >= b for a, b in zip(res.scores, res.scores[1:]))

    @settings(deadline=None, max_examples=30)
    @given(st.integers(2, 60), st.integers(0, 10_000), st.floats(1e-3, 1e3))
    def test_ranking_invariant_to_positive_scaling(self, n, seed, scale):
        r = np.random.default_rng(seed)
        index = random_index(r, n, 5)
        q = r.normal(size=5)
        assert query_topk(index, q, n).ids == query_topk(index, scale * q, n).ids


def _result(ids):
    return QueryResult(tuple((i, 1.0 - 0.1 * r) for r, i in enumerate(ids)))


class TestRecall:
    def test_all_hits_at_rank_one(self):
        results = [("a", _result(["a", "b"])), ("b", _result(["b", "a"]))]
        assert recall_at_k(results, 1)[1] == 1.0

    def test_always_second(self):
        results = [("a", _result(["b", "a", "c"])), ("c", _result(["a", "c", "b"]))]
        report = recall_at_k(results, [1, 3])
        assert report[1] == 0.0 and report[3] == 1.0
        assert report.queries == 2

    def test_k_exceeds_result_length(self):
        with pytest.raises(IndexError_):
            recall_at_k([("a", _result(["a"]))], 2)

    def test_missing_true_id_is_a_miss(self):
        assert recall_at_k([("zzz", _result(["a", "b"]))], 2)[2] == 0.0

    @settings(deadline=None, max_examples=40)
    @given(st.integers(1, 20), st.integers(2, 8), st.integers(0, 10_000))
    def test_matches_hand_count_and_monotone(self, q, n, seed):
        r = np.random.default_rng(seed)
        ids = [f"o{i}" for i in range(n)]
        pairs = [(ids[int(r.integers(n))], [ids[j] for j in r.permutation(n)]) for _ in range(q)]
        report = recall_at_k([(t, _result(ranked)) for t, ranked in pairs], range(1, n + 1))
        values = [report[k] for k in range(1, n + 1)]
        assert values == [recall_oracle(pairs, k) for k in range(1, n + 1)]
        assert values == sorted(values) and values[-1] == 1.0


class TestIndexFile:
    def test_round_trip_bytes(self, rng, tmp_path):
        index = random_index(rng, 20, 7)
        save_index(index, tmp_path / "a.fbix")
        loaded = load_index(tmp_path / "a.fbix")
        save_index(loaded, tmp_path / "b.fbix")
        assert (tmp_path / "a.fbix").read_bytes() == (tmp_path / "b.fbix").read_bytes()
        assert loaded.ids == index.ids

    def test_layout_header(self, rng):
        blob = encode_index(build_index([("é", [1.0, 0.0])]))
        assert blob[:4] == b"FBIX"
        assert int.from_bytes(blob[4:8], "little") == 1
        assert int.from_bytes(blob[8:12], "little") == 2
        assert int.from_bytes(blob[12:20], "little") == 1
        assert int.from_bytes(blob[20:24], "little") == 2  # utf-8 length of the id
        assert len(blob) == 24 + 2 + 8 + 8

    def test_query_after_load_is_identical(self, rng):
        index = random_index(rng, 40, 5)
        loaded = decode_index(encode_index(index))
        q = rng.normal(size=5)
        assert query_topk(loaded, q, 7) == query_topk(index, q, 7)

    @pytest.mark.parametrize("damage", ["magic", "truncate", "checksum"])
    def test_corruption(self, rng, damage):
        blob = bytearray(encode_index(random_index(rng, 3, 2)))
        if damage == "magic":
            blob[:4] = b"FBT1"
        elif damage == "truncate":
            blob = blob[:-10]
        else:
            blob[-1] ^= 1
        with pytest.raises(FormatError):
            decode_index(bytes(blob))
