import numpy as np
import pytest
from conftest import naive_topk, random_unit
from hypothesis import given, settings
from hypothesis import strategies as st

from ftprag.embedding import ProviderId
from ftprag.vindex import (
    ChecksumError,
    DimensionMismatchError,
    DuplicateChunkError,
    IndexFormatError,
    VectorIndex,
    build_index,
)


def hits(result):
    return [(h.chunk_id, h.score) for h in result]


def test_add_and_duplicates(provider64):
    index = VectorIndex(provider64)
    index.add(7, np.ones(64))
    assert len(index) == 1
    with pytest.raises(DuplicateChunkError):
        index.add(7, np.zeros(64))
    with pytest.raises(DimensionMismatchError):
        index.add(8, np.zeros(32))


def test_empty_index_returns_nothing(provider64):
    assert VectorIndex(provider64).search(np.ones(64), 5) == []


def test_self_similarity_ranks_first(provider64):
    vecs = random_unit(np.random.default_rng(0), 50, 64)
    index = build_index(range(50), vecs, provider64)
    top = index.search(vecs[17], 3)[0]
    assert top.chunk_id == 17 and abs(top.score - 1.0) <= 1e-6


def test_five_vectors_match_exhaustive_sort(provider64):
    vecs = random_unit(np.random.default_rng(5), 5, 64)
    query = random_unit(np.random.default_rng(6), 1, 64)[0]
    index = build_index(range(5), vecs, provider64)
    assert hits(index.search(query, 3)) == naive_topk(range(5), vecs, query, 3)


def test_identical_vectors_tie_by_lower_id(provider64):
    v = random_unit(np.random.default_rng(1), 1, 64)[0]
    index = VectorIndex(provider64)
    index.add(9, v)
    index.add(3, v)
    index.add(5, -v)
    assert [h.chunk_id for h in index.search(v, 3)] == [3, 9, 5]


def test_k_larger_than_size(provider64):
    index = build_index([0, 1], random_unit(np.random.default_rng(2), 2, 64), provider64)
    assert len(index.search(np.ones(64), 10)) == 2
    with pytest.raises(ValueError):
        index.search(np.ones(64), 0)


def test_query_dimension_checked(provider64):
    index = build_index([0], np.ones((1, 64)), provider64)
    with pytest.raises(DimensionMismatchError):
        index.search(np.ones(8), 1)


def test_thousand_entries_exact(provider64):
    rng = np.random.default_rng(11)
    vecs = random_unit(rng, 1000, 64)
    ids = rng.permutation(5000)[:1000]
    index = build_index(ids, vecs, provider64)
    assert len(index) == 1000
    for query in random_unit(rng, 5, 64):
        assert hits(index.search(query, 20)) == naive_topk(ids, vecs, query, 20)


@settings(max_examples=40, deadline=None)
@given(
    st.lists(st.lists(st.integers(-3, 3), min_size=8, max_size=8), min_size=1, max_size=30),
    st.lists(st.integers(-3, 3), min_size=8, max_size=8),
    st.integers(1, 35),
)
def test_small_integer_vectors_with_many_ties(rows, query, k):
    # small integer entries give exact scores and lots of ties
    prov = ProviderId("ints", 8)
    vecs = np.array(rows, dtype=np.float32)
    index = build_index(range(len(rows)), vecs, prov)
    assert hits(index.search(np.array(query, dtype=np.float32), k)) == naive_topk(
        range(len(rows)), vecs, query, k
    )


class TestPersistence:
    def test_empty_round_trip(self, provider64, tmp_path):
        VectorIndex(provider64).save(tmp_path / "e.idx")
        loaded = VectorIndex.load(tmp_path / "e.idx")
        assert len(loaded) == 0 and loaded.provider == provider64

    def test_round_trip_preserves_results(self, provider64, tmp_path):
        rng = np.random.default_rng(3)
        vecs = random_unit(rng, 1000, 64)
        index = build_index(range(1000), vecs, provider64)
        index.save(tmp_path / "i.idx")
        loaded = VectorIndex.load(tmp_path / "i.idx", expected_dim=64)
        assert loaded.provider == provider64
        for query in random_unit(rng, 10, 64):
            assert loaded.search(query, 35) == index.search(query, 35)
        assert loaded.to_bytes() == index.to_bytes()

    def test_truncated_file(self, provider64, tmp_path):
        buf = build_index(range(10), np.ones((10, 64)), provider64).to_bytes()
        with pytest.raises(ChecksumError):
            VectorIndex.from_bytes(buf[:-7])
        with pytest.raises(ChecksumError):
            VectorIndex.from_bytes(buf[:10])

    def test_bit_flip(self, provider64):
        buf = bytearray(build_index(range(10), np.ones((10, 64)), provider64).to_bytes())
        buf[60] ^= 1
        with pytest.raises(ChecksumError):
            VectorIndex.from_bytes(bytes(buf))

    def test_wrong_magic_and_dim(self, provider64):
        import struct
        import zlib

        body = b"NOTANIDX" + bytes(40)
        with pytest.raises(IndexFormatError):
            VectorIndex.from_bytes(body + struct.pack("<I", zlib.crc32(body)))
        buf = VectorIndex(provider64).to_bytes()
        with pytest.raises(DimensionMismatchError):
            VectorIndex.from_bytes(buf, expected_dim=32)
