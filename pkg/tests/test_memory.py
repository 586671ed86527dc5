import math
import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mka import rng
from mka.harness.oracles import brute_prefix_mean
from mka.memory import (
    ChunkStore,
    SummaryMode,
    build_levels,
    chunk_store_from_sequence,
    retrieval_rows,
    summarize,
)
from mka.tensor import DimensionError


def test_prefix_mean_small_case():
    x = np.array([1.0, 3.0, 5.0]).reshape(1, 3, 1)
    m2, state = summarize(x, SummaryMode())
    assert m2.ravel().tolist() == [1.0, 2.0, 3.0]
    assert state.count == 3 and state.total.ravel().tolist() == [9.0]


def test_ema_small_case():
    x = np.array([1.0, 3.0]).reshape(1, 2, 1)
    m2, _ = summarize(x, SummaryMode("ema", 0.5))
    assert m2.ravel().tolist() == [1.0, 2.0]


@pytest.mark.parametrize("mode", [SummaryMode(), SummaryMode("ema", 0.9)])
def test_summary_resumes_from_state(mode):
    x = rng.normal(1, (2, 9, 3))
    whole, _ = summarize(x, mode)
    head, state = summarize(x[:, :4], mode)
    tail, _ = summarize(x[:, 4:], mode, state)
    assert np.allclose(np.concatenate([head, tail], axis=1), whole, rtol=1e-13, atol=1e-14)


def test_prefix_mean_matches_brute_force():
    x = rng.normal(2, (2, 17, 5))
    m2, _ = summarize(x, SummaryMode())
    assert np.allclose(m2, brute_prefix_mean(x), rtol=1e-13)


def test_summary_mode_validation():
    with pytest.raises(ValueError):
        SummaryMode("median")
    with pytest.raises(ValueError):
        SummaryMode("ema", 1.5)


def test_signature_of_negated_vector_is_complement():
    store = ChunkStore(8, h_bits=64, seed=1)
    v = rng.normal(3, 8)
    s, t = store.signature(v), store.signature(-v)
    assert s.shape == (64,)
    assert np.array_equal(s, ~t)


def test_signature_is_scale_invariant():
    store = ChunkStore(8, h_bits=64, seed=1)
    v = rng.normal(4, 8)
    assert np.array_equal(store.signature(v), store.signature(3.7 * v))


def test_bit_agreement_tracks_angle():
    # random hyperplanes agree on a bit with probability 1 - theta/pi
    d, n = 16, 400
    store = ChunkStore(d, h_bits=64, seed=5)
    theta = math.acos(0.99)
    agree = []
    for i in range(n):
        a = rng.normal(rng.derive(6, i), d)
        a /= np.linalg.norm(a)
        r = rng.normal(rng.derive(7, i), d)
        r -= (r @ a) * a
        r /= np.linalg.norm(r)
        b = math.cos(theta) * a + math.sin(theta) * r
        agree.append((store.signature(a) == store.signature(b)).mean())
    rate = float(np.mean(agree))
    assert rate >= 0.90
    assert rate == pytest.approx(1 - theta / math.pi, abs=0.01)


def test_insert_assigns_ids_and_centroids():
    store = ChunkStore(2, seed=0)
    k = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert store.insert(k, k, (0, 2)) == 0
    assert store.insert(k + 1, k, (2, 4)) == 1
    assert store.chunks[0].centroid.tolist() == [2.0, 3.0]
    assert store.chunks[1].token_range == (2, 4)
    assert len(store) == 2


def test_insert_validation():
    store = ChunkStore(2)
    with pytest.raises(DimensionError):
        store.insert(np.ones((2, 3)), np.ones((2, 3)), (0, 2))
    with pytest.raises(DimensionError):
        store.insert(np.ones((2, 2)), np.ones((2, 2)), (0, 3))
    with pytest.raises(DimensionError):
        store.insert(np.ones((0, 2)), np.ones((0, 2)), (0, 0))


def test_stored_chunks_are_read_only():
    store = ChunkStore(2)
    store.insert(np.ones((1, 2)), np.ones((1, 2)), (0, 1))
    with pytest.raises(ValueError):
        store.chunks[0].keys[0, 0] = 5.0


def test_retrieve_from_empty_store():
    assert ChunkStore(4).retrieve(np.ones(4)) == []
    assert retrieval_rows(ChunkStore(4), np.ones((2, 3, 4))).tolist() == np.zeros((2, 3, 4)).tolist()


def test_identical_centroid_ranks_first():
    hist = rng.normal(8, (2, 40, 6))
    store = chunk_store_from_sequence(hist[0], hist[1], 5, seed=2, top_r=3)
    target = store.chunks[4]
    hits = store.retrieve(target.centroid)
    assert len(hits) == 3
    assert hits[0][1] == 0
    assert hits[0][0].chunk_id == min(c.chunk_id for c, h in hits if h == 0)
    assert any(c.chunk_id == 4 for c, h in hits if h == 0)


def test_ties_break_by_lower_id():
    store = ChunkStore(3, seed=9, top_r=2)
    k = np.array([[1.0, 0.5, -0.2]])
    for t in range(4):
        store.insert(k, k, (t, t + 1))
    hits = store.retrieve(k[0])
    assert [(c.chunk_id, h) for c, h in hits] == [(0, 0), (1, 0)]


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 12), st.integers(0, 10))
def test_retrieve_contract(seed, top_r, n_chunks):
    d = 5
    store = ChunkStore(d, seed=seed, top_r=top_r)
    for i in range(n_chunks):
        kv = rng.normal(rng.derive(seed, i), (2, d))
        store.insert(kv, kv, (2 * i, 2 * i + 2))
    q = rng.normal(rng.derive(seed, 99), d)
    hits = store.retrieve(q)
    ids = [c.chunk_id for c, _ in hits]
    assert len(hits) == min(top_r, n_chunks)
    assert len(set(ids)) == len(ids)
    keys = [(h, c.chunk_id) for c, h in hits]
    assert keys == sorted(keys)
    sq = store.signature(q)
    assert all(h == int((store.signature(c.centroid) != sq).sum()) for c, h in hits)


def test_snapshot_roundtrip_is_bit_exact(tmp_path):
    hist = rng.normal(10, (2, 30, 4))
    store = chunk_store_from_sequence(hist[0], hist[1], 7, h_bits=64, seed=4, top_r=3)
    a, b = tmp_path / "a.bin", tmp_path / "b.bin"
    store.save(a)
    loaded = ChunkStore.load(a, top_r=3)
    loaded.save(b)
    assert a.read_bytes() == b.read_bytes()
    assert a.read_bytes()[:4] == b"MKA3"
    for c0, c1 in zip(store.chunks, loaded.chunks):
        assert c0.chunk_id == c1.chunk_id and c0.token_range == c1.token_range
        assert np.array_equal(c0.keys, c1.keys) and np.array_equal(c0.signature, c1.signature)
    q = rng.normal(11, 4)
    assert [c.chunk_id for c, _ in store.retrieve(q)] == [c.chunk_id for c, _ in loaded.retrieve(q)]


def test_snapshot_rejects_corruption(tmp_path):
    p = tmp_path / "s.bin"
    ChunkStore(3).save(p)
    data = p.read_bytes()
    (tmp_path / "bad_magic.bin").write_bytes(b"XXXX" + data[4:])
    (tmp_path / "trailing.bin").write_bytes(data + b"\0")
    for name in ("bad_magic.bin", "trailing.bin"):
        with pytest.raises(ValueError):
            ChunkStore.load(tmp_path / name)


def test_concurrent_inserts_keep_ids_unique():
    store = ChunkStore(3)
    kv = np.ones((1, 3))

    def work():
        for t in range(50):
            store.insert(kv, kv, (t, t + 1))

    threads = [threading.Thread(target=work) for _ in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert [c.chunk_id for c in store.chunks] == list(range(200))


def test_build_levels_shapes_and_errors():
    x = rng.normal(12, (1, 4, 3))
    lv = build_levels(x, SummaryMode())
    assert np.array_equal(lv.m1, x)
    assert not lv.m3.any()
    store = chunk_store_from_sequence(x[0], x[0], 2)
    with pytest.raises(ValueError):
        build_levels(x, SummaryMode(), store)
    with pytest.raises(DimensionError):
        build_levels(x, SummaryMode(), ChunkStore(5), x)
    lv = build_levels(x, SummaryMode(), store, x)
    assert lv.m3.shape == x.shape and lv.m3.any()
